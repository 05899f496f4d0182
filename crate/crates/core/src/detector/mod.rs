//! Desk-scale two-stage detector: conv backbone, RPN, RoI sampling, RoI-align
//! feature extraction, a linear projection head shared between the RoI and
//! ground-truth paths, and classification/regression heads.
//!
//! The backbone is a fixed four-stage 3x3 conv stack (strides 2,2,2,1 — total
//! stride 8) with configurable widths, projected to 256 channels for RoI
//! pooling. The projection head E1 is a linear 1x1 conv; since a 1x1 conv and
//! bilinear RoI pooling are both linear maps they commute, and the forward
//! pass applies E1 once to the full feature map before pooling (the per-RoI
//! form is exposed as [`Detector::projection_e1`] and agrees numerically).

pub mod boxcode;
pub mod sampler;

pub use sampler::{filter_background, sample_proposals, Proposal, SampledRoi};

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Ix2, Ix4, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::geometry::{BBox, LabeledBox};
use crate::rng::{rng_stream, stream};
use crate::tensor::{softmax_rows, Gradients, Tape, Var};
use boxcode::{decode_box, generate_anchors, nms};
use sampler::{assign_anchors, sample_anchors, HEAD_BOX_WEIGHTS};

/// Classification-head loss flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLossMode {
    CrossEntropy,
    Focal,
}

impl std::str::FromStr for HeadLossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" => Ok(Self::CrossEntropy),
            "focal" => Ok(Self::Focal),
            other => Err(Error::Config(format!(
                "unknown head_loss_mode '{other}' (expected cross_entropy | focal)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Foreground classes; background is the extra index `num_classes`.
    pub num_classes: usize,
    /// Widths of the four backbone stages.
    pub backbone_widths: [usize; 4],
    /// Channels of the pooled RoI features (projection target).
    pub roi_channels: usize,
    /// Spatial size of pooled RoI features.
    pub roi_pool: usize,
    /// Hidden width of the two-layer shared head.
    pub head_hidden: usize,
    /// Output width of the shared head (class embedding dimension).
    pub class_embed_dim: usize,
    pub anchor_scales: Vec<f64>,
    pub rpn_channels: usize,
    pub rpn_pre_nms_topn: usize,
    pub rpn_post_nms_topn_train: usize,
    pub rpn_post_nms_topn_test: usize,
    pub rpn_nms_iou: f64,
    pub rpn_fg_iou: f64,
    pub rpn_bg_iou: f64,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub min_box_size: f64,
    pub box_fg_iou: f64,
    pub fg_fraction: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            backbone_widths: [16, 32, 64, 64],
            roi_channels: 256,
            roi_pool: 7,
            head_hidden: 256,
            class_embed_dim: 1024,
            anchor_scales: vec![12.0, 20.0, 32.0],
            rpn_channels: 64,
            rpn_pre_nms_topn: 300,
            rpn_post_nms_topn_train: 32,
            rpn_post_nms_topn_test: 100,
            rpn_nms_iou: 0.7,
            rpn_fg_iou: 0.7,
            rpn_bg_iou: 0.3,
            rpn_batch: 64,
            rpn_pos_fraction: 0.5,
            min_box_size: 2.0,
            box_fg_iou: 0.5,
            fg_fraction: 0.25,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl DetectorConfig {
    /// Total backbone stride (fixed by the stage layout).
    pub fn stride(&self) -> usize {
        8
    }

    pub fn roi_flat_dim(&self) -> usize {
        self.roi_channels * self.roi_pool * self.roi_pool
    }

    pub fn background_class(&self) -> usize {
        self.num_classes
    }
}

/// Single-level feature map with its stride relative to the input image.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Array3<f64>, // (F, H', W')
    pub stride: usize,
}

/// Per-RoI outputs of the second stage.
#[derive(Debug, Clone)]
pub struct DetectorOutput {
    /// Softmax probabilities over `C + 1` classes, rows sum to 1.
    pub class_scores: Array2<f64>,
    pub box_deltas: Array2<f64>,
    /// Post-E1 pooled features, `(K, roi_channels, S, S)`.
    pub roi_embeddings: Array4<f64>,
    /// Shared-head outputs, `(K, class_embed_dim)`.
    pub class_embeddings: Array2<f64>,
}

struct ConvLayer {
    w: Rc<ArrayD<f64>>,
    b: Rc<ArrayD<f64>>,
}

struct LinLayer {
    w: Rc<ArrayD<f64>>,
    b: Rc<ArrayD<f64>>,
}

fn he_conv(rng: &mut impl Rng, f: usize, c: usize, k: usize, gain: f64) -> ArrayD<f64> {
    let std = gain * (2.0 / (c * k * k) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[f, c, k, k]), |_| normal(rng) * std)
}

fn lin_init(rng: &mut impl Rng, fan_in: usize, fan_out: usize, std: Option<f64>) -> ArrayD<f64> {
    let std = std.unwrap_or((2.0 / fan_in as f64).sqrt());
    ArrayD::from_shape_fn(IxDyn(&[fan_in, fan_out]), |_| normal(rng) * std)
}

fn normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout obvious.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Bias init with small jitter. Exact zeros would leave fully-dead feature
/// positions sitting exactly on the ReLU kink, where the loss is not
/// differentiable and finite differences disagree with any subgradient.
fn bias_init(rng: &mut impl Rng, n: usize) -> Rc<ArrayD<f64>> {
    Rc::new(ArrayD::from_shape_fn(IxDyn(&[n]), |_| {
        rng.random_range(-0.01..0.01)
    }))
}

/// The detector model: all parameters plus forward composition.
pub struct Detector {
    pub cfg: DetectorConfig,
    backbone: Vec<ConvLayer>,
    proj: ConvLayer,
    e1: ConvLayer,
    rpn_conv: ConvLayer,
    rpn_obj: ConvLayer,
    rpn_reg: ConvLayer,
    fc1: LinLayer,
    fc2: LinLayer,
    cls_head: LinLayer,
    reg_head: LinLayer,
}

/// Tape handles for every parameter, in `named_params` order.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// Tape handles for the shared convolutional trunk.
pub struct BaseVars {
    /// Backbone output, `(N, F, H', W')`.
    pub fmap: Var,
    /// Projected 256-channel map RoI features pool over.
    pub fmap_roi: Var,
    /// E1-projected map (pooling this equals applying E1 per RoI).
    pub fmap_e1: Var,
    pub rpn_obj: Var,
    pub rpn_reg: Var,
    pub image_sizes: Vec<(f64, f64)>,
}

/// A sampled anchor minibatch with its fixed targets.
pub struct RpnBatch {
    pub obj_idx: Vec<usize>,
    pub obj_targets: Vec<f64>,
    reg_flat_idx: Vec<usize>,
    reg_targets: Vec<[f64; 4]>,
    pub total_sampled: usize,
    pub positives: usize,
}

/// Tape handles for the per-RoI tower.
pub struct RoiVars {
    /// `(K, roi_channels, S, S)` post-E1 pooled features.
    pub aligned: Var,
    /// `(K, roi_channels * S * S)` flattened embeddings (RoI-level keys).
    pub flat: Var,
    /// `(K, class_embed_dim)` shared-head outputs (class-level queries).
    pub class_embed: Var,
    pub cls_logits: Var,
    pub box_deltas: Var,
}

impl Detector {
    pub fn new(cfg: DetectorConfig, seed: u64) -> Self {
        let mut rng = rng_stream(seed, stream::INIT);
        let w = cfg.backbone_widths;
        let mut backbone = Vec::new();
        let mut c_in = 3;
        for &f in &w {
            backbone.push(ConvLayer {
                w: Rc::new(he_conv(&mut rng, f, c_in, 3, 1.0)),
                b: bias_init(&mut rng, f),
            });
            c_in = f;
        }
        let proj = ConvLayer {
            w: Rc::new(he_conv(&mut rng, cfg.roi_channels, w[3], 1, 1.0)),
            b: bias_init(&mut rng, cfg.roi_channels),
        };
        // E1 is linear (no activation); unit-gain init.
        let e1 = ConvLayer {
            w: Rc::new(he_conv(&mut rng, cfg.roi_channels, cfg.roi_channels, 1, 0.7)),
            b: bias_init(&mut rng, cfg.roi_channels),
        };
        let rpn_conv = ConvLayer {
            w: Rc::new(he_conv(&mut rng, cfg.rpn_channels, w[3], 3, 1.0)),
            b: bias_init(&mut rng, cfg.rpn_channels),
        };
        let a = cfg.anchor_scales.len();
        let rpn_obj = ConvLayer {
            w: Rc::new(he_conv(&mut rng, a, cfg.rpn_channels, 1, 0.01)),
            b: bias_init(&mut rng, a),
        };
        let rpn_reg = ConvLayer {
            w: Rc::new(he_conv(&mut rng, 4 * a, cfg.rpn_channels, 1, 0.01)),
            b: bias_init(&mut rng, 4 * a),
        };
        let fc1 = LinLayer {
            w: Rc::new(lin_init(&mut rng, cfg.roi_flat_dim(), cfg.head_hidden, None)),
            b: bias_init(&mut rng, cfg.head_hidden),
        };
        let fc2 = LinLayer {
            w: Rc::new(lin_init(&mut rng, cfg.head_hidden, cfg.class_embed_dim, None)),
            b: bias_init(&mut rng, cfg.class_embed_dim),
        };
        let cls_head = LinLayer {
            w: Rc::new(lin_init(
                &mut rng,
                cfg.class_embed_dim,
                cfg.num_classes + 1,
                Some(0.01),
            )),
            b: bias_init(&mut rng, cfg.num_classes + 1),
        };
        let reg_head = LinLayer {
            w: Rc::new(lin_init(&mut rng, cfg.class_embed_dim, 4, Some(0.001))),
            b: bias_init(&mut rng, 4),
        };
        Self {
            cfg,
            backbone,
            proj,
            e1,
            rpn_conv,
            rpn_obj,
            rpn_reg,
            fc1,
            fc2,
            cls_head,
            reg_head,
        }
    }

    /// Parameters in a stable order: `(name, storage)`.
    pub fn named_params(&self) -> Vec<(String, &Rc<ArrayD<f64>>)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.w"), &l.w));
            out.push((format!("backbone.{i}.b"), &l.b));
        }
        for (name, l) in [
            ("proj", &self.proj),
            ("e1", &self.e1),
            ("rpn_conv", &self.rpn_conv),
            ("rpn_obj", &self.rpn_obj),
            ("rpn_reg", &self.rpn_reg),
        ] {
            out.push((format!("{name}.w"), &l.w));
            out.push((format!("{name}.b"), &l.b));
        }
        for (name, l) in [
            ("fc1", &self.fc1),
            ("fc2", &self.fc2),
            ("cls_head", &self.cls_head),
            ("reg_head", &self.reg_head),
        ] {
            out.push((format!("{name}.w"), &l.w));
            out.push((format!("{name}.b"), &l.b));
        }
        out
    }

    /// Mutable access in the same order as [`Self::named_params`]. Callers
    /// must have dropped every tape first (the `Rc`s must be unique).
    pub fn params_mut(&mut self) -> Vec<&mut Rc<ArrayD<f64>>> {
        let mut out: Vec<&mut Rc<ArrayD<f64>>> = Vec::new();
        for l in &mut self.backbone {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        for l in [
            &mut self.proj,
            &mut self.e1,
            &mut self.rpn_conv,
            &mut self.rpn_obj,
            &mut self.rpn_reg,
        ] {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.fc1.w);
        out.push(&mut self.fc1.b);
        out.push(&mut self.fc2.w);
        out.push(&mut self.fc2.b);
        out.push(&mut self.cls_head.w);
        out.push(&mut self.cls_head.b);
        out.push(&mut self.reg_head.w);
        out.push(&mut self.reg_head.b);
        out
    }

    /// Register every parameter as a tape leaf.
    pub fn register(&self, t: &mut Tape) -> ParamVars {
        let vars = self
            .named_params()
            .into_iter()
            .map(|(_, p)| t.param(Rc::clone(p)))
            .collect();
        ParamVars { vars }
    }

    fn layer_vars<'a>(&self, pv: &'a ParamVars) -> LayerVars<'a> {
        LayerVars {
            vars: &pv.vars,
            n_backbone: self.backbone.len(),
        }
    }

    /// Shared trunk on a batch of images `(N, 3, H, W)` in `[0, 1]`.
    /// Image sides must be divisible by the stride.
    pub fn forward_base(&self, t: &mut Tape, pv: &ParamVars, images: &Array4<f64>) -> Result<BaseVars> {
        let (n, c, h, w) = images.dim();
        if c != 3 {
            return Err(Error::Config(format!("expected 3-channel images, got {c}")));
        }
        let s = self.cfg.stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} not divisible by stride {s}"
            )));
        }
        let lv = self.layer_vars(pv);
        // Center pixel values; keeps early activations in a sane range.
        let x0 = t.constant(images.mapv(|v| (v - 0.5) * 2.0).into_dyn());
        let mut x = x0;
        for i in 0..self.backbone.len() {
            let stride = if i < 3 { 2 } else { 1 };
            let (wv, bv) = lv.backbone(i);
            let y = t.conv2d(x, wv, bv, stride, 1);
            x = t.relu(y);
        }
        let fmap = x;
        let (pw, pb) = lv.proj();
        let projected = t.conv2d(fmap, pw, pb, 1, 0);
        let fmap_roi = t.relu(projected);
        let (ew, eb) = lv.e1();
        let fmap_e1 = t.conv2d(fmap_roi, ew, eb, 1, 0);
        let (rw, rb) = lv.rpn_conv();
        let rpn_hidden = t.conv2d(fmap, rw, rb, 1, 1);
        let rpn_hidden = t.relu(rpn_hidden);
        let (ow, ob) = lv.rpn_obj();
        let rpn_obj = t.conv2d(rpn_hidden, ow, ob, 1, 0);
        let (gw, gb) = lv.rpn_reg();
        let rpn_reg = t.conv2d(rpn_hidden, gw, gb, 1, 0);
        Ok(BaseVars {
            fmap,
            fmap_roi,
            fmap_e1,
            rpn_obj,
            rpn_reg,
            image_sizes: vec![(w as f64, h as f64); n],
        })
    }

    /// Anchors for the feature map size of `base`.
    pub fn anchors_for(&self, t: &Tape, base: &BaseVars) -> Vec<[f64; 4]> {
        let dim = t
            .value(base.fmap)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .dim();
        generate_anchors(dim.2, dim.3, self.cfg.stride(), &self.cfg.anchor_scales)
    }

    /// Decode, clip, filter, and NMS the RPN outputs into per-image proposals.
    pub fn proposals_from_rpn(&self, t: &Tape, base: &BaseVars, train: bool) -> Vec<Vec<Proposal>> {
        let obj = t
            .value(base.rpn_obj)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        let reg = t
            .value(base.rpn_reg)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        let (n, a, fh, fw) = obj.dim();
        let anchors = generate_anchors(fh, fw, self.cfg.stride(), &self.cfg.anchor_scales);
        let top_n = if train {
            self.cfg.rpn_post_nms_topn_train
        } else {
            self.cfg.rpn_post_nms_topn_test
        };
        let mut out = Vec::with_capacity(n);
        for img in 0..n {
            let (iw, ih) = base.image_sizes[img];
            let mut cands: Vec<(BBox, f64)> = Vec::new();
            for (ai, anchor) in anchors.iter().enumerate() {
                // anchors are (y, x, scale)-ordered
                let s = ai % a;
                let cell = ai / a;
                let y = cell / fw;
                let x = cell % fw;
                let logit = obj[[img, s, y, x]];
                let delta = [
                    reg[[img, s * 4, y, x]],
                    reg[[img, s * 4 + 1, y, x]],
                    reg[[img, s * 4 + 2, y, x]],
                    reg[[img, s * 4 + 3, y, x]],
                ];
                let corners = decode_box(*anchor, delta, [1.0; 4]);
                let Ok(bbox) = BBox::new(corners[0], corners[1], corners[2], corners[3]) else {
                    continue;
                };
                let Ok(bbox) = bbox.clip_to_image(iw, ih) else {
                    continue;
                };
                if bbox.width() < self.cfg.min_box_size || bbox.height() < self.cfg.min_box_size {
                    continue;
                }
                cands.push((bbox, logit));
            }
            let mut order: Vec<usize> = (0..cands.len()).collect();
            order.sort_by(|&p, &q| cands[q].1.partial_cmp(&cands[p].1).unwrap().then(p.cmp(&q)));
            order.truncate(self.cfg.rpn_pre_nms_topn);
            let boxes: Vec<BBox> = order.iter().map(|&i| cands[i].0).collect();
            let scores: Vec<f64> = order.iter().map(|&i| cands[i].1).collect();
            let keep = nms(&boxes, &scores, self.cfg.rpn_nms_iou);
            let props = keep
                .into_iter()
                .take(top_n)
                .map(|i| Proposal {
                    bbox: boxes[i],
                    objectness: 1.0 / (1.0 + (-scores[i]).exp()),
                })
                .collect();
            out.push(props);
        }
        out
    }

    /// Assign and sample anchors for RPN training; the result pins the loss
    /// structure so the tape part is a smooth function of the parameters.
    pub fn prepare_rpn_batch<R: Rng>(
        &self,
        t: &Tape,
        base: &BaseVars,
        gts: &[Vec<LabeledBox>],
        rng: &mut R,
    ) -> RpnBatch {
        let dim = t
            .value(base.rpn_obj)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .dim();
        let (n, a, fh, fw) = dim;
        let anchors = generate_anchors(fh, fw, self.cfg.stride(), &self.cfg.anchor_scales);
        // Flat index of anchor ai for image img inside the (N,A,H,W) logits.
        let flat_obj = |img: usize, ai: usize| {
            let s = ai % a;
            let cell = ai / a;
            ((img * a + s) * fh + cell / fw) * fw + cell % fw
        };
        let mut batch = RpnBatch {
            obj_idx: Vec::new(),
            obj_targets: Vec::new(),
            reg_flat_idx: Vec::new(),
            reg_targets: Vec::new(),
            total_sampled: 0,
            positives: 0,
        };
        for img in 0..n {
            let targets = assign_anchors(&anchors, &gts[img], self.cfg.rpn_fg_iou, self.cfg.rpn_bg_iou);
            let (idx, labels) = sample_anchors(&targets, self.cfg.rpn_batch, self.cfg.rpn_pos_fraction, rng);
            batch.total_sampled += idx.len();
            for (&ai, &lab) in idx.iter().zip(&labels) {
                batch.obj_idx.push(flat_obj(img, ai));
                batch.obj_targets.push(lab);
                if lab == 1.0 {
                    batch.positives += 1;
                    let s = ai % a;
                    let cell = ai / a;
                    let (y, x) = (cell / fw, cell % fw);
                    for c in 0..4 {
                        batch
                            .reg_flat_idx
                            .push(((img * (4 * a) + s * 4 + c) * fh + y) * fw + x);
                    }
                    batch.reg_targets.push(targets.deltas[ai]);
                }
            }
        }
        batch
    }

    /// RPN objectness + anchor regression loss for a prepared batch.
    pub fn rpn_loss_from_batch(&self, t: &mut Tape, base: &BaseVars, batch: &RpnBatch) -> Var {
        let dim = t
            .value(base.rpn_obj)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .dim();
        let (n, a, fh, fw) = (dim.0, dim.1 / 1, dim.2, dim.3);
        let obj_loss = t.bce_with_logits(base.rpn_obj, &batch.obj_idx, &batch.obj_targets);
        if batch.reg_targets.is_empty() {
            return obj_loss;
        }
        let p = batch.reg_targets.len();
        let reg_flat = t.reshape(base.rpn_reg, &[n * 4 * a * fh * fw, 1]);
        let gathered = t.gather_rows(reg_flat, &batch.reg_flat_idx); // (4P, 1)
        let pred = t.reshape(gathered, &[p, 4]);
        let target = Array2::from_shape_fn((p, 4), |(r, c)| batch.reg_targets[r][c]);
        let rows: Vec<usize> = (0..p).collect();
        let reg_loss = t.smooth_l1(pred, target, &rows, batch.total_sampled.max(1) as f64, 1.0 / 9.0);
        t.add(obj_loss, reg_loss)
    }

    /// Convenience: [`Self::prepare_rpn_batch`] followed by
    /// [`Self::rpn_loss_from_batch`].
    pub fn rpn_loss<R: Rng>(
        &self,
        t: &mut Tape,
        base: &BaseVars,
        gts: &[Vec<LabeledBox>],
        rng: &mut R,
    ) -> Var {
        let batch = self.prepare_rpn_batch(t, base, gts, rng);
        self.rpn_loss_from_batch(t, base, &batch)
    }

    /// RoI tower over `boxes` (batch index + corner quadruple) on the
    /// E1-projected map.
    pub fn roi_tower(&self, t: &mut Tape, pv: &ParamVars, fmap_e1: Var, boxes: &[(usize, [f64; 4])]) -> RoiVars {
        let lv = self.layer_vars(pv);
        let scale = 1.0 / self.cfg.stride() as f64;
        let aligned = t.roi_align(fmap_e1, boxes, scale, self.cfg.roi_pool);
        let flat = t.reshape(aligned, &[boxes.len(), self.cfg.roi_flat_dim()]);
        let (w1, b1) = lv.fc1();
        let h1 = t.linear(flat, w1, b1);
        let h1 = t.relu(h1);
        let (w2, b2) = lv.fc2();
        let h2 = t.linear(h1, w2, b2);
        let class_embed = t.relu(h2);
        let (cw, cb) = lv.cls_head();
        let cls_logits = t.linear(class_embed, cw, cb);
        let (rw, rb) = lv.reg_head();
        let box_deltas = t.linear(class_embed, rw, rb);
        RoiVars {
            aligned,
            flat,
            class_embed,
            cls_logits,
            box_deltas,
        }
    }

    /// Classification + box-regression losses over the sampled RoIs.
    pub fn head_loss_vars(
        &self,
        t: &mut Tape,
        roi: &RoiVars,
        sampled: &[SampledRoi],
        mode: HeadLossMode,
    ) -> (Var, Var) {
        let bg = self.cfg.background_class();
        let targets: Vec<usize> = sampled
            .iter()
            .map(|r| r.assigned_class.unwrap_or(bg))
            .collect();
        let cls = match mode {
            HeadLossMode::CrossEntropy => t.softmax_cross_entropy(roi.cls_logits, &targets),
            HeadLossMode::Focal => t.focal_loss(
                roi.cls_logits,
                &targets,
                self.cfg.focal_gamma,
                self.cfg.focal_alpha,
                bg,
            ),
        };
        let fg_rows: Vec<usize> = (0..sampled.len())
            .filter(|&i| sampled[i].is_foreground())
            .collect();
        let target = Array2::from_shape_fn((sampled.len(), 4), |(r, c)| {
            sampled[r].regression_target[c]
        });
        let reg = t.smooth_l1(
            roi.box_deltas,
            target,
            &fg_rows,
            sampled.len().max(1) as f64,
            1.0,
        );
        (cls, reg)
    }

    // ------------------------------------------------------------------
    // Value-level wrappers (single image), used by tests and inference.
    // ------------------------------------------------------------------

    fn image_batch(image: &Array3<f64>) -> Array4<f64> {
        let (c, h, w) = image.dim();
        image
            .to_owned()
            .into_shape_with_order((1, c, h, w))
            .unwrap()
    }

    /// Backbone features for one `(3, H, W)` image.
    pub fn backbone_forward(&self, image: &Array3<f64>) -> Result<FeatureMap> {
        let mut t = Tape::new();
        let pv = self.register(&mut t);
        let base = self.forward_base(&mut t, &pv, &Self::image_batch(image))?;
        let v = t
            .value(base.fmap)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .index_axis(ndarray::Axis(0), 0)
            .to_owned();
        Ok(FeatureMap {
            values: v,
            stride: self.cfg.stride(),
        })
    }

    /// The 256-channel map RoI features are pooled from.
    pub fn roi_feature_map(&self, image: &Array3<f64>) -> Result<FeatureMap> {
        let mut t = Tape::new();
        let pv = self.register(&mut t);
        let base = self.forward_base(&mut t, &pv, &Self::image_batch(image))?;
        let v = t
            .value(base.fmap_roi)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .index_axis(ndarray::Axis(0), 0)
            .to_owned();
        Ok(FeatureMap {
            values: v,
            stride: self.cfg.stride(),
        })
    }

    /// Proposals for one image; with ground truth provided, also the RPN loss.
    pub fn rpn_forward<R: Rng>(
        &self,
        image: &Array3<f64>,
        gts: Option<&[LabeledBox]>,
        rng: &mut R,
    ) -> Result<(Vec<Proposal>, Option<f64>)> {
        if self.cfg.anchor_scales.is_empty() {
            return Err(Error::Config("no anchor scales configured".into()));
        }
        let mut t = Tape::new();
        let pv = self.register(&mut t);
        let base = self.forward_base(&mut t, &pv, &Self::image_batch(image))?;
        let props = self.proposals_from_rpn(&t, &base, gts.is_some());
        let loss = gts.map(|g| {
            let lv = self.rpn_loss(&mut t, &base, &[g.to_vec()], rng);
            t.scalar(lv)
        });
        Ok((props.into_iter().next().unwrap(), loss))
    }

    /// Pool `(F, S, S)` features for each box from a feature map
    /// (RoIAlign-style bilinear sampling, one sample per bin center).
    pub fn roi_features(&self, features: &FeatureMap, boxes: &[BBox]) -> Result<Array4<f64>> {
        let (f, h, w) = features.values.dim();
        let (iw, ih) = (
            (w * features.stride) as f64,
            (h * features.stride) as f64,
        );
        for b in boxes {
            if b.x0() < 0.0 || b.y0() < 0.0 || b.x1() > iw || b.y1() > ih {
                return Err(Error::InvalidBox(format!(
                    "box ({}, {}, {}, {}) outside {iw}x{ih} image",
                    b.x0(),
                    b.y0(),
                    b.x1(),
                    b.y1()
                )));
            }
        }
        let mut t = Tape::new();
        let arr = features
            .values
            .to_owned()
            .into_shape_with_order((1, f, h, w))
            .unwrap();
        let x = t.constant(arr.into_dyn());
        let tagged: Vec<(usize, [f64; 4])> = boxes.iter().map(|b| (0, b.corners())).collect();
        let y = t.roi_align(x, &tagged, 1.0 / features.stride as f64, self.cfg.roi_pool);
        Ok(t.value(y)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned())
    }

    /// Per-RoI E1 projection of one pooled `(256, S, S)` feature, flattened.
    /// Identical parameters serve the RoI path and the GT path.
    pub fn projection_e1(&self, roi_feature: &Array3<f64>) -> Result<Array1<f64>> {
        let (c, s1, s2) = roi_feature.dim();
        if c != self.cfg.roi_channels || s1 != self.cfg.roi_pool || s2 != self.cfg.roi_pool {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.roi_channels,
                got: c,
            });
        }
        // (C,S,S) -> rows (S*S, C), 1x1 conv = matmul with (C_out, C_in).
        let spatial = s1 * s2;
        let mut rows = Array2::<f64>::zeros((spatial, c));
        for ci in 0..c {
            for p in 0..spatial {
                rows[[p, ci]] = roi_feature[[ci, p / s2, p % s2]];
            }
        }
        let wmat = self
            .e1
            .w
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_shape((self.cfg.roi_channels, c))
            .unwrap()
            .to_owned();
        let b = self.e1.b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out_rows = rows.dot(&wmat.t());
        out_rows += &b;
        // back to (C,S,S) flattened channel-major
        let mut flat = Array1::<f64>::zeros(c * spatial);
        for ci in 0..c {
            for p in 0..spatial {
                flat[ci * spatial + p] = out_rows[[p, ci]];
            }
        }
        Ok(flat)
    }

    /// Shared two-layer head on one post-E1 pooled feature.
    pub fn shared_head(&self, roi_feature: &Array3<f64>) -> Result<Array1<f64>> {
        let (c, s1, s2) = roi_feature.dim();
        if c * s1 * s2 != self.cfg.roi_flat_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.roi_flat_dim(),
                got: c * s1 * s2,
            });
        }
        let flat = roi_feature
            .to_owned()
            .into_shape_with_order((1, c * s1 * s2))
            .unwrap();
        let mut t = Tape::new();
        let x = t.constant(flat.into_dyn());
        let w1 = t.param(Rc::clone(&self.fc1.w));
        let b1 = t.param(Rc::clone(&self.fc1.b));
        let h1 = t.linear(x, w1, b1);
        let h1 = t.relu(h1);
        let w2 = t.param(Rc::clone(&self.fc2.w));
        let b2 = t.param(Rc::clone(&self.fc2.b));
        let h2 = t.linear(h1, w2, b2);
        let out = t.relu(h2);
        Ok(t.value(out)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .row(0)
            .to_owned())
    }

    /// Full second-stage outputs for the given boxes of one image.
    pub fn describe_rois(&self, image: &Array3<f64>, boxes: &[BBox]) -> Result<DetectorOutput> {
        let mut t = Tape::new();
        let pv = self.register(&mut t);
        let base = self.forward_base(&mut t, &pv, &Self::image_batch(image))?;
        let tagged: Vec<(usize, [f64; 4])> = boxes.iter().map(|b| (0, b.corners())).collect();
        let roi = self.roi_tower(&mut t, &pv, base.fmap_e1, &tagged);
        let logits = t
            .value(roi.cls_logits)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned();
        Ok(DetectorOutput {
            class_scores: softmax_rows(&logits),
            box_deltas: t
                .value(roi.box_deltas)
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned(),
            roi_embeddings: t
                .value(roi.aligned)
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .to_owned(),
            class_embeddings: t
                .value(roi.class_embed)
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned(),
        })
    }

    /// Detect on one image: per-class NMS at `nms_iou`, score threshold, at
    /// most 100 detections.
    pub fn inference(
        &self,
        image: &Array3<f64>,
        score_threshold: f64,
        nms_iou: f64,
    ) -> Result<Vec<(LabeledBox, f64)>> {
        let mut t = Tape::new();
        let pv = self.register(&mut t);
        let base = self.forward_base(&mut t, &pv, &Self::image_batch(image))?;
        let proposals = self.proposals_from_rpn(&t, &base, false).remove(0);
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let tagged: Vec<(usize, [f64; 4])> =
            proposals.iter().map(|p| (0, p.bbox.corners())).collect();
        let roi = self.roi_tower(&mut t, &pv, base.fmap_e1, &tagged);
        let logits = t
            .value(roi.cls_logits)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned();
        let probs = softmax_rows(&logits);
        let deltas = t
            .value(roi.box_deltas)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned();
        let (iw, ih) = base.image_sizes[0];
        let mut dets: Vec<(LabeledBox, f64, usize)> = Vec::new();
        for class in 0..self.cfg.num_classes {
            let mut boxes = Vec::new();
            let mut scores = Vec::new();
            for (k, p) in proposals.iter().enumerate() {
                let score = probs[[k, class]];
                if score < score_threshold {
                    continue;
                }
                let d = [deltas[[k, 0]], deltas[[k, 1]], deltas[[k, 2]], deltas[[k, 3]]];
                let corners = decode_box(p.bbox.corners(), d, HEAD_BOX_WEIGHTS);
                let Ok(bbox) = BBox::new(corners[0], corners[1], corners[2], corners[3]) else {
                    continue;
                };
                let Ok(bbox) = bbox.clip_to_image(iw, ih) else {
                    continue;
                };
                boxes.push(bbox);
                scores.push(score);
            }
            for i in nms(&boxes, &scores, nms_iou) {
                dets.push((LabeledBox::new(boxes[i], class), scores[i], dets.len()));
            }
        }
        dets.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.2.cmp(&b.2)));
        dets.truncate(100);
        Ok(dets.into_iter().map(|(b, s, _)| (b, s)).collect())
    }
}

/// Plain head-loss values for externally supplied logits/deltas.
pub fn head_losses(
    cls_logits: &Array2<f64>,
    box_deltas: &Array2<f64>,
    sampled: &[SampledRoi],
    mode: HeadLossMode,
    num_classes: usize,
    focal_gamma: f64,
    focal_alpha: f64,
) -> (f64, f64) {
    let mut t = Tape::new();
    let logits = t.constant(cls_logits.to_owned().into_dyn());
    let deltas = t.constant(box_deltas.to_owned().into_dyn());
    let bg = num_classes;
    let targets: Vec<usize> = sampled
        .iter()
        .map(|r| r.assigned_class.unwrap_or(bg))
        .collect();
    let cls = match mode {
        HeadLossMode::CrossEntropy => t.softmax_cross_entropy(logits, &targets),
        HeadLossMode::Focal => t.focal_loss(logits, &targets, focal_gamma, focal_alpha, bg),
    };
    let fg_rows: Vec<usize> = (0..sampled.len())
        .filter(|&i| sampled[i].is_foreground())
        .collect();
    let target = Array2::from_shape_fn((sampled.len(), 4), |(r, c)| sampled[r].regression_target[c]);
    let rows = fg_rows;
    let reg = t.smooth_l1(deltas, target, &rows, sampled.len().max(1) as f64, 1.0);
    (t.scalar(cls), t.scalar(reg))
}

struct LayerVars<'a> {
    vars: &'a [Var],
    n_backbone: usize,
}

impl LayerVars<'_> {
    fn backbone(&self, i: usize) -> (Var, Var) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }
    fn at(&self, slot: usize) -> (Var, Var) {
        let base = 2 * self.n_backbone + 2 * slot;
        (self.vars[base], self.vars[base + 1])
    }
    fn proj(&self) -> (Var, Var) {
        self.at(0)
    }
    fn e1(&self) -> (Var, Var) {
        self.at(1)
    }
    fn rpn_conv(&self) -> (Var, Var) {
        self.at(2)
    }
    fn rpn_obj(&self) -> (Var, Var) {
        self.at(3)
    }
    fn rpn_reg(&self) -> (Var, Var) {
        self.at(4)
    }
    fn fc1(&self) -> (Var, Var) {
        self.at(5)
    }
    fn fc2(&self) -> (Var, Var) {
        self.at(6)
    }
    fn cls_head(&self) -> (Var, Var) {
        self.at(7)
    }
    fn reg_head(&self) -> (Var, Var) {
        self.at(8)
    }
}

/// Collect parameter gradients (zeros where a parameter was unused).
pub fn param_grads(pv: &ParamVars, grads: &mut Gradients, shapes: &[(String, Rc<ArrayD<f64>>)]) -> Vec<ArrayD<f64>> {
    pv.vars
        .iter()
        .zip(shapes)
        .map(|(&v, (_, p))| {
            grads
                .take(v)
                .unwrap_or_else(|| ArrayD::zeros(p.raw_dim()))
        })
        .collect()
}

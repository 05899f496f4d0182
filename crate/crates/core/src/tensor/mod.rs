//! Minimal tape-based reverse-mode autodiff over f64 `ndarray` values.
//!
//! Just enough ops for a small two-stage detector: convolution (via im2col),
//! linear layers, ReLU, RoI-align pooling, row gather/reshape, fused detection
//! losses, and the supervised contrastive loss. Values are `f64` throughout so
//! finite-difference checks hold at tight tolerances.
//!
//! A [`Tape`] is built per training step: register leaves (parameters share
//! their storage via `Rc`), compose ops, call [`Tape::backward`] on the scalar
//! loss, then drop the tape before the optimizer mutates parameters.

mod im2col;

pub use im2col::bilinear_coeffs;

use ndarray::{Array2, ArrayD, Axis, Ix2, Ix4, IxDyn};
use std::rc::Rc;

use crate::contrast::{supervised_contrast_loss, LabeledEmbeddingBatch};
use crate::error::{Error, Result};
use im2col::{col2im_accumulate, im2col};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    WeightedSum(Vec<(Var, f64)>),
    Relu(Var),
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Array2<f64>,
    },
    RoiAlign {
        x: Var,
        boxes: Vec<(usize, [f64; 4])>,
        spatial_scale: f64,
        out_size: usize,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Array2<f64>,
    },
    Focal {
        logits: Var,
        targets: Vec<usize>,
        probs: Array2<f64>,
        gamma: f64,
        alpha: f64,
        bg_class: usize,
    },
    SmoothL1 {
        pred: Var,
        target: Array2<f64>,
        rows: Vec<usize>,
        norm: f64,
        beta: f64,
    },
    BceWithLogits {
        logits: Var,
        idx: Vec<usize>,
        targets: Vec<f64>,
    },
    SupCon {
        queries: Var,
        keys: Var,
        grad_q: Array2<f64>,
        grad_k: Array2<f64>,
    },
}

struct Node {
    value: Rc<ArrayD<f64>>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads[v.0].take()
    }
}

/// Numerically stable row softmax; shared with inference paths that read
/// probabilities straight from logit values.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - m).exp();
            z += e;
            e
        });
        row.mapv_inplace(|v| v / z);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf sharing its storage with the caller.
    pub fn param(&mut self, value: Rc<ArrayD<f64>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf (inputs, detached embeddings).
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        val.iter().next().copied().unwrap()
    }

    fn value2(&self, v: Var) -> ndarray::ArrayView2<'_, f64> {
        self.value(v)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected rank-2 value")
    }

    /// `sum_i coeff_i * x_i` over same-shape values (scalars included).
    pub fn weighted_sum(&mut self, parts: &[(Var, f64)]) -> Var {
        assert!(!parts.is_empty());
        let mut acc = self.value(parts[0].0).mapv(|v| v * parts[0].1);
        for &(v, k) in &parts[1..] {
            acc.zip_mut_with(self.value(v), |a, &b| *a += k * b);
        }
        let needs = parts.iter().any(|&(v, _)| self.needs(v));
        self.push(acc, Op::WeightedSum(parts.to_vec()), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.weighted_sum(&[(a, 1.0), (b, 1.0)])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.weighted_sum(&[(a, k)])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(y, Op::Relu(x), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value2(a).dot(&self.value2(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(y.into_dyn(), Op::Matmul(a, b), needs)
    }

    /// `x @ w + b` with `x: (m, k)`, `w: (k, n)`, `b: (n)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let mut y = self.value2(x).dot(&self.value2(w));
        let bv = self.value(b);
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        y += &b1;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(y.into_dyn(), Op::Linear { x, w, b }, needs)
    }

    /// `x: (N, C, H, W)`, `w: (F, C, KH, KW)`, `b: (F)`; zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let (n, _c, _h, _wd) = xv.dim();
        let (f, c2, kh, kw) = wv.dim();
        let (cols, oh, ow) = im2col(&xv, kh, kw, stride, pad);
        let wmat = wv.to_shape((f, c2 * kh * kw)).unwrap();
        let mut ymat = cols.dot(&wmat.t()); // (n*oh*ow, f)
        let bv = self.value(b);
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        ymat += &b1;
        let y = ymat
            .into_shape_with_order((n, oh, ow, f))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            y.into_dyn(),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            needs,
        )
    }

    /// Pool each box to `(C, out_size, out_size)` by sampling one bilinear
    /// point per bin at the bin center. Boxes are `(batch_index, [x0,y0,x1,y1])`
    /// in input-image pixels; `spatial_scale` maps pixels to feature cells.
    /// Gradients flow to the feature map only.
    pub fn roi_align(
        &mut self,
        x: Var,
        boxes: &[(usize, [f64; 4])],
        spatial_scale: f64,
        out_size: usize,
    ) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (_n, c, h, w) = xv.dim();
        let k = boxes.len();
        let s = out_size;
        let mut y = ndarray::Array4::<f64>::zeros((k, c, s, s));
        for (bi, &(img, bx)) in boxes.iter().enumerate() {
            let mx0 = bx[0] * spatial_scale;
            let my0 = bx[1] * spatial_scale;
            let bw = (bx[2] - bx[0]) * spatial_scale / s as f64;
            let bh = (bx[3] - bx[1]) * spatial_scale / s as f64;
            for i in 0..s {
                let py = my0 + (i as f64 + 0.5) * bh;
                for j in 0..s {
                    let px = mx0 + (j as f64 + 0.5) * bw;
                    let coeffs = bilinear_coeffs(py, px, h, w);
                    for ci in 0..c {
                        let mut v = 0.0;
                        for &(yy, xx, wt) in &coeffs {
                            v += wt * xv[[img, ci, yy, xx]];
                        }
                        y[[bi, ci, i, j]] = v;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            y.into_dyn(),
            Op::RoiAlign {
                x,
                boxes: boxes.to_vec(),
                spatial_scale,
                out_size,
            },
            needs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self
            .value(x)
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape must preserve element count");
        let needs = self.needs(x);
        self.push(y, Op::Reshape(x), needs)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value2(x);
        let d = xv.ncols();
        let mut y = Array2::<f64>::zeros((idx.len(), d));
        for (r, &i) in idx.iter().enumerate() {
            y.row_mut(r).assign(&xv.row(i));
        }
        let needs = self.needs(x);
        self.push(
            y.into_dyn(),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            needs,
        )
    }

    /// Mean cross-entropy of row-softmax `logits` against integer targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value2(logits).to_owned();
        assert_eq!(lv.nrows(), targets.len());
        let probs = softmax_rows(&lv);
        let n = targets.len().max(1);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            loss -= probs[[r, t]].max(f64::MIN_POSITIVE).ln();
        }
        loss /= n as f64;
        let needs = self.needs(logits);
        self.push(
            ndarray::arr0(loss).into_dyn(),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        )
    }

    /// Mean softmax focal loss; `alpha` weights foreground rows, `1 - alpha`
    /// rows whose target is `bg_class`. `gamma = 0` with `alpha = 0.5`
    /// reduces to cross-entropy scaled by 0.5.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        targets: &[usize],
        gamma: f64,
        alpha: f64,
        bg_class: usize,
    ) -> Var {
        let lv = self.value2(logits).to_owned();
        assert_eq!(lv.nrows(), targets.len());
        let probs = softmax_rows(&lv);
        let n = targets.len().max(1);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let a = if t == bg_class { 1.0 - alpha } else { alpha };
            let p = probs[[r, t]].max(f64::MIN_POSITIVE);
            loss += a * (1.0 - p).powf(gamma) * -p.ln();
        }
        loss /= n as f64;
        let needs = self.needs(logits);
        self.push(
            ndarray::arr0(loss).into_dyn(),
            Op::Focal {
                logits,
                targets: targets.to_vec(),
                probs,
                gamma,
                alpha,
                bg_class,
            },
            needs,
        )
    }

    /// Smooth-L1 between `pred` and constant `target`, summed over the given
    /// rows and divided by `norm`.
    pub fn smooth_l1(
        &mut self,
        pred: Var,
        target: Array2<f64>,
        rows: &[usize],
        norm: f64,
        beta: f64,
    ) -> Var {
        let pv = self.value2(pred);
        let mut loss = 0.0;
        for &r in rows {
            for c in 0..pv.ncols() {
                let d = pv[[r, c]] - target[[r, c]];
                loss += if d.abs() < beta {
                    0.5 * d * d / beta
                } else {
                    d.abs() - 0.5 * beta
                };
            }
        }
        loss /= norm;
        let needs = self.needs(pred);
        self.push(
            ndarray::arr0(loss).into_dyn(),
            Op::SmoothL1 {
                pred,
                target,
                rows: rows.to_vec(),
                norm,
                beta,
            },
            needs,
        )
    }

    /// Mean binary cross-entropy with logits over the selected flat indices.
    pub fn bce_with_logits(&mut self, logits: Var, idx: &[usize], targets: &[f64]) -> Var {
        assert_eq!(idx.len(), targets.len());
        let flat = self.value(logits);
        let slice = flat.as_slice().expect("logits must be contiguous");
        let n = idx.len().max(1);
        let mut loss = 0.0;
        for (&i, &t) in idx.iter().zip(targets) {
            let z: f64 = slice[i];
            loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        loss /= n as f64;
        let needs = self.needs(logits);
        self.push(
            ndarray::arr0(loss).into_dyn(),
            Op::BceWithLogits {
                logits,
                idx: idx.to_vec(),
                targets: targets.to_vec(),
            },
            needs,
        )
    }

    /// Supervised contrastive loss between labeled query and key rows.
    /// Gradients flow into both sides (keys may be a constant leaf, e.g. a
    /// detached memory-bank view).
    pub fn supcon(
        &mut self,
        queries: Var,
        q_labels: &[usize],
        keys: Var,
        k_labels: &[usize],
        tau: f64,
        normalize_positives: bool,
    ) -> Result<Var> {
        let qb = LabeledEmbeddingBatch::new(self.value2(queries).to_owned(), q_labels.to_vec())?;
        let kb = LabeledEmbeddingBatch::new(self.value2(keys).to_owned(), k_labels.to_vec())?;
        let out = supervised_contrast_loss(&qb, &kb, tau, normalize_positives)?;
        let needs = self.needs(queries) || self.needs(keys);
        Ok(self.push(
            ndarray::arr0(out.loss).into_dyn(),
            Op::SupCon {
                queries,
                keys,
                grad_q: out.grad_queries,
                grad_k: out.grad_keys,
            },
            needs,
        ))
    }

    fn accumulate(grads: &mut [Option<ArrayD<f64>>], v: Var, delta: ArrayD<f64>) {
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    /// Reverse pass from a scalar `loss`. Returns per-node gradients for every
    /// node on a grad-requiring path.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ndarray::arr0(1.0).into_dyn());
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::WeightedSum(parts) => {
                    for &(v, k) in parts {
                        if self.needs(v) {
                            Self::accumulate(&mut grads, v, g.mapv(|x| x * k));
                        }
                    }
                }
                Op::Relu(x) => {
                    if self.needs(*x) {
                        let y = &self.nodes[id].value;
                        let mut d = g.clone();
                        d.zip_mut_with(y, |dv, &yv| {
                            if yv <= 0.0 {
                                *dv = 0.0;
                            }
                        });
                        Self::accumulate(&mut grads, *x, d);
                    }
                }
                Op::Matmul(a, b) => {
                    let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                    if self.needs(*a) {
                        let da = gm.dot(&self.value2(*b).t());
                        Self::accumulate(&mut grads, *a, da.into_dyn());
                    }
                    if self.needs(*b) {
                        let db = self.value2(*a).t().dot(&gm);
                        Self::accumulate(&mut grads, *b, db.into_dyn());
                    }
                }
                Op::Linear { x, w, b } => {
                    let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                    if self.needs(*x) {
                        let dx = gm.dot(&self.value2(*w).t());
                        Self::accumulate(&mut grads, *x, dx.into_dyn());
                    }
                    if self.needs(*w) {
                        let dw = self.value2(*x).t().dot(&gm);
                        Self::accumulate(&mut grads, *w, dw.into_dyn());
                    }
                    if self.needs(*b) {
                        let db = gm.sum_axis(Axis(0));
                        Self::accumulate(&mut grads, *b, db.into_dyn());
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    cols,
                } => {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, f, oh, ow) = g4.dim();
                    let gmat = g4
                        .permuted_axes([0, 2, 3, 1])
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order((n * oh * ow, f))
                        .unwrap();
                    let wv = self.value(*w).view().into_dimensionality::<Ix4>().unwrap();
                    let (fo, c, kh, kw) = wv.dim();
                    if self.needs(*w) {
                        let wgrad = gmat.t().dot(cols); // (f, c*kh*kw)
                        let dw = wgrad
                            .into_shape_with_order((fo, c, kh, kw))
                            .unwrap()
                            .into_dyn();
                        Self::accumulate(&mut grads, *w, dw);
                    }
                    if self.needs(*b) {
                        let db = gmat.sum_axis(Axis(0));
                        Self::accumulate(&mut grads, *b, db.into_dyn());
                    }
                    if self.needs(*x) {
                        let wmat = wv.to_shape((fo, c * kh * kw)).unwrap();
                        let dcols = gmat.dot(&wmat);
                        let mut dx = ndarray::Array4::<f64>::zeros(
                            self.value(*x)
                                .view()
                                .into_dimensionality::<Ix4>()
                                .unwrap()
                                .dim(),
                        );
                        col2im_accumulate(&dcols, &mut dx.view_mut(), kh, kw, *stride, *pad);
                        Self::accumulate(&mut grads, *x, dx.into_dyn());
                    }
                }
                Op::RoiAlign {
                    x,
                    boxes,
                    spatial_scale,
                    out_size,
                } => {
                    if self.needs(*x) {
                        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                        let xdim = self
                            .value(*x)
                            .view()
                            .into_dimensionality::<Ix4>()
                            .unwrap()
                            .dim();
                        let (_n, c, h, w) = xdim;
                        let s = *out_size;
                        let mut dx = ndarray::Array4::<f64>::zeros(xdim);
                        for (bi, &(img, bx)) in boxes.iter().enumerate() {
                            let mx0 = bx[0] * spatial_scale;
                            let my0 = bx[1] * spatial_scale;
                            let bw = (bx[2] - bx[0]) * spatial_scale / s as f64;
                            let bh = (bx[3] - bx[1]) * spatial_scale / s as f64;
                            for i in 0..s {
                                let py = my0 + (i as f64 + 0.5) * bh;
                                for j in 0..s {
                                    let px = mx0 + (j as f64 + 0.5) * bw;
                                    let coeffs = bilinear_coeffs(py, px, h, w);
                                    for ci in 0..c {
                                        let gv = g4[[bi, ci, i, j]];
                                        for &(yy, xx, wt) in &coeffs {
                                            dx[[img, ci, yy, xx]] += wt * gv;
                                        }
                                    }
                                }
                            }
                        }
                        Self::accumulate(&mut grads, *x, dx.into_dyn());
                    }
                }
                Op::Reshape(x) => {
                    if self.needs(*x) {
                        let dx = g
                            .into_shape_with_order(self.value(*x).raw_dim())
                            .expect("gradient reshapes back");
                        Self::accumulate(&mut grads, *x, dx);
                    }
                }
                Op::GatherRows { x, idx } => {
                    if self.needs(*x) {
                        let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                        let xdim = self.value2(*x).dim();
                        let mut dx = Array2::<f64>::zeros(xdim);
                        for (r, &i) in idx.iter().enumerate() {
                            let mut row = dx.row_mut(i);
                            row += &gm.row(r);
                        }
                        Self::accumulate(&mut grads, *x, dx.into_dyn());
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    targets,
                    probs,
                } => {
                    if self.needs(*logits) {
                        let gs = *g.iter().next().unwrap();
                        let n = targets.len().max(1) as f64;
                        let mut d = probs.clone();
                        for (r, &t) in targets.iter().enumerate() {
                            d[[r, t]] -= 1.0;
                        }
                        d.mapv_inplace(|v| v * gs / n);
                        Self::accumulate(&mut grads, *logits, d.into_dyn());
                    }
                }
                Op::Focal {
                    logits,
                    targets,
                    probs,
                    gamma,
                    alpha,
                    bg_class,
                } => {
                    if self.needs(*logits) {
                        let gs = *g.iter().next().unwrap();
                        let n = targets.len().max(1) as f64;
                        let mut d = Array2::<f64>::zeros(probs.dim());
                        for (r, &t) in targets.iter().enumerate() {
                            let a = if t == *bg_class { 1.0 - alpha } else { *alpha };
                            let p = probs[[r, t]].max(f64::MIN_POSITIVE);
                            // d/dp of a*(1-p)^g*(-ln p)
                            let mut fp = -a * (1.0 - p).powf(*gamma) / p;
                            if *gamma != 0.0 {
                                fp += a * gamma * (1.0 - p).powf(gamma - 1.0) * p.ln();
                            }
                            for cc in 0..probs.ncols() {
                                let dq = p * ((cc == t) as usize as f64 - probs[[r, cc]]);
                                d[[r, cc]] += fp * dq * gs / n;
                            }
                        }
                        Self::accumulate(&mut grads, *logits, d.into_dyn());
                    }
                }
                Op::SmoothL1 {
                    pred,
                    target,
                    rows,
                    norm,
                    beta,
                } => {
                    if self.needs(*pred) {
                        let gs = *g.iter().next().unwrap();
                        let pv = self.value2(*pred);
                        let mut d = Array2::<f64>::zeros(pv.dim());
                        for &r in rows {
                            for cc in 0..pv.ncols() {
                                let diff = pv[[r, cc]] - target[[r, cc]];
                                let dd = if diff.abs() < *beta {
                                    diff / beta
                                } else {
                                    diff.signum()
                                };
                                d[[r, cc]] = dd * gs / norm;
                            }
                        }
                        Self::accumulate(&mut grads, *pred, d.into_dyn());
                    }
                }
                Op::BceWithLogits {
                    logits,
                    idx,
                    targets,
                } => {
                    if self.needs(*logits) {
                        let gs = *g.iter().next().unwrap();
                        let n = idx.len().max(1) as f64;
                        let flat = self.value(*logits);
                        let slice = flat.as_slice().unwrap();
                        let mut d = ArrayD::<f64>::zeros(flat.raw_dim());
                        {
                            let ds = d.as_slice_mut().unwrap();
                            for (&i, &t) in idx.iter().zip(targets) {
                                let z: f64 = slice[i];
                                let sig = 1.0 / (1.0 + (-z).exp());
                                ds[i] += (sig - t) * gs / n;
                            }
                        }
                        Self::accumulate(&mut grads, *logits, d);
                    }
                }
                Op::SupCon {
                    queries,
                    keys,
                    grad_q,
                    grad_k,
                } => {
                    let gs = *g.iter().next().unwrap();
                    if self.needs(*queries) {
                        Self::accumulate(&mut grads, *queries, grad_q.mapv(|v| v * gs).into_dyn());
                    }
                    if self.needs(*keys) {
                        Self::accumulate(&mut grads, *keys, grad_k.mapv(|v| v * gs).into_dyn());
                    }
                }
            }
            if !matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Gradients { grads }
    }
}

/// Convenience used by error paths: surface a non-finite scalar as an error.
pub fn ensure_finite(name: &str, v: f64, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence {
            step,
            component: name.to_string(),
            value: v,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_stream, stream};
    use ndarray::{Array, Array4};
    use rand::Rng;

    /// Central-difference check of `d loss / d leaf` for every coordinate.
    fn gradcheck<F>(leaves: &mut [ArrayD<f64>], f: F, tol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let h = 1e-6;
        let build = |vals: &[ArrayD<f64>]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| t.param(Rc::new(v.clone()))).collect();
            let loss = f(&mut t, &vars);
            (t, vars, loss)
        };
        let (t, vars, loss) = build(leaves);
        let grads = t.backward(loss);
        for li in 0..leaves.len() {
            let analytic = grads
                .get(vars[li])
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(leaves[li].raw_dim()));
            for i in 0..leaves[li].len() {
                let orig = leaves[li].as_slice().unwrap()[i];
                let eval = |x: f64| {
                    let mut vals: Vec<ArrayD<f64>> = leaves.to_vec();
                    vals[li].as_slice_mut().unwrap()[i] = x;
                    let (t2, _, l2) = build(&vals);
                    t2.scalar(l2)
                };
                let fd = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[i];
                let denom = fd.abs().max(a.abs()).max(1e-4);
                assert!(
                    ((fd - a) / denom).abs() < tol,
                    "leaf {li} coord {i}: fd {fd} vs analytic {a}"
                );
            }
        }
    }

    fn rand_arr(rng: &mut impl Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn gradcheck_linear_relu_chain() {
        let mut rng = rng_stream(1, stream::INIT);
        let mut leaves = vec![
            rand_arr(&mut rng, &[3, 4]),
            rand_arr(&mut rng, &[4, 2]),
            rand_arr(&mut rng, &[2]),
        ];
        gradcheck(
            &mut leaves,
            |t, v| {
                let y = t.linear(v[0], v[1], v[2]);
                let r = t.relu(y);
                let flat = t.reshape(r, &[1, 6]);
                let ones = t.constant(ArrayD::ones(IxDyn(&[6, 1])));
                let s = t.matmul(flat, ones);
                t.reshape(s, &[])
            },
            1e-5,
        );
    }

    #[test]
    fn gradcheck_conv2d() {
        let mut rng = rng_stream(2, stream::INIT);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1)] {
            let mut leaves = vec![
                rand_arr(&mut rng, &[2, 3, 6, 6]),
                rand_arr(&mut rng, &[4, 3, 3, 3]),
                rand_arr(&mut rng, &[4]),
            ];
            gradcheck(
                &mut leaves,
                |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], stride, pad);
                    let len = t.value(y).len();
                    let flat = t.reshape(y, &[1, len]);
                    let w: ArrayD<f64> =
                        Array::linspace(0.3, 0.9, len).into_dyn().into_shape_with_order(IxDyn(&[len, 1])).unwrap();
                    let wc = t.constant(w);
                    let s = t.matmul(flat, wc);
                    t.reshape(s, &[])
                },
                1e-4,
            );
        }
    }

    #[test]
    fn gradcheck_roi_align() {
        let mut rng = rng_stream(3, stream::INIT);
        let mut leaves = vec![rand_arr(&mut rng, &[1, 2, 8, 8])];
        let boxes = vec![(0usize, [4.0, 4.0, 28.0, 24.0]), (0, [0.0, 0.0, 32.0, 32.0])];
        gradcheck(
            &mut leaves,
            |t, v| {
                let y = t.roi_align(v[0], &boxes, 0.25, 3);
                let len = t.value(y).len();
                let flat = t.reshape(y, &[1, len]);
                let w: ArrayD<f64> =
                    Array::linspace(-0.5, 0.5, len).into_dyn().into_shape_with_order(IxDyn(&[len, 1])).unwrap();
                let wc = t.constant(w);
                let s = t.matmul(flat, wc);
                t.reshape(s, &[])
            },
            1e-4,
        );
    }

    #[test]
    fn gradcheck_fused_losses() {
        let mut rng = rng_stream(4, stream::INIT);
        let targets = vec![0usize, 2, 1, 2];
        let mut leaves = vec![rand_arr(&mut rng, &[4, 3])];
        gradcheck(
            &mut leaves,
            |t, v| t.softmax_cross_entropy(v[0], &targets),
            1e-5,
        );
        let mut leaves = vec![rand_arr(&mut rng, &[4, 3])];
        gradcheck(
            &mut leaves,
            |t, v| t.focal_loss(v[0], &targets, 2.0, 0.25, 2),
            1e-4,
        );
        let mut leaves = vec![rand_arr(&mut rng, &[4, 4])];
        let target = Array2::from_shape_fn((4, 4), |_| rng.random_range(-2.0..2.0));
        let rows = vec![0usize, 2, 3];
        gradcheck(
            &mut leaves,
            |t, v| t.smooth_l1(v[0], target.clone(), &rows, 4.0, 1.0),
            1e-5,
        );
        let mut leaves = vec![rand_arr(&mut rng, &[10])];
        let idx = vec![1usize, 4, 7];
        let bt = vec![1.0, 0.0, 1.0];
        gradcheck(&mut leaves, |t, v| t.bce_with_logits(v[0], &idx, &bt), 1e-5);
    }

    #[test]
    fn gradcheck_supcon_through_linear() {
        let mut rng = rng_stream(5, stream::INIT);
        let q_labels = vec![0usize, 1, 0];
        let k_labels = vec![0usize, 0, 1, 1];
        let mut leaves = vec![rand_arr(&mut rng, &[3, 5]), rand_arr(&mut rng, &[4, 5])];
        gradcheck(
            &mut leaves,
            |t, v| t.supcon(v[0], &q_labels, v[1], &k_labels, 6.0, false).unwrap(),
            1e-4,
        );
    }

    #[test]
    fn focal_gamma_zero_uniform_alpha_is_scaled_ce() {
        let mut rng = rng_stream(6, stream::INIT);
        let logits = rand_arr(&mut rng, &[5, 4]);
        let targets = vec![0usize, 3, 1, 2, 3];
        let mut t = Tape::new();
        let l = t.param(Rc::new(logits));
        let ce = t.softmax_cross_entropy(l, &targets);
        let fl = t.focal_loss(l, &targets, 0.0, 0.5, 3);
        assert!((t.scalar(fl) - 0.5 * t.scalar(ce)).abs() < 1e-12);
        let g_ce = t.backward(ce).take(l).unwrap();
        let g_fl = t.backward(fl).take(l).unwrap();
        let diff = (&g_fl - &g_ce.mapv(|v| v * 0.5)).mapv(f64::abs);
        assert!(diff.iter().cloned().fold(0.0, f64::max) < 1e-12);
    }

    #[test]
    fn roi_align_whole_image_matches_direct_interpolation() {
        let mut rng = rng_stream(7, stream::INIT);
        let map = rand_arr(&mut rng, &[1, 3, 8, 8]);
        let mut t = Tape::new();
        let x = t.constant(map.clone());
        // Image is 32x32 at stride 4 -> 8x8 map.
        let y = t.roi_align(x, &[(0, [0.0, 0.0, 32.0, 32.0])], 0.25, 7);
        let yv = t.value(y);
        let m4 = map.view().into_dimensionality::<Ix4>().unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let py = (i as f64 + 0.5) * 8.0 / 7.0;
                let px = (j as f64 + 0.5) * 8.0 / 7.0;
                for c in 0..3 {
                    let mut expect = 0.0;
                    for (yy, xx, w) in bilinear_coeffs(py, px, 8, 8) {
                        expect += w * m4[[0, c, yy, xx]];
                    }
                    let got = yv[[0, c, i, j]];
                    assert!((got - expect).abs() < 1e-12, "bin ({i},{j}) ch {c}");
                }
            }
        }
    }

    #[test]
    fn roi_align_translates_with_shifted_map() {
        let mut rng = rng_stream(8, stream::INIT);
        let base = rand_arr(&mut rng, &[1, 2, 10, 10]);
        // Shift content one cell right.
        let mut shifted = Array4::<f64>::zeros((1, 2, 10, 10));
        {
            let b4 = base.view().into_dimensionality::<Ix4>().unwrap();
            for c in 0..2 {
                for y in 0..10 {
                    for x in 1..10 {
                        shifted[[0, c, y, x]] = b4[[0, c, y, x - 1]];
                    }
                }
            }
        }
        let mut t = Tape::new();
        let a = t.constant(base);
        let b = t.constant(shifted.into_dyn());
        // Stride 4: one cell = 4 input pixels. Box interior away from edges.
        let pooled_a = t.roi_align(a, &[(0, [8.0, 8.0, 24.0, 28.0])], 0.25, 7);
        let pooled_b = t.roi_align(b, &[(0, [12.0, 8.0, 28.0, 28.0])], 0.25, 7);
        let diff = (t.value(pooled_a) - t.value(pooled_b)).mapv(f64::abs);
        assert!(diff.iter().cloned().fold(0.0, f64::max) < 1e-12);
    }
}

//! Training orchestration: warm-up gating, loss composition, the SGD loop,
//! checkpointing, validation evaluation, and metrics logging.

pub mod checkpoint;
pub mod config;
pub mod sweep;

pub use config::TrainConfig;

use ndarray::{Array3, Array4, ArrayD};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use crate::contrast::LabeledEmbeddingBatch;
use crate::data::Dataset;
use crate::detector::{sample_proposals, Detector, SampledRoi};
use crate::error::{Error, Result};
use crate::geometry::augment_box;
use crate::memory::MemoryBank;
use crate::metrics::{evaluate, EvalReport};
use crate::rng::{rng_stream, stream};
use crate::tensor::{softmax_rows, Tape};
use checkpoint::{
    detector_from_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta, RngStates,
};

/// One logged training step. `total` always equals
/// `rpn + reg + cls + lambda_roi * roi_com + lambda_cls * cls_com`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub rpn: f64,
    pub reg: f64,
    pub cls: f64,
    pub roi_com: f64,
    pub cls_com: f64,
    pub lambda_roi: f64,
    pub lambda_cls: f64,
    pub total: f64,
}

/// Combine base-detector losses with the weighted comparison losses.
/// Comparison terms are zero during warm-up or when their inputs are empty;
/// a non-finite component aborts with its name.
pub fn compose_loss(
    l_base: (f64, f64, f64),
    l_roi: f64,
    l_cls: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    compose_loss_at(l_base, l_roi, l_cls, cfg, 0)
}

fn compose_loss_at(
    l_base: (f64, f64, f64),
    l_roi: f64,
    l_cls: f64,
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    let (rpn, reg, cls) = l_base;
    for (name, v) in [
        ("rpn", rpn),
        ("reg", reg),
        ("cls", cls),
        ("roi_com", l_roi),
        ("cls_com", l_cls),
    ] {
        if !v.is_finite() {
            return Err(Error::Divergence {
                step,
                component: name.into(),
                value: v,
            });
        }
    }
    Ok(rpn + reg + cls + cfg.lambda_roi * l_roi + cfg.lambda_cls * l_cls)
}

pub struct TrainOutcome {
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub metrics_log: PathBuf,
    pub steps: Vec<StepRecord>,
    /// Lifetime memory-bank insertion count (zero until warm-up ends).
    pub bank_insertions: u64,
    pub final_val: Option<EvalReport>,
}

struct LoadedScene {
    /// Channel-major RGB bytes.
    pixels: Vec<u8>,
    height: usize,
    width: usize,
    gt: Vec<crate::geometry::LabeledBox>,
}

impl LoadedScene {
    fn to_array(&self) -> Array3<f64> {
        let n = self.height * self.width;
        Array3::from_shape_fn((3, self.height, self.width), |(c, y, x)| {
            self.pixels[c * n + y * self.width + x] as f64 / 255.0
        })
    }
}

fn preload(data: &Dataset) -> Result<Vec<LoadedScene>> {
    data.scenes
        .iter()
        .map(|s| {
            let img = s.load_image()?;
            let (_, h, w) = img.dim();
            let n = h * w;
            let mut pixels = vec![0u8; 3 * n];
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        pixels[c * n + y * w + x] =
                            (img[[c, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
            Ok(LoadedScene {
                pixels,
                height: h,
                width: w,
                gt: s.gt.clone(),
            })
        })
        .collect()
}

/// Run inference over every scene and score it.
pub fn evaluate_detector(det: &Detector, data: &Dataset) -> Result<EvalReport> {
    let mut images = Vec::with_capacity(data.scenes.len());
    for scene in &data.scenes {
        let img = scene.load_image()?;
        let dets = det.inference(&img, 0.05, 0.5)?;
        images.push((dets, scene.gt.clone()));
    }
    evaluate(&images, data.num_classes())
}

/// Evaluate a checkpoint on a dataset; optionally write the JSON report
/// (plus a CSV sibling).
pub fn evaluate_checkpoint(
    ckpt_path: &Path,
    data: &Dataset,
    out_json: Option<&Path>,
) -> Result<EvalReport> {
    let ckpt = load_checkpoint(ckpt_path)?;
    if ckpt.meta.num_classes != data.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, dataset has {}",
            ckpt.meta.num_classes,
            data.num_classes()
        )));
    }
    let det = detector_from_checkpoint(&ckpt)?;
    let report = evaluate_detector(&det, data)?;
    if let Some(path) = out_json {
        report.write_json(path)?;
        report.write_csv(&path.with_extension("csv"))?;
    }
    Ok(report)
}

/// Train on `train_data`, optionally evaluating on `val_data` each
/// `eval_every` epochs. Writes `metrics.jsonl`, `last.ckpt`, and (when
/// validation improves) `best.ckpt` under `out_dir`. `resume` continues a
/// previous run exactly (its checkpoint's config wins over `cfg`).
pub fn train(
    cfg: &TrainConfig,
    train_data: &Dataset,
    val_data: Option<&Dataset>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.detector.num_classes = train_data.num_classes();
    cfg.validate()?;
    let num_classes = train_data.num_classes();
    let tau_c = cfg.tau_c_for(num_classes)?;
    std::fs::create_dir_all(out_dir)?;

    let (mut det, mut velocities, mut bank, mut rngs, mut epoch_start, mut step, mut best_ap50) =
        match resume {
            None => {
                let det = Detector::new(cfg.detector.clone(), cfg.seed);
                let velocities: Vec<ArrayD<f64>> = det
                    .named_params()
                    .iter()
                    .map(|(_, p)| ArrayD::zeros(p.raw_dim()))
                    .collect();
                let bank = MemoryBank::new(
                    num_classes,
                    cfg.q,
                    cfg.detector.class_embed_dim,
                    tau_c.clone(),
                )?;
                let rngs = RngStates {
                    data_order: rng_stream(cfg.seed, stream::DATA_ORDER),
                    rpn: rng_stream(cfg.seed, stream::RPN_SAMPLE),
                    roi: rng_stream(cfg.seed, stream::ROI_SAMPLE),
                    augment: rng_stream(cfg.seed, stream::AUGMENT),
                    bank: rng_stream(cfg.seed, stream::BANK_SAMPLE),
                };
                (det, velocities, bank, rngs, 0usize, 0usize, None)
            }
            Some(path) => {
                let ckpt = load_checkpoint(path)?;
                cfg = ckpt.meta.config.clone();
                let det = detector_from_checkpoint(&ckpt)?;
                (
                    det,
                    ckpt.velocities,
                    ckpt.meta.bank,
                    ckpt.meta.rng,
                    ckpt.meta.epoch_next,
                    ckpt.meta.step,
                    ckpt.meta.best_ap50,
                )
            }
        };

    let scenes = preload(train_data)?;
    if scenes.is_empty() {
        return Err(Error::Config("training split has no scenes".into()));
    }
    let (h, w) = (scenes[0].height, scenes[0].width);
    if scenes.iter().any(|s| s.height != h || s.width != w) {
        return Err(Error::Config(
            "training scenes must share one image size".into(),
        ));
    }

    let metrics_log = out_dir.join("metrics.jsonl");
    let mut log_file = std::io::BufWriter::new(if epoch_start == 0 {
        std::fs::File::create(&metrics_log)?
    } else {
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_log)?
    });
    let val_log = out_dir.join("val.jsonl");
    let mut val_file: Option<std::io::BufWriter<std::fs::File>> =
        if val_data.is_some() && cfg.eval_every > 0 {
            Some(std::io::BufWriter::new(if epoch_start == 0 {
                std::fs::File::create(&val_log)?
            } else {
                std::fs::OpenOptions::new().create(true).append(true).open(&val_log)?
            }))
        } else {
            None
        };

    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");
    let mut wrote_best = best_ap50.is_some();
    let mut steps_out: Vec<StepRecord> = Vec::new();
    let mut final_val = None;

    for epoch in epoch_start..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let comparison_active = !cfg.baseline_only && epoch >= cfg.warmup_epochs;
        let ric_active = comparison_active && cfg.lambda_roi > 0.0;
        let cic_active = comparison_active && cfg.lambda_cls > 0.0;

        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rngs.data_order);

        for chunk in order.chunks(cfg.batch_size) {
            // ---- forward ----
            let b = chunk.len();
            let mut images = Array4::<f64>::zeros((b, 3, h, w));
            for (bi, &si) in chunk.iter().enumerate() {
                images
                    .index_axis_mut(ndarray::Axis(0), bi)
                    .assign(&scenes[si].to_array());
            }
            let gts: Vec<Vec<crate::geometry::LabeledBox>> =
                chunk.iter().map(|&si| scenes[si].gt.clone()).collect();

            let mut t = Tape::new();
            let pv = det.register(&mut t);
            let base = det.forward_base(&mut t, &pv, &images)?;
            let rpn_batch = det.prepare_rpn_batch(&t, &base, &gts, &mut rngs.rpn);
            let rpn_var = det.rpn_loss_from_batch(&mut t, &base, &rpn_batch);

            let proposals = det.proposals_from_rpn(&t, &base, true);
            let mut boxes: Vec<(usize, [f64; 4])> = Vec::new();
            let mut sampled_all: Vec<SampledRoi> = Vec::new();
            for (img, props) in proposals.iter().enumerate() {
                let sampled = sample_proposals(
                    props,
                    &gts[img],
                    cfg.k,
                    det.cfg.box_fg_iou,
                    det.cfg.fg_fraction,
                    &mut rngs.roi,
                );
                for r in &sampled {
                    boxes.push((img, r.bbox.corners()));
                }
                sampled_all.extend(sampled);
            }

            let zero = t.constant(ndarray::arr0(0.0).into_dyn());
            let (roi_vars, cls_var, reg_var) = if sampled_all.is_empty() {
                (None, zero, zero)
            } else {
                let roi = det.roi_tower(&mut t, &pv, base.fmap_e1, &boxes);
                let (c, r) = det.head_loss_vars(&mut t, &roi, &sampled_all, cfg.head_loss_mode);
                (Some(roi), c, r)
            };

            let fg_rows: Vec<usize> = (0..sampled_all.len())
                .filter(|&i| sampled_all[i].is_foreground())
                .collect();
            let fg_labels: Vec<usize> = fg_rows
                .iter()
                .map(|&i| sampled_all[i].assigned_class.expect("foreground"))
                .collect();

            // ---- RoI-level comparison (queries: GT + augmented) ----
            let mut ric_var = None;
            if ric_active && !fg_rows.is_empty() {
                let mut q_boxes: Vec<(usize, [f64; 4])> = Vec::new();
                let mut q_labels: Vec<usize> = Vec::new();
                for (img, gt_list) in gts.iter().enumerate() {
                    for g in gt_list {
                        q_boxes.push((img, g.bbox.corners()));
                        q_labels.push(g.class_id);
                        for _ in 0..cfg.aug_per_gt {
                            match augment_box(
                                &g.bbox,
                                cfg.k0,
                                Some((w as f64, h as f64)),
                                &mut rngs.augment,
                            ) {
                                Ok(a) => {
                                    q_boxes.push((img, a.corners()));
                                    q_labels.push(g.class_id);
                                }
                                Err(e) => log::debug!("augmentation skipped: {e}"),
                            }
                        }
                    }
                }
                if !q_boxes.is_empty() {
                    let roi = roi_vars.as_ref().expect("fg implies sampled");
                    let aligned =
                        t.roi_align(base.fmap_e1, &q_boxes, 1.0 / det.cfg.stride() as f64, det.cfg.roi_pool);
                    let queries =
                        t.reshape(aligned, &[q_boxes.len(), det.cfg.roi_flat_dim()]);
                    let keys = t.gather_rows(roi.flat, &fg_rows);
                    ric_var = Some(t.supcon(
                        queries,
                        &q_labels,
                        keys,
                        &fg_labels,
                        cfg.tau_roi,
                        cfg.normalize_positives,
                    )?);
                }
            }

            // ---- class-level comparison (keys: memory bank view) ----
            let mut cic_var = None;
            if cic_active && !fg_rows.is_empty() && !bank.is_empty() {
                let view = if cfg.cic_full_bank {
                    bank.snapshot()
                } else {
                    bank.sample_balanced(cfg.per_class, &mut rngs.bank)
                };
                if !view.is_empty() {
                    let roi = roi_vars.as_ref().expect("fg implies sampled");
                    let queries = t.gather_rows(roi.class_embed, &fg_rows);
                    let keys = t.constant(view.embeddings().to_owned().into_dyn());
                    cic_var = Some(t.supcon(
                        queries,
                        &fg_labels,
                        keys,
                        view.labels(),
                        cfg.tau_cls,
                        cfg.normalize_positives,
                    )?);
                }
            }

            // ---- compose, check, log ----
            let l_rpn = t.scalar(rpn_var);
            let l_cls = t.scalar(cls_var);
            let l_reg = t.scalar(reg_var);
            let l_ric = ric_var.map_or(0.0, |v| t.scalar(v));
            let l_cic = cic_var.map_or(0.0, |v| t.scalar(v));
            let total_value =
                compose_loss_at((l_rpn, l_reg, l_cls), l_ric, l_cic, &cfg, step)?;
            if !total_value.is_finite() || total_value > 1e4 {
                return Err(Error::Divergence {
                    step,
                    component: "total".into(),
                    value: total_value,
                });
            }

            let mut parts = vec![(rpn_var, 1.0), (cls_var, 1.0), (reg_var, 1.0)];
            if let Some(v) = ric_var {
                parts.push((v, cfg.lambda_roi));
            }
            if let Some(v) = cic_var {
                parts.push((v, cfg.lambda_cls));
            }
            let total_var = t.weighted_sum(&parts);

            // ---- bank candidates from this forward pass (detached) ----
            let bank_update = if cic_active && !fg_rows.is_empty() {
                let roi = roi_vars.as_ref().expect("fg implies sampled");
                let logits = t
                    .value(roi.cls_logits)
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned();
                let probs = softmax_rows(&logits);
                let embeds = t
                    .value(roi.class_embed)
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned();
                let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(fg_rows.len());
                let mut scores = Vec::with_capacity(fg_rows.len());
                for (&row, &label) in fg_rows.iter().zip(&fg_labels) {
                    rows.push((embeds.row(row).to_vec(), label));
                    scores.push(probs[[row, label]]);
                }
                Some((LabeledEmbeddingBatch::from_rows(&rows)?, scores))
            } else {
                None
            };

            // ---- backward + SGD ----
            let mut grads = t.backward(total_var);
            let shapes: Vec<(String, Rc<ArrayD<f64>>)> = det
                .named_params()
                .into_iter()
                .map(|(n, p)| (n, Rc::clone(p)))
                .collect();
            let g = crate::detector::param_grads(&pv, &mut grads, &shapes);
            drop(shapes);
            drop(grads);
            drop(t);
            for ((slot, vel), grad) in det
                .params_mut()
                .into_iter()
                .zip(velocities.iter_mut())
                .zip(g.iter())
            {
                vel.zip_mut_with(grad, |vv, &gv| *vv = cfg.momentum * *vv + gv);
                let p = Rc::get_mut(slot).expect("all tapes dropped");
                p.zip_mut_with(vel, |pv, &vv| *pv -= lr * vv);
            }

            // insert-after-loss: the bank only sees this step's embeddings
            // after the loss and the update are done.
            if let Some((batch, scores)) = bank_update {
                bank.update_from_batch(&batch, &scores)?;
            }

            let record = StepRecord {
                step,
                epoch,
                lr,
                rpn: l_rpn,
                reg: l_reg,
                cls: l_cls,
                roi_com: l_ric,
                cls_com: l_cic,
                lambda_roi: cfg.lambda_roi,
                lambda_cls: cfg.lambda_cls,
                total: total_value,
            };
            writeln!(log_file, "{}", serde_json::to_string(&record).unwrap())?;
            steps_out.push(record);
            step += 1;
        }

        // ---- end of epoch: checkpoint, maybe validate ----
        let meta = CheckpointMeta {
            version: 1,
            config: cfg.clone(),
            epoch_next: epoch + 1,
            step,
            best_ap50,
            num_classes,
            params: det
                .named_params()
                .iter()
                .map(|(n, p)| (n.clone(), p.shape().to_vec()))
                .collect(),
            bank: bank.clone(),
            rng: rngs.clone(),
        };
        let params: Vec<Rc<ArrayD<f64>>> = det
            .named_params()
            .iter()
            .map(|(_, p)| Rc::clone(p))
            .collect();
        save_checkpoint(&last_path, &meta, &params, &velocities)?;

        if let (Some(val), Some(vf)) = (val_data, val_file.as_mut()) {
            if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
                let report = evaluate_detector(&det, val)?;
                writeln!(
                    vf,
                    "{}",
                    serde_json::json!({
                        "epoch": epoch,
                        "ap50": report.ap50,
                        "ap75": report.ap75,
                        "ap": report.ap,
                        "ar": report.ar,
                    })
                )?;
                vf.flush()?;
                if best_ap50.is_none_or(|b| report.ap50 > b) {
                    best_ap50 = Some(report.ap50);
                    save_checkpoint(&best_path, &meta, &params, &velocities)?;
                    wrote_best = true;
                }
                log::info!(
                    "epoch {epoch}: val ap50 {:.4} ap {:.4} ar {:.4}",
                    report.ap50,
                    report.ap,
                    report.ar
                );
                final_val = Some(report);
            }
        }
        log::info!(
            "epoch {epoch} done: lr {lr:.6}, {} steps, bank {} entries",
            step,
            bank.len()
        );
    }
    log_file.flush()?;

    Ok(TrainOutcome {
        last_checkpoint: last_path,
        best_checkpoint: wrote_best.then_some(best_path),
        metrics_log,
        steps: steps_out,
        bank_insertions: bank.inserted_total(),
        final_val,
    })
}

//! Rough per-phase timing of one training step shape.
use instcomp::data::{generate_dataset, load_split, DatasetSpec};
use instcomp::detector::{sample_proposals, Detector};
use instcomp::harness::TrainConfig;
use instcomp::rng::{rng_stream, stream};
use instcomp::tensor::Tape;
use ndarray::Array4;
use std::time::Instant;

fn main() -> instcomp::Result<()> {
    let dir = std::env::temp_dir().join("instcomp_profile");
    let _ = std::fs::remove_dir_all(&dir);
    let spec = DatasetSpec { scenes_per_split: (4, 1, 1), ..DatasetSpec::default() };
    let manifest = generate_dataset(&spec, &dir)?;
    let data = load_split(&manifest, "train")?;
    let cfg = TrainConfig::default();
    let mut dcfg = cfg.detector.clone();
    dcfg.num_classes = 4;
    let det = Detector::new(dcfg, 0);
    let img0 = data.scenes[0].load_image()?;
    let img1 = data.scenes[1].load_image()?;
    let mut images = Array4::zeros((2, 3, 128, 128));
    images.index_axis_mut(ndarray::Axis(0), 0).assign(&img0);
    images.index_axis_mut(ndarray::Axis(0), 1).assign(&img1);
    let gts = vec![data.scenes[0].gt.clone(), data.scenes[1].gt.clone()];
    let mut rpn_rng = rng_stream(0, stream::RPN_SAMPLE);
    let mut roi_rng = rng_stream(0, stream::ROI_SAMPLE);

    for round in 0..3 {
        let t_all = Instant::now();
        let mut t = Tape::new();
        let pv = det.register(&mut t);
        let t0 = Instant::now();
        let base = det.forward_base(&mut t, &pv, &images)?;
        let t_base = t0.elapsed();
        let t0 = Instant::now();
        let rpn_batch = det.prepare_rpn_batch(&t, &base, &gts, &mut rpn_rng);
        let rpn_var = det.rpn_loss_from_batch(&mut t, &base, &rpn_batch);
        let props = det.proposals_from_rpn(&t, &base, true);
        let t_rpn = t0.elapsed();
        let t0 = Instant::now();
        let mut boxes = Vec::new();
        let mut sampled_all = Vec::new();
        for (i, p) in props.iter().enumerate() {
            let s = sample_proposals(p, &gts[i], 256, 0.5, 0.25, &mut roi_rng);
            for r in &s { boxes.push((i, r.bbox.corners())); }
            sampled_all.extend(s);
        }
        let roi = det.roi_tower(&mut t, &pv, base.fmap_e1, &boxes);
        let (cls_var, reg_var) = det.head_loss_vars(&mut t, &roi, &sampled_all, cfg.head_loss_mode);
        let t_tower = t0.elapsed();
        let t0 = Instant::now();
        let total = t.weighted_sum(&[(rpn_var, 1.0), (cls_var, 1.0), (reg_var, 1.0)]);
        let mut grads = t.backward(total);
        let t_back = t0.elapsed();
        let _ = grads.take(pv.all()[0]);
        println!(
            "round {round}: K={} base {:.0}ms rpn {:.0}ms tower {:.0}ms backward {:.0}ms total {:.0}ms",
            boxes.len(),
            t_base.as_secs_f64() * 1e3,
            t_rpn.as_secs_f64() * 1e3,
            t_tower.as_secs_f64() * 1e3,
            t_back.as_secs_f64() * 1e3,
            t_all.elapsed().as_secs_f64() * 1e3
        );
    }
    Ok(())
}

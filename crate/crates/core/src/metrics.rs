//! COCO-style detection metrics: per-class and aggregate AP over IoU
//! 0.50:0.95, AP50, AP75, and AR at <=100 detections per image.
//!
//! Matching is greedy in descending score with single-use ground truth;
//! AP uses 101-point interpolated precision. Classes with no ground truth
//! anywhere are excluded from means (reported absent, not zero).

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::LabeledBox;

/// IoU thresholds 0.50:0.05:0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Detections per image are capped at this count, and AR is defined at it.
pub const MAX_DETECTIONS: usize = 100;

/// A scored detection.
pub type Detection = (LabeledBox, f64);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar: f64,
    pub num_gt: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean AP over IoU 0.50:0.95 and classes with ground truth.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Mean recall over the same IoU range at <=100 detections per image.
    pub ar: f64,
    /// AP at IoU 0.5 per class; classes without ground truth are absent.
    pub per_class_ap50: BTreeMap<usize, f64>,
    /// Full per-class breakdown for the same classes.
    pub per_class: BTreeMap<usize, ClassMetrics>,
}

/// Greedy-match `dets` against `gts` at one IoU threshold. Returns a TP flag
/// per detection, in input order. Matching considers detections in
/// descending score order (ties by input index), requires equal class and
/// IoU >= `iou_thresh`, prefers the highest-IoU free ground truth, and uses
/// each ground truth at most once.
pub fn match_detections(dets: &[Detection], gts: &[LabeledBox], iou_thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.partial_cmp(&dets[a].1).unwrap().then(a.cmp(&b)));
    let mut gt_used = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for &di in &order {
        let (ref dbox, _) = dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_used[gi] || gt.class_id != dbox.class_id {
                continue;
            }
            let iou = dbox.bbox.iou(&gt.bbox);
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            gt_used[gi] = true;
            flags[di] = true;
        }
    }
    flags
}

/// 101-point interpolated average precision from per-detection TP flags and
/// scores. `None` when there is no ground truth and nothing was detected
/// (class undefined for the mean); zero when detections exist without
/// ground truth.
pub fn average_precision(flags: &[bool], scores: &[f64], num_gt: usize) -> Option<f64> {
    assert_eq!(flags.len(), scores.len());
    if num_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    if flags.is_empty() {
        return Some(0.0);
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut precisions = Vec::with_capacity(order.len());
    let mut recalls = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (k, &i) in order.iter().enumerate() {
        if flags[i] {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / num_gt as f64);
    }
    // Max precision at recall >= r, via suffix maxima.
    let mut interp = precisions.clone();
    for k in (0..interp.len().saturating_sub(1)).rev() {
        interp[k] = interp[k].max(interp[k + 1]);
    }
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = recalls
            .iter()
            .position(|&rec| rec >= r - 1e-12)
            .map_or(0.0, |k| interp[k]);
        total += p;
    }
    Some(total / 101.0)
}

/// Evaluate per-image detections against per-image ground truth over the
/// class universe `[0, num_classes)`.
pub fn evaluate(
    images: &[(Vec<Detection>, Vec<LabeledBox>)],
    num_classes: usize,
) -> Result<EvalReport> {
    for (dets, gts) in images {
        for (d, _) in dets {
            if d.class_id >= num_classes {
                return Err(Error::ClassOutOfRange {
                    class_id: d.class_id,
                    num_classes,
                });
            }
        }
        for g in gts {
            if g.class_id >= num_classes {
                return Err(Error::ClassOutOfRange {
                    class_id: g.class_id,
                    num_classes,
                });
            }
        }
    }
    // Cap detections per image by score (ties by input index).
    let capped: Vec<(Vec<Detection>, &Vec<LabeledBox>)> = images
        .iter()
        .map(|(dets, gts)| {
            let mut order: Vec<usize> = (0..dets.len()).collect();
            order.sort_by(|&a, &b| dets[b].1.partial_cmp(&dets[a].1).unwrap().then(a.cmp(&b)));
            order.truncate(MAX_DETECTIONS);
            order.sort_unstable(); // keep input order within the kept subset
            (order.into_iter().map(|i| dets[i]).collect(), gts)
        })
        .collect();

    let mut per_class: BTreeMap<usize, ClassMetrics> = BTreeMap::new();
    for class in 0..num_classes {
        let num_gt: usize = capped
            .iter()
            .map(|(_, gts)| gts.iter().filter(|g| g.class_id == class).count())
            .sum();
        if num_gt == 0 {
            continue; // absent from the report, excluded from means
        }
        let mut ap_sum = 0.0;
        let mut ar_sum = 0.0;
        let mut ap50 = 0.0;
        let mut ap75 = 0.0;
        for (ti, &thresh) in IOU_THRESHOLDS.iter().enumerate() {
            let mut flags = Vec::new();
            let mut scores = Vec::new();
            let mut tp_total = 0usize;
            for (dets, gts) in &capped {
                let class_dets: Vec<Detection> = dets
                    .iter()
                    .filter(|(d, _)| d.class_id == class)
                    .copied()
                    .collect();
                let class_gts: Vec<LabeledBox> = gts
                    .iter()
                    .filter(|g| g.class_id == class)
                    .copied()
                    .collect();
                let f = match_detections(&class_dets, &class_gts, thresh);
                tp_total += f.iter().filter(|&&x| x).count();
                scores.extend(class_dets.iter().map(|(_, s)| *s));
                flags.extend(f);
            }
            let ap = average_precision(&flags, &scores, num_gt).unwrap_or(0.0);
            ap_sum += ap;
            ar_sum += tp_total as f64 / num_gt as f64;
            if ti == 0 {
                ap50 = ap;
            }
            if (thresh - 0.75).abs() < 1e-9 {
                ap75 = ap;
            }
        }
        per_class.insert(
            class,
            ClassMetrics {
                ap: ap_sum / IOU_THRESHOLDS.len() as f64,
                ap50,
                ap75,
                ar: ar_sum / IOU_THRESHOLDS.len() as f64,
                num_gt,
            },
        );
    }

    let n = per_class.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if per_class.is_empty() {
            0.0
        } else {
            per_class.values().map(f).sum::<f64>() / n
        }
    };
    Ok(EvalReport {
        ap: mean(|m| m.ap),
        ap50: mean(|m| m.ap50),
        ap75: mean(|m| m.ap75),
        ar: mean(|m| m.ar),
        per_class_ap50: per_class.iter().map(|(&c, m)| (c, m.ap50)).collect(),
        per_class,
    })
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("report serializes");
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// One row per class plus an aggregate row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "class,ap,ap50,ap75,ar,num_gt")?;
        for (class, m) in &self.per_class {
            writeln!(
                f,
                "{class},{:.6},{:.6},{:.6},{:.6},{}",
                m.ap, m.ap50, m.ap75, m.ar, m.num_gt
            )?;
        }
        writeln!(
            f,
            "all,{:.6},{:.6},{:.6},{:.6},",
            self.ap, self.ap50, self.ap75, self.ar
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::rng::{rng_stream, stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn lb(x0: f64, y0: f64, x1: f64, y1: f64, class: usize) -> LabeledBox {
        LabeledBox::new(BBox::new(x0, y0, x1, y1).unwrap(), class)
    }

    #[test]
    fn match_basic_cases() {
        let gt = vec![lb(0.0, 0.0, 10.0, 10.0, 0)];
        let d_exact = (lb(0.0, 0.0, 10.0, 10.0, 0), 0.9);
        assert_eq!(match_detections(&[d_exact], &gt, 0.5), vec![true]);
        // two identical detections: higher score wins the single GT
        let d2 = (lb(0.0, 0.0, 10.0, 10.0, 0), 0.5);
        assert_eq!(match_detections(&[d2, d_exact], &gt, 0.5), vec![false, true]);
        // right box, wrong class
        let wrong = (lb(0.0, 0.0, 10.0, 10.0, 1), 0.9);
        assert_eq!(match_detections(&[wrong], &gt, 0.5), vec![false]);
    }

    #[test]
    fn ap_edge_cases() {
        // all GT found first, no FPs
        assert_eq!(
            average_precision(&[true, true, true], &[0.9, 0.8, 0.7], 3),
            Some(1.0)
        );
        // no detections with GT present
        assert_eq!(average_precision(&[], &[], 3), Some(0.0));
        // no GT: zero with detections, excluded without
        assert_eq!(average_precision(&[false], &[0.4], 0), Some(0.0));
        assert_eq!(average_precision(&[], &[], 0), None);
    }

    /// Independent oracle: interpolated precision at recall r via explicit
    /// scan over every prefix of the score-sorted detection list.
    fn ap_oracle(flags: &[bool], scores: &[f64], num_gt: usize) -> Option<f64> {
        if num_gt == 0 {
            return if flags.is_empty() { None } else { Some(0.0) };
        }
        let mut order: Vec<usize> = (0..flags.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut total = 0.0;
        for i in 0..=100 {
            let r = i as f64 / 100.0;
            let mut best = 0.0f64;
            let mut tp = 0usize;
            for (k, &idx) in order.iter().enumerate() {
                if flags[idx] {
                    tp += 1;
                }
                let recall = tp as f64 / num_gt as f64;
                let precision = tp as f64 / (k + 1) as f64;
                if recall >= r - 1e-12 {
                    best = best.max(precision);
                }
            }
            total += best;
        }
        Some(total / 101.0)
    }

    #[test]
    fn ap_derived_case_matches_oracle() {
        // 3 GT; detections (TP, FP, TP, TP) by descending score.
        let flags = [true, false, true, true];
        let scores = [0.9, 0.8, 0.7, 0.6];
        let oracle = ap_oracle(&flags, &scores, 3).unwrap();
        let fast = average_precision(&flags, &scores, 3).unwrap();
        assert!((fast - oracle).abs() < 1e-12);
        // frozen from the oracle: (34 * 1 + 67 * 0.75) / 101
        let expected = (34.0 + 67.0 * 0.75) / 101.0;
        assert!((fast - expected).abs() < 1e-12);
        assert!((fast - 0.834158).abs() < 1e-6);
    }

    fn perfect_detector(images: &[(Vec<Detection>, Vec<LabeledBox>)]) -> EvalReport {
        let perfect: Vec<(Vec<Detection>, Vec<LabeledBox>)> = images
            .iter()
            .map(|(_, gts)| (gts.iter().map(|g| (*g, 0.95)).collect(), gts.clone()))
            .collect();
        evaluate(&perfect, 3).unwrap()
    }

    #[test]
    fn evaluate_perfect_and_empty() {
        let images = vec![
            (Vec::new(), vec![lb(2.0, 2.0, 20.0, 22.0, 0), lb(30.0, 30.0, 48.0, 50.0, 1)]),
            (Vec::new(), vec![lb(5.0, 8.0, 25.0, 30.0, 2)]),
        ];
        let p = perfect_detector(&images);
        assert_eq!(p.ap, 1.0);
        assert_eq!(p.ap50, 1.0);
        assert_eq!(p.ap75, 1.0);
        assert_eq!(p.ar, 1.0);
        assert_eq!(p.per_class_ap50.len(), 3);

        let e = evaluate(&images, 3).unwrap();
        assert_eq!(e.ap, 0.0);
        assert_eq!(e.ap50, 0.0);
        assert_eq!(e.ar, 0.0);

        // detections with class outside the universe
        let bad = vec![(vec![(lb(0.0, 0.0, 5.0, 5.0, 7), 0.5)], Vec::new())];
        assert!(matches!(
            evaluate(&bad, 3),
            Err(Error::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn zero_gt_class_reported_absent() {
        let images = vec![(
            vec![(lb(0.0, 0.0, 10.0, 10.0, 1), 0.9)],
            vec![lb(0.0, 0.0, 10.0, 10.0, 0)],
        )];
        let r = evaluate(&images, 2).unwrap();
        assert!(r.per_class_ap50.contains_key(&0));
        assert!(!r.per_class_ap50.contains_key(&1));
    }

    fn random_scene(
        rng: &mut impl Rng,
        max_gt: usize,
        max_det: usize,
        classes: usize,
    ) -> (Vec<Detection>, Vec<LabeledBox>) {
        let mut gts = Vec::new();
        for _ in 0..rng.random_range(0..=max_gt) {
            let x = rng.random_range(0.0..40.0);
            let y = rng.random_range(0.0..40.0);
            let w = rng.random_range(4.0..20.0);
            let h = rng.random_range(4.0..20.0);
            gts.push(lb(x, y, x + w, y + h, rng.random_range(0..classes)));
        }
        let mut dets = Vec::new();
        for _ in 0..rng.random_range(0..=max_det) {
            // half the detections perturb a GT, half are random
            if !gts.is_empty() && rng.random::<bool>() {
                let g = gts[rng.random_range(0..gts.len())];
                let dx = rng.random_range(-3.0..3.0);
                let dy = rng.random_range(-3.0..3.0);
                let b = BBox::new(
                    g.bbox.x0() + dx,
                    g.bbox.y0() + dy,
                    g.bbox.x1() + dx * 0.5,
                    g.bbox.y1() + dy * 0.5,
                )
                .unwrap();
                dets.push((LabeledBox::new(b, g.class_id), rng.random_range(0.05..1.0)));
            } else {
                let x = rng.random_range(0.0..40.0);
                let y = rng.random_range(0.0..40.0);
                let w = rng.random_range(4.0..20.0);
                let h = rng.random_range(4.0..20.0);
                dets.push((
                    lb(x, y, x + w, y + h, rng.random_range(0..classes)),
                    rng.random_range(0.05..1.0),
                ));
            }
        }
        (dets, gts)
    }

    /// Full-report oracle: recompute every aggregate from scratch with the
    /// prefix-scan AP. Exact equality expected.
    fn evaluate_oracle(
        images: &[(Vec<Detection>, Vec<LabeledBox>)],
        num_classes: usize,
    ) -> EvalReport {
        let mut per_class = BTreeMap::new();
        for class in 0..num_classes {
            let num_gt: usize = images
                .iter()
                .map(|(_, g)| g.iter().filter(|x| x.class_id == class).count())
                .sum();
            if num_gt == 0 {
                continue;
            }
            let mut ap_acc = Vec::new();
            let mut ar_acc = Vec::new();
            for &t in &IOU_THRESHOLDS {
                let mut flags = Vec::new();
                let mut scores = Vec::new();
                let mut tp = 0;
                for (dets, gts) in images {
                    let cd: Vec<Detection> =
                        dets.iter().filter(|(d, _)| d.class_id == class).copied().collect();
                    let cg: Vec<LabeledBox> =
                        gts.iter().filter(|g| g.class_id == class).copied().collect();
                    let f = match_detections(&cd, &cg, t);
                    tp += f.iter().filter(|&&x| x).count();
                    flags.extend(f);
                    scores.extend(cd.iter().map(|(_, s)| *s));
                }
                ap_acc.push(ap_oracle(&flags, &scores, num_gt).unwrap());
                ar_acc.push(tp as f64 / num_gt as f64);
            }
            per_class.insert(
                class,
                ClassMetrics {
                    ap: ap_acc.iter().sum::<f64>() / 10.0,
                    ap50: ap_acc[0],
                    ap75: ap_acc[5],
                    ar: ar_acc.iter().sum::<f64>() / 10.0,
                    num_gt,
                },
            );
        }
        let n = per_class.len() as f64;
        let mean = |f: fn(&ClassMetrics) -> f64| {
            if per_class.is_empty() {
                0.0
            } else {
                per_class.values().map(f).sum::<f64>() / n
            }
        };
        EvalReport {
            ap: mean(|m| m.ap),
            ap50: mean(|m| m.ap50),
            ap75: mean(|m| m.ap75),
            ar: mean(|m| m.ar),
            per_class_ap50: per_class.iter().map(|(&c, m)| (c, m.ap50)).collect(),
            per_class,
        }
    }

    #[test]
    fn evaluate_matches_bruteforce_oracle_on_random_scenes() {
        let mut rng = rng_stream(31, stream::SCENE);
        for case in 0..100 {
            let n_images = rng.random_range(1..4);
            let images: Vec<_> = (0..n_images)
                .map(|_| random_scene(&mut rng, 5, 8, 3))
                .collect();
            let fast = evaluate(&images, 3).unwrap();
            let slow = evaluate_oracle(&images, 3);
            assert_eq!(fast.ap, slow.ap, "case {case}");
            assert_eq!(fast.ap50, slow.ap50, "case {case}");
            assert_eq!(fast.ap75, slow.ap75, "case {case}");
            assert_eq!(fast.ar, slow.ar, "case {case}");
            assert_eq!(fast.per_class_ap50, slow.per_class_ap50, "case {case}");
            assert!(fast.ap >= 0.0 && fast.ap <= 1.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn adding_a_matching_detection_never_hurts(seed in 0u64..1000) {
            let mut rng = rng_stream(seed, stream::SCENE);
            let (mut dets, mut gts) = random_scene(&mut rng, 4, 6, 2);
            // one guaranteed-unmatched GT, then detect it exactly
            let extra = lb(60.0, 60.0, 80.0, 82.0, 1);
            gts.push(extra);
            let before = evaluate(&[(dets.clone(), gts.clone())], 2).unwrap();
            dets.push((extra, 0.99));
            let after = evaluate(&[(dets, gts)], 2).unwrap();
            prop_assert!(after.ap >= before.ap - 1e-12);
            prop_assert!(after.ap50 >= before.ap50 - 1e-12);
            prop_assert!(after.ap75 >= before.ap75 - 1e-12);
            prop_assert!(after.ar >= before.ar - 1e-12);
        }

        #[test]
        fn detection_order_is_irrelevant_with_distinct_scores(seed in 0u64..1000) {
            let mut rng = rng_stream(seed.wrapping_add(5000), stream::SCENE);
            let (mut dets, gts) = random_scene(&mut rng, 4, 6, 2);
            // force distinct scores
            for (i, d) in dets.iter_mut().enumerate() {
                d.1 = 0.1 + i as f64 * 1e-3 + rng.random_range(0.0..5e-4);
            }
            let a = evaluate(&[(dets.clone(), gts.clone())], 2).unwrap();
            dets.reverse();
            let b = evaluate(&[(dets, gts)], 2).unwrap();
            prop_assert_eq!(a.ap, b.ap);
            prop_assert_eq!(a.ap50, b.ap50);
            prop_assert_eq!(a.ar, b.ar);
        }
    }
}

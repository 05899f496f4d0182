//! Anchor/RoI target assignment and minibatch sampling.

use rand::Rng;

use super::boxcode::encode_box;
use crate::geometry::{BBox, LabeledBox};

/// Class-agnostic box proposal from the first stage.
#[derive(Debug, Clone, Copy)]
pub struct Proposal {
    pub bbox: BBox,
    /// Sigmoid objectness in `[0, 1]`.
    pub objectness: f64,
}

/// A proposal after ground-truth assignment. `assigned_class` is `None` for
/// background; foreground RoIs carry the matched GT index and its encoded
/// regression target.
#[derive(Debug, Clone, Copy)]
pub struct SampledRoi {
    pub bbox: BBox,
    pub assigned_class: Option<usize>,
    pub assigned_gt_index: Option<usize>,
    pub regression_target: [f64; 4],
}

impl SampledRoi {
    pub fn is_foreground(&self) -> bool {
        self.assigned_class.is_some()
    }
}

/// Anchor labels for RPN training.
pub struct AnchorTargets {
    /// 1 = positive, 0 = negative, -1 = ignored.
    pub labels: Vec<i8>,
    /// Encoded regression target per anchor (meaningful for positives).
    pub deltas: Vec<[f64; 4]>,
    /// Matched GT index per anchor.
    pub matched: Vec<Option<usize>>,
}

/// IoU-threshold anchor assignment with the usual guarantee that each GT's
/// best-overlapping anchor is positive. With no GT every anchor is negative.
pub fn assign_anchors(
    anchors: &[[f64; 4]],
    gts: &[LabeledBox],
    fg_iou: f64,
    bg_iou: f64,
) -> AnchorTargets {
    let n = anchors.len();
    let mut labels = vec![0i8; n];
    let mut deltas = vec![[0.0; 4]; n];
    let mut matched = vec![None; n];
    if gts.is_empty() {
        return AnchorTargets {
            labels,
            deltas,
            matched,
        };
    }
    let anchor_boxes: Vec<Option<BBox>> = anchors
        .iter()
        .map(|a| BBox::new(a[0], a[1], a[2], a[3]).ok())
        .collect();
    let mut best_per_gt = vec![(0usize, -1.0f64); gts.len()];
    for (i, ab) in anchor_boxes.iter().enumerate() {
        let Some(ab) = ab else { continue };
        let mut best = -1.0;
        let mut best_gt = 0;
        for (g, gt) in gts.iter().enumerate() {
            let iou = ab.iou(&gt.bbox);
            if iou > best {
                best = iou;
                best_gt = g;
            }
            if iou > best_per_gt[g].1 {
                best_per_gt[g] = (i, iou);
            }
        }
        if best >= fg_iou {
            labels[i] = 1;
            matched[i] = Some(best_gt);
        } else if best < bg_iou {
            labels[i] = 0;
        } else {
            labels[i] = -1;
        }
    }
    for (g, &(i, iou)) in best_per_gt.iter().enumerate() {
        if iou > 0.0 {
            labels[i] = 1;
            matched[i] = Some(g);
        }
    }
    for i in 0..n {
        if labels[i] == 1 {
            let g = matched[i].expect("positive anchors are matched");
            deltas[i] = encode_box(anchors[i], &gts[g].bbox, [1.0, 1.0, 1.0, 1.0]);
        }
    }
    AnchorTargets {
        labels,
        deltas,
        matched,
    }
}

/// Sample up to `batch` anchors with at most `pos_fraction` positives.
/// Returns (indices, binary targets) for the objectness loss.
pub fn sample_anchors<R: Rng>(
    targets: &AnchorTargets,
    batch: usize,
    pos_fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<f64>) {
    let pos: Vec<usize> = (0..targets.labels.len())
        .filter(|&i| targets.labels[i] == 1)
        .collect();
    let neg: Vec<usize> = (0..targets.labels.len())
        .filter(|&i| targets.labels[i] == 0)
        .collect();
    let n_pos = pos.len().min((batch as f64 * pos_fraction) as usize);
    let n_neg = neg.len().min(batch - n_pos);
    let mut idx = pick(&pos, n_pos, rng);
    idx.extend(pick(&neg, n_neg, rng));
    let labels = idx
        .iter()
        .map(|&i| if targets.labels[i] == 1 { 1.0 } else { 0.0 })
        .collect();
    (idx, labels)
}

fn pick<R: Rng>(pool: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    if n == pool.len() {
        return pool.to_vec();
    }
    rand::seq::index::sample(rng, pool.len(), n)
        .iter()
        .map(|i| pool[i])
        .collect()
}

/// Regression target weights for the second-stage box head.
pub const HEAD_BOX_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];

/// Assign proposals to GTs and sample up to `k` RoIs with a bounded
/// foreground fraction. GT boxes are always injected into the proposal set,
/// so the foreground pool is nonempty whenever the scene has GT.
pub fn sample_proposals<R: Rng>(
    proposals: &[Proposal],
    gts: &[LabeledBox],
    k: usize,
    fg_iou: f64,
    fg_fraction: f64,
    rng: &mut R,
) -> Vec<SampledRoi> {
    let mut boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    boxes.extend(gts.iter().map(|g| g.bbox));

    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for bbox in boxes {
        let mut best_iou = 0.0;
        let mut best_gt = None;
        for (g, gt) in gts.iter().enumerate() {
            let iou = bbox.iou(&gt.bbox);
            if iou > best_iou {
                best_iou = iou;
                best_gt = Some(g);
            }
        }
        match best_gt {
            Some(g) if best_iou >= fg_iou => fg.push(SampledRoi {
                bbox,
                assigned_class: Some(gts[g].class_id),
                assigned_gt_index: Some(g),
                regression_target: encode_box(bbox.corners(), &gts[g].bbox, HEAD_BOX_WEIGHTS),
            }),
            _ => bg.push(SampledRoi {
                bbox,
                assigned_class: None,
                assigned_gt_index: None,
                regression_target: [0.0; 4],
            }),
        }
    }

    let n_fg = fg.len().min(((k as f64) * fg_fraction).floor() as usize).min(k);
    let n_bg = bg.len().min(k - n_fg);
    let mut out: Vec<SampledRoi> = pick(&(0..fg.len()).collect::<Vec<_>>(), n_fg, rng)
        .into_iter()
        .map(|i| fg[i])
        .collect();
    out.extend(
        pick(&(0..bg.len()).collect::<Vec<_>>(), n_bg, rng)
            .into_iter()
            .map(|i| bg[i]),
    );
    out
}

/// Keep exactly the foreground RoIs, preserving order.
pub fn filter_background(rois: &[SampledRoi]) -> Vec<SampledRoi> {
    rois.iter().copied().filter(SampledRoi::is_foreground).collect()
}

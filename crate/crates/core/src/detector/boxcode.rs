//! Anchor generation, center/size box delta coding, and greedy NMS.

use crate::geometry::BBox;

/// Square anchors centered on every feature cell, one per scale.
/// Anchors are plain corner quadruples; they may exceed the image.
pub fn generate_anchors(fh: usize, fw: usize, stride: usize, scales: &[f64]) -> Vec<[f64; 4]> {
    let mut anchors = Vec::with_capacity(fh * fw * scales.len());
    for y in 0..fh {
        for x in 0..fw {
            let cx = (x as f64 + 0.5) * stride as f64;
            let cy = (y as f64 + 0.5) * stride as f64;
            for &s in scales {
                anchors.push([cx - s / 2.0, cy - s / 2.0, cx + s / 2.0, cy + s / 2.0]);
            }
        }
    }
    anchors
}

/// Encode `target` relative to `anchor` as `(dx, dy, dw, dh)` scaled by
/// `weights`.
pub fn encode_box(anchor: [f64; 4], target: &BBox, weights: [f64; 4]) -> [f64; 4] {
    let aw = anchor[2] - anchor[0];
    let ah = anchor[3] - anchor[1];
    let acx = anchor[0] + aw * 0.5;
    let acy = anchor[1] + ah * 0.5;
    let (tcx, tcy) = target.center();
    [
        weights[0] * (tcx - acx) / aw,
        weights[1] * (tcy - acy) / ah,
        weights[2] * (target.width() / aw).ln(),
        weights[3] * (target.height() / ah).ln(),
    ]
}

/// Clamp on decoded log-size deltas, as in the reference two-stage pipeline.
const MAX_DSIZE: f64 = 4.135_166_556_742_356; // ln(1000/16)

/// Invert [`encode_box`]; returns raw corners (possibly outside the image).
pub fn decode_box(anchor: [f64; 4], delta: [f64; 4], weights: [f64; 4]) -> [f64; 4] {
    let aw = anchor[2] - anchor[0];
    let ah = anchor[3] - anchor[1];
    let acx = anchor[0] + aw * 0.5;
    let acy = anchor[1] + ah * 0.5;
    let dx = delta[0] / weights[0];
    let dy = delta[1] / weights[1];
    let dw = (delta[2] / weights[2]).min(MAX_DSIZE);
    let dh = (delta[3] / weights[3]).min(MAX_DSIZE);
    let cx = acx + dx * aw;
    let cy = acy + dy * ah;
    let w = aw * dw.exp();
    let h = ah * dh.exp();
    [cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5]
}

/// Greedy NMS over `(box, score)` candidates ordered by descending score
/// (ties broken by input index). Returns surviving indices in keep order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut keep = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order {
            if !suppressed[j] && j != i && boxes[i].iou(&boxes[j]) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let anchor = [10.0, 20.0, 42.0, 52.0];
        let target = BBox::new(12.0, 18.0, 40.0, 60.0).unwrap();
        let w = [10.0, 10.0, 5.0, 5.0];
        let delta = encode_box(anchor, &target, w);
        let back = decode_box(anchor, delta, w);
        for (a, b) in back.iter().zip(target.corners()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn anchors_cover_grid() {
        let a = generate_anchors(2, 2, 8, &[16.0, 32.0]);
        assert_eq!(a.len(), 8);
        assert_eq!(a[0], [-4.0, -4.0, 12.0, 12.0]);
        // last cell, largest scale centered at (12, 12)
        assert_eq!(a[7], [-4.0, -4.0, 28.0, 28.0]);
    }

    #[test]
    fn nms_suppresses_duplicates() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let keep = nms(&[b, b, BBox::new(30.0, 30.0, 40.0, 40.0).unwrap()], &[0.9, 0.8, 0.7], 0.5);
        assert_eq!(keep, vec![0, 2]);
    }
}

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::autograd::sigmoid;
use crate::metrics::iou;
use crate::tensor::Tensor;

/// Bound on the raw log-size outputs before `exp`.
pub const TW_CLAMP: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub class_id: usize,
    pub confidence: f64,
    /// Centre and size in absolute pixels.
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl DetectionBox {
    pub fn xywh(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// Every cell of every level as a box, with its best class; per image.
pub fn decode(cfg: &ModelConfig, preds: &[Tensor; 3]) -> Vec<Vec<DetectionBox>> {
    let batch = preds[0].dims4().0;
    let nc = cfg.num_classes;
    let mut out = vec![Vec::new(); batch];
    for (level, p) in preds.iter().enumerate() {
        let s = cfg.strides[level] as f64;
        let (_, _, h, w) = p.dims4();
        for (b, boxes) in out.iter_mut().enumerate() {
            for gy in 0..h {
                for gx in 0..w {
                    let (mut best, mut conf) = (0, f64::NEG_INFINITY);
                    for c in 0..nc {
                        let v = p.at4(b, 4 + c, gy, gx);
                        if v > conf {
                            best = c;
                            conf = v;
                        }
                    }
                    let size = |ch| s * p.at4(b, ch, gy, gx).clamp(-TW_CLAMP, TW_CLAMP).exp();
                    boxes.push(DetectionBox {
                        class_id: best,
                        confidence: sigmoid(conf),
                        cx: (gx as f64 + sigmoid(p.at4(b, 0, gy, gx))) * s,
                        cy: (gy as f64 + sigmoid(p.at4(b, 1, gy, gx))) * s,
                        w: size(2),
                        h: size(3),
                    });
                }
            }
        }
    }
    out
}

/// Greedy class-wise suppression: keep the most confident box, drop every
/// box of the same class overlapping it by more than `iou_thresh`, repeat.
pub fn nms(mut boxes: Vec<DetectionBox>, iou_thresh: f64) -> Vec<DetectionBox> {
    boxes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut keep: Vec<DetectionBox> = Vec::new();
    for b in boxes {
        let suppressed = keep
            .iter()
            .any(|k| k.class_id == b.class_id && iou(k.xywh(), b.xywh()) > iou_thresh);
        if !suppressed {
            keep.push(b);
        }
    }
    keep
}

pub fn decode_and_nms(
    cfg: &ModelConfig,
    preds: &[Tensor; 3],
    conf_thresh: f64,
    iou_thresh: f64,
) -> Vec<Vec<DetectionBox>> {
    decode(cfg, preds)
        .into_iter()
        .map(|boxes| {
            let kept: Vec<DetectionBox> = boxes.into_iter().filter(|b| b.confidence >= conf_thresh).collect();
            nms(kept, iou_thresh)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(class_id: usize, confidence: f64, cx: f64, cy: f64, w: f64, h: f64) -> DetectionBox {
        DetectionBox {
            class_id,
            confidence,
            cx,
            cy,
            w,
            h,
        }
    }

    /// Repeatedly take the global maximum and delete what it covers.
    fn nms_reference(boxes: &[DetectionBox], thr: f64) -> Vec<DetectionBox> {
        let mut alive: Vec<bool> = vec![true; boxes.len()];
        let mut out = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..boxes.len() {
                if alive[i] && best.map_or(true, |b| boxes[i].confidence > boxes[b].confidence) {
                    best = Some(i);
                }
            }
            let Some(b) = best else { break };
            alive[b] = false;
            out.push(boxes[b]);
            for j in 0..boxes.len() {
                if alive[j] && boxes[j].class_id == boxes[b].class_id {
                    let a = &boxes[b];
                    let c = &boxes[j];
                    let ix = ((a.cx + a.w / 2.0).min(c.cx + c.w / 2.0) - (a.cx - a.w / 2.0).max(c.cx - c.w / 2.0)).max(0.0);
                    let iy = ((a.cy + a.h / 2.0).min(c.cy + c.h / 2.0) - (a.cy - a.h / 2.0).max(c.cy - c.h / 2.0)).max(0.0);
                    let inter = ix * iy;
                    if inter / (a.w * a.h + c.w * c.h - inter) > thr {
                        alive[j] = false;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn duplicate_boxes_collapse() {
        let b = bx(0, 0.9, 10.0, 10.0, 4.0, 4.0);
        let kept = nms(vec![b, DetectionBox { confidence: 0.8, ..b }], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);
    }

    #[test]
    fn disjoint_and_cross_class_survive() {
        let a = bx(0, 0.9, 10.0, 10.0, 4.0, 4.0);
        let b = bx(0, 0.8, 30.0, 30.0, 4.0, 4.0);
        let c = bx(1, 0.7, 10.0, 10.0, 4.0, 4.0);
        assert_eq!(iou(a.xywh(), b.xywh()), 0.0);
        assert_eq!(nms(vec![a, b, c], 0.5).len(), 3);
    }

    #[test]
    fn matches_reference_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let boxes: Vec<DetectionBox> = (0..20)
                .map(|_| {
                    bx(
                        rng.gen_range(0..2),
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..30.0),
                        rng.gen_range(0.0..30.0),
                        rng.gen_range(2.0..12.0),
                        rng.gen_range(2.0..12.0),
                    )
                })
                .collect();
            assert_eq!(nms(boxes.clone(), 0.45), nms_reference(&boxes, 0.45));
        }
    }

    #[test]
    fn decoded_centre_stays_in_its_cell() {
        let cfg = ModelConfig::micro();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let preds = cfg.grid_sizes().map(|g| Tensor::randn(vec![1, 7, g, g], 3.0, &mut rng));
        let boxes = &decode(&cfg, &preds)[0];
        let mut k = 0;
        for (level, &g) in cfg.grid_sizes().iter().enumerate() {
            let s = cfg.strides[level] as f64;
            for gy in 0..g {
                for gx in 0..g {
                    let b = boxes[k];
                    assert!(b.cx > gx as f64 * s && b.cx < (gx + 1) as f64 * s);
                    assert!(b.cy > gy as f64 * s && b.cy < (gy + 1) as f64 * s);
                    assert!(b.w > 0.0 && b.h > 0.0);
                    k += 1;
                }
            }
        }
    }
}

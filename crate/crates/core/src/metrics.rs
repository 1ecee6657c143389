//! IoU, greedy matching, all-point AP and mAP@0.5.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::AnnotationRecord;
use crate::error::{HdError, Result};
use crate::model::DetectionBox;

/// IoU of two `[cx, cy, w, h]` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = ((a[0] + a[2] / 2.0).min(b[0] + b[2] / 2.0) - (a[0] - a[2] / 2.0).max(b[0] - b[2] / 2.0)).max(0.0);
    let ih = ((a[1] + a[3] / 2.0).min(b[1] + b[3] / 2.0) - (a[1] - a[3] / 2.0).max(b[1] - b[3] / 2.0)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub records: Vec<AnnotationRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map50: f64,
    pub precision: f64,
    /// False when no prediction passed the confidence threshold.
    pub precision_defined: bool,
    pub recall: f64,
    pub per_class_ap: BTreeMap<usize, f64>,
    pub counts: Counts,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub iou_thresh: f64,
    /// Operating point for precision, recall and counts.
    pub conf_thresh: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            conf_thresh: 0.25,
        }
    }
}

/// One point per ranked prediction of a class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub class_id: usize,
    pub confidence: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Area under the monotone precision envelope over recall.
pub fn average_precision(recall: &[f64], precision: &[f64]) -> f64 {
    let mut env = precision.to_vec();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&env) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

struct Ranked {
    confidence: f64,
    tp: bool,
}

/// Greedy matching of one class: predictions by descending confidence, each
/// taking the best-overlapping still-unmatched truth box of its image.
fn match_class(
    class_id: usize,
    preds: &BTreeMap<String, Vec<DetectionBox>>,
    truths: &BTreeMap<&str, Vec<[f64; 4]>>,
    iou_thresh: f64,
) -> Vec<Ranked> {
    let mut cands: Vec<(&str, DetectionBox)> = preds
        .iter()
        .flat_map(|(id, v)| v.iter().filter(|b| b.class_id == class_id).map(move |b| (id.as_str(), *b)))
        .collect();
    cands.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
    let mut used: BTreeMap<&str, Vec<bool>> = truths.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    cands
        .into_iter()
        .map(|(id, b)| {
            let gts = truths.get(id).map_or(&[][..], |v| v.as_slice());
            let flags = used.entry(id).or_default();
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if flags[j] {
                    continue;
                }
                let o = iou(b.xywh(), *g);
                if o >= iou_thresh && best.map_or(true, |(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                flags[j] = true;
            }
            Ranked {
                confidence: b.confidence,
                tp: best.is_some(),
            }
        })
        .collect()
}

pub fn evaluate(
    preds: &BTreeMap<String, Vec<DetectionBox>>,
    gts: &[GroundTruth],
    opts: EvalOptions,
) -> Result<EvalResult> {
    Ok(evaluate_with_curves(preds, gts, opts)?.0)
}

pub fn evaluate_with_curves(
    preds: &BTreeMap<String, Vec<DetectionBox>>,
    gts: &[GroundTruth],
    opts: EvalOptions,
) -> Result<(EvalResult, Vec<PrCurve>)> {
    let known: BTreeSet<&str> = gts.iter().map(|g| g.image_id.as_str()).collect();
    if let Some(id) = preds.keys().find(|k| !known.contains(k.as_str())) {
        return Err(HdError::UnknownImage(id.clone()));
    }
    let mut classes: BTreeSet<usize> = gts.iter().flat_map(|g| g.records.iter().map(|r| r.class_id)).collect();
    let gt_classes = classes.clone();
    classes.extend(preds.values().flatten().map(|b| b.class_id));

    let mut per_class_ap = BTreeMap::new();
    let mut curves = Vec::new();
    let mut counts = Counts::default();
    for &c in &classes {
        let truths: BTreeMap<&str, Vec<[f64; 4]>> = gts
            .iter()
            .map(|g| {
                let boxes = g
                    .records
                    .iter()
                    .filter(|r| r.class_id == c)
                    .map(|r| r.to_pixels(g.width, g.height))
                    .collect();
                (g.image_id.as_str(), boxes)
            })
            .collect();
        let n_gt: usize = truths.values().map(Vec::len).sum();
        let ranked = match_class(c, preds, &truths, opts.iou_thresh);

        let mut curve = PrCurve {
            class_id: c,
            confidence: Vec::new(),
            precision: Vec::new(),
            recall: Vec::new(),
        };
        let mut tp = 0usize;
        for (i, r) in ranked.iter().enumerate() {
            tp += r.tp as usize;
            curve.confidence.push(r.confidence);
            curve.precision.push(tp as f64 / (i + 1) as f64);
            curve.recall.push(if n_gt > 0 { tp as f64 / n_gt as f64 } else { 0.0 });
        }
        if gt_classes.contains(&c) {
            per_class_ap.insert(c, average_precision(&curve.recall, &curve.precision));
        }
        let above: Vec<&Ranked> = ranked.iter().filter(|r| r.confidence >= opts.conf_thresh).collect();
        let tp_at = above.iter().filter(|r| r.tp).count();
        counts.tp += tp_at;
        counts.fp += above.len() - tp_at;
        counts.fn_ += n_gt - tp_at;
        curves.push(curve);
    }
    let map50 = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    let issued = counts.tp + counts.fp;
    let n_gt = counts.tp + counts.fn_;
    let result = EvalResult {
        map50,
        precision: if issued > 0 { counts.tp as f64 / issued as f64 } else { 0.0 },
        precision_defined: issued > 0,
        recall: if n_gt > 0 { counts.tp as f64 / n_gt as f64 } else { 0.0 },
        per_class_ap,
        counts,
    };
    Ok((result, curves))
}

/// `class_id,rank,confidence,precision,recall` rows for every curve.
pub fn pr_curves_csv(curves: &[PrCurve]) -> String {
    let mut s = String::from("class_id,rank,confidence,precision,recall\n");
    for c in curves {
        for i in 0..c.confidence.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                c.class_id,
                i + 1,
                c.confidence[i],
                c.precision[i],
                c.recall[i]
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(class_id: usize, confidence: f64, b: [f64; 4]) -> DetectionBox {
        DetectionBox {
            class_id,
            confidence,
            cx: b[0],
            cy: b[1],
            w: b[2],
            h: b[3],
        }
    }

    fn gt(id: &str, recs: Vec<AnnotationRecord>) -> GroundTruth {
        GroundTruth {
            image_id: id.into(),
            width: 100,
            height: 100,
            records: recs,
        }
    }

    fn rec(c: usize, cx: f64, cy: f64, w: f64, h: f64) -> AnnotationRecord {
        AnnotationRecord::new(c, cx, cy, w, h).unwrap()
    }

    /// Precision at every recall level reached, maximised over ranks at or
    /// beyond it, integrated as a step function.
    fn ap_oracle(tp_flags: &[bool], n_gt: usize) -> f64 {
        let points: Vec<(f64, f64)> = (0..tp_flags.len())
            .map(|k| {
                let tp = tp_flags[..=k].iter().filter(|&&t| t).count() as f64;
                (tp / n_gt as f64, tp / (k + 1) as f64)
            })
            .collect();
        let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
        levels.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for r in levels {
            let best = points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
            ap += (r - prev) * best;
            prev = r;
        }
        ap
    }

    #[test]
    fn iou_basics() {
        let a = [0.5, 0.5, 1.0, 1.0];
        assert_eq!(iou(a, a), 1.0);
        assert_eq!(iou(a, [5.0, 5.0, 1.0, 1.0]), 0.0);
        assert!((iou(a, [1.0, 0.5, 1.0, 1.0]) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn worked_example() {
        let g = gt(
            "a",
            vec![rec(0, 0.1, 0.1, 0.1, 0.1), rec(0, 0.5, 0.5, 0.1, 0.1), rec(0, 0.8, 0.8, 0.1, 0.1)],
        );
        let mut p = BTreeMap::new();
        p.insert(
            "a".to_string(),
            vec![
                det(0, 0.9, [10.0, 10.0, 10.0, 10.0]),
                det(0, 0.8, [30.0, 30.0, 10.0, 10.0]),
                det(0, 0.7, [50.0, 50.0, 10.0, 10.0]),
                det(0, 0.6, [80.0, 80.0, 10.0, 10.0]),
            ],
        );
        let (r, curves) = evaluate_with_curves(&p, &[g], EvalOptions::default()).unwrap();
        assert!((r.map50 - 5.0 / 6.0).abs() < 1e-6);
        assert_eq!(curves[0].precision, vec![1.0, 0.5, 2.0 / 3.0, 0.75]);
        assert!((ap_oracle(&[true, false, true, true], 3) - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.counts, Counts { tp: 3, fp: 1, fn_: 0 });
    }

    #[test]
    fn perfect_detector() {
        let gts = vec![
            gt("a", vec![rec(0, 0.2, 0.2, 0.1, 0.2), rec(1, 0.6, 0.6, 0.3, 0.2)]),
            gt("b", vec![rec(1, 0.5, 0.5, 0.4, 0.4)]),
        ];
        let p: BTreeMap<String, Vec<DetectionBox>> = gts
            .iter()
            .map(|g| {
                let v = g.records.iter().map(|r| det(r.class_id, 1.0, r.to_pixels(100, 100))).collect();
                (g.image_id.clone(), v)
            })
            .collect();
        let r = evaluate(&p, &gts, EvalOptions::default()).unwrap();
        assert_eq!(r.map50, 1.0);
        assert_eq!(r.precision, 1.0);
        assert!(r.per_class_ap.values().all(|&a| a == 1.0));
    }

    #[test]
    fn no_predictions() {
        let gts = vec![gt("a", vec![rec(0, 0.2, 0.2, 0.1, 0.2)])];
        let r = evaluate(&BTreeMap::new(), &gts, EvalOptions::default()).unwrap();
        assert_eq!(r.map50, 0.0);
        assert_eq!(r.precision, 0.0);
        assert!(!r.precision_defined);
    }

    #[test]
    fn unknown_image_rejected() {
        let mut p = BTreeMap::new();
        p.insert("zzz".to_string(), vec![]);
        assert!(matches!(
            evaluate(&p, &[gt("a", vec![])], EvalOptions::default()),
            Err(HdError::UnknownImage(id)) if id == "zzz"
        ));
    }

    #[test]
    fn duplicates_give_one_tp() {
        let gts = vec![gt("a", vec![rec(0, 0.5, 0.5, 0.2, 0.2)])];
        let mut p = BTreeMap::new();
        let b = [50.0, 50.0, 20.0, 20.0];
        p.insert("a".to_string(), vec![det(0, 0.9, b), det(0, 0.8, b)]);
        let r = evaluate(&p, &gts, EvalOptions::default()).unwrap();
        assert_eq!(r.counts.tp, 1);
        assert_eq!(r.counts.fp, 1);
    }

    fn random_case(rng: &mut impl Rng) -> (BTreeMap<String, Vec<DetectionBox>>, Vec<GroundTruth>) {
        let mut gts = Vec::new();
        let mut preds = BTreeMap::new();
        for i in 0..3 {
            let id = format!("img{i}");
            let recs: Vec<AnnotationRecord> = (0..rng.gen_range(1..4))
                .map(|_| rec(rng.gen_range(0..2), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), 0.2, 0.2))
                .collect();
            let mut p = Vec::new();
            for r in &recs {
                let [cx, cy, w, h] = r.to_pixels(100, 100);
                p.push(det(r.class_id, rng.gen_range(0.0..1.0), [cx + rng.gen_range(-6.0..6.0), cy, w, h]));
            }
            for _ in 0..rng.gen_range(0..3) {
                p.push(det(rng.gen_range(0..2), rng.gen_range(0.0..1.0), [50.0, 50.0, 20.0, 20.0]));
            }
            preds.insert(id.clone(), p);
            gts.push(gt(&id, recs));
        }
        (preds, gts)
    }

    #[test]
    fn monotone_confidence_transform_keeps_ap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let (p, g) = random_case(&mut rng);
            let base = evaluate(&p, &g, EvalOptions::default()).unwrap();
            let q: BTreeMap<String, Vec<DetectionBox>> = p
                .iter()
                .map(|(k, v)| {
                    let v = v.iter().map(|b| DetectionBox { confidence: b.confidence.powi(3), ..*b }).collect();
                    (k.clone(), v)
                })
                .collect();
            let r = evaluate(&q, &g, EvalOptions::default()).unwrap();
            assert!((r.map50 - base.map50).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&r.map50));
        }
    }

    #[test]
    fn low_confidence_fp_never_helps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let (mut p, g) = random_case(&mut rng);
            let base = evaluate(&p, &g, EvalOptions::default()).unwrap();
            let c = g[0].records[0].class_id;
            p.get_mut("img0").unwrap().push(det(c, -1.0, [1.0, 1.0, 1.0, 1.0]));
            let r = evaluate(&p, &g, EvalOptions::default()).unwrap();
            assert!(r.map50 <= base.map50 + 1e-12);
        }
    }

    #[test]
    fn csv_has_one_row_per_prediction() {
        let gts = vec![gt("a", vec![rec(0, 0.5, 0.5, 0.2, 0.2)])];
        let mut p = BTreeMap::new();
        p.insert("a".to_string(), vec![det(0, 0.9, [50.0, 50.0, 20.0, 20.0]), det(0, 0.3, [10.0, 10.0, 5.0, 5.0])]);
        let (_, curves) = evaluate_with_curves(&p, &gts, EvalOptions::default()).unwrap();
        let csv = pr_curves_csv(&curves);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,1,0.9,1,1"));
    }
}

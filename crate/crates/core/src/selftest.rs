//! Oracle suites behind the `selftest` command.
//!
//! Each suite compares an implementation against an independent slow
//! reference on seeded random instances and reports one [`CheckOutcome`].

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Mode, ParamStore, Var};
use crate::backbone::{Dam, Dan, Mgnet};
use crate::data::AnnotationRecord;
use crate::error::Result;
use crate::gradcheck::{GradCheck, GradCheckReport};
use crate::hganet::{dba_attention, Hganet};
use crate::hypergraph::{
    construct_hypergraph, hyperconv_matrix, hyperconv_message_passing, pairwise_distance, HyperConvWeights,
    VertexScaling, VertexSet,
};
use crate::metrics::{evaluate, iou, EvalOptions, GroundTruth};
use crate::model::{compute_loss, nms, DetectionBox, LossGains, Model, ModelConfig};
use crate::neck::{pixel_shuffle, pixel_unshuffle, Csf, Sam};
use crate::nn::Builder;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub criterion: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {} {}: {} ({:.2?})",
            if self.passed { "PASS" } else { "FAIL" },
            self.criterion,
            self.name,
            self.detail,
            self.elapsed
        )
    }
}

fn timed(criterion: u8, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        criterion,
        name,
        passed,
        detail,
        elapsed: t.elapsed(),
    }
}

/// Criteria 1 to 6 in order.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        hyperconv_equivalence(),
        hypergraph_construction(),
        gradient_checks(),
        pixel_unshuffle_oracle(),
        dba_properties(),
        metrics_oracle(),
    ]
}

fn random_vertices(rng: &mut ChaCha8Rng, n: usize, c: usize, spread: f64) -> Result<VertexSet> {
    VertexSet::new(n, c, (0..n * c).map(|_| rng.gen_range(-spread..spread)).collect())
}

pub fn hyperconv_equivalence() -> CheckOutcome {
    timed(1, "hyperconv matrix = message passing", || {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut worst = 0.0f64;
        let mut identity_ok = true;
        for _ in 0..100 {
            let n = rng.gen_range(1..=16);
            let c = rng.gen_range(1..=8);
            let vs = random_vertices(&mut rng, n, c, 2.0)?;
            let hg = construct_hypergraph(&vs, rng.gen_range(0.0..6.0))?;
            let theta = (0..c * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w = HyperConvWeights::new(c, c, theta)?;
            let a = hyperconv_matrix(&vs, &hg, &w)?;
            let (b, _) = hyperconv_message_passing(&vs, &hg, &w)?;
            worst = worst.max(a.max_abs_diff(&b) / vs.scale().max(1e-12));

            let zero = HyperConvWeights::zeros(c, c);
            identity_ok &= hyperconv_matrix(&vs, &hg, &zero)?.features() == vs.features();
            identity_ok &= hyperconv_message_passing(&vs, &hg, &zero)?.0.features() == vs.features();
        }
        Ok((
            worst <= 1e-5 && identity_ok,
            format!("100 instances, max rel err {worst:.2e}, theta=0 identity exact: {identity_ok}"),
        ))
    })
}

pub fn hypergraph_construction() -> CheckOutcome {
    timed(2, "hypergraph construction oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let mut mismatches = 0usize;
        let mut monotone = true;
        for _ in 0..100 {
            let n = rng.gen_range(1..=24);
            let c = rng.gen_range(1..=8);
            let vs = random_vertices(&mut rng, n, c, 3.0)?;
            let (e1, e2) = {
                let a: f64 = rng.gen_range(0.0..8.0);
                let b: f64 = rng.gen_range(0.0..8.0);
                (a.min(b), a.max(b))
            };
            let hg = construct_hypergraph(&vs, e1)?;
            for v in 0..n {
                for e in 0..n {
                    let d: f64 = (0..c).map(|k| (vs.row(v)[k] - vs.row(e)[k]).powi(2)).sum::<f64>().sqrt();
                    if hg.contains(v, e) != (d <= e1) {
                        mismatches += 1;
                    }
                }
            }
            let wider = construct_hypergraph(&vs, e2)?;
            monotone &= hg.incidence().iter().zip(wider.incidence()).all(|(a, b)| a <= b);
        }
        Ok((
            mismatches == 0 && monotone,
            format!("100 vertex sets, {mismatches} incidence mismatches, epsilon-monotone: {monotone}"),
        ))
    })
}

fn grad_line(name: &str, r: &GradCheckReport) -> String {
    format!("{name} {:.1e}", r.max_rel_err)
}

pub fn gradient_checks() -> CheckOutcome {
    timed(3, "finite-difference gradients", || {
        let mut lines = Vec::new();
        let mut ok = true;
        let mut record = |name: &str, r: GradCheckReport, tol: f64| {
            ok &= r.passes(tol);
            lines.push(grad_line(name, &r));
        };
        let gc = GradCheck::default();

        let mut rng = ChaCha8Rng::seed_from_u64(303);
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, &mut rng);
        let dan = Dan::new(&mut b, "dan", 4);
        let dam = Dam::new(&mut b, "dam", 3);
        let mg = Mgnet::new(&mut b, "mg", 8, 8, 3.0, VertexScaling::Raw)?;
        let hga = Hganet::new(&mut b, "hga", [3, 4, 5], 4, 1.0, 4096);
        let csf = Csf::new(&mut b, "csf", 2, 3, 4);
        let sam = Sam::new(&mut b, "sam", 3, 3, [1, 3, 5])?;

        let x = Tensor::randn(vec![1, 4, 6, 6], 1.0, &mut rng);
        record("DAN", gc.run(&store, &[x], |ctx, v| dan.forward(ctx, v[0]))?, 1e-4);
        let x = Tensor::randn(vec![1, 3, 6, 6], 1.0, &mut rng);
        record("DAM", gc.run(&store, &[x], |ctx, v| dam.forward(ctx, v[0]))?, 1e-4);
        let x = Tensor::randn(vec![1, 8, 8, 8], 1.0, &mut rng);
        record("MGNet", gc.run(&store, &[x], |ctx, v| mg.forward(ctx, v[0]))?, 1e-4);
        let xs = [(3, 8), (4, 4), (5, 2)].map(|(c, s)| Tensor::randn(vec![1, c, s, s], 0.5, &mut rng));
        let r = gc.run(&store, &xs, |ctx, v| {
            let out = hga.forward(ctx, [v[0], v[1], v[2]])?;
            let flat: Vec<Var> = out
                .iter()
                .map(|&o| {
                    let n = ctx.value(o).numel();
                    ctx.tape.reshape(o, &[1, n, 1, 1])
                })
                .collect();
            Ok(ctx.tape.concat_channels(&flat))
        })?;
        record("HGANet", r, 1e-4);
        let s = Tensor::randn(vec![1, 2, 8, 8], 1.0, &mut rng);
        let d = Tensor::randn(vec![1, 3, 4, 4], 1.0, &mut rng);
        record("CSF", gc.run(&store, &[s, d], |ctx, v| csf.forward(ctx, v[0], v[1]))?, 1e-4);
        let x = Tensor::randn(vec![1, 3, 6, 6], 1.0, &mut rng);
        record("SAM", gc.run(&store, &[x], |ctx, v| sam.forward(ctx, v[0]))?, 1e-4);

        record("model", full_model_spot_check(20)?, 1e-3);
        Ok((ok, lines.join(", ")))
    })
}

/// Total detection loss of the micro model against `n_params` sampled
/// trainable coordinates.
pub fn full_model_spot_check(n_params: usize) -> Result<GradCheckReport> {
    let cfg = ModelConfig::micro();
    let model = Model::new(cfg.clone(), 7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let shape = vec![2, 3, cfg.input_size, cfg.input_size];
    let n: usize = shape.iter().product();
    let x = Tensor::from_parts(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect());
    let targets = vec![
        vec![
            AnnotationRecord::new(0, 0.3, 0.4, 0.08, 0.06)?,
            AnnotationRecord::new(2, 0.7, 0.6, 0.3, 0.25)?,
        ],
        vec![AnnotationRecord::new(1, 0.5, 0.5, 0.7, 0.6)?],
    ];
    let gc = GradCheck {
        input_samples: 0,
        param_samples: 1,
        max_param_coords: Some(n_params),
        mode: Mode::Train,
        seed: 11,
        ..GradCheck::default()
    };
    gc.run(&model.params, &[x], |ctx, v| {
        let preds = model.forward(ctx, v[0])?;
        Ok(compute_loss(&model.config, ctx, &preds, &targets, LossGains::default())?.0)
    })
}

/// Direct index mapping: output `(b, c·r² + i·r + j, y, x)` reads input
/// `(b, c, y·r + i, x·r + j)`.
fn unshuffle_oracle(x: &Tensor, r: usize) -> Tensor {
    let (b, c, h, w) = x.dims4();
    let (oh, ow) = (h / r, w / r);
    let mut out = Tensor::zeros(vec![b, c * r * r, oh, ow]);
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let oc = ci * r * r + i * r + j;
                            let at = ((bi * c * r * r + oc) * oh + y) * ow + xx;
                            out.data_mut()[at] = x.at4(bi, ci, y * r + i, xx * r + j);
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn pixel_unshuffle_oracle() -> CheckOutcome {
    timed(4, "pixel unshuffle oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(505);
        let (mut oracle_bad, mut trip_bad) = (0, 0);
        for _ in 0..1000 {
            let r = rng.gen_range(1..=3);
            let shape = vec![
                rng.gen_range(1..=2),
                rng.gen_range(1..=4),
                r * rng.gen_range(1..=4),
                r * rng.gen_range(1..=4),
            ];
            let x = Tensor::randn(shape, 1.0, &mut rng);
            let y = pixel_unshuffle(&x, r)?;
            oracle_bad += usize::from(y != unshuffle_oracle(&x, r));
            trip_bad += usize::from(pixel_shuffle(&y, r)? != x);
        }
        Ok((
            oracle_bad == 0 && trip_bad == 0,
            format!("1000 tensors, {oracle_bad} oracle mismatches, {trip_bad} round-trip mismatches"),
        ))
    })
}

pub fn dba_properties() -> CheckOutcome {
    timed(5, "DBA attention properties", || {
        let mut rng = ChaCha8Rng::seed_from_u64(606);
        let mut failures = Vec::new();
        let mut worst = 0.0f64;
        for t in 0..100 {
            let n = rng.gen_range(1..=24);
            let c = rng.gen_range(1..=8);
            let vs = random_vertices(&mut rng, n, c, 2.0)?;
            let d = pairwise_distance(&vs)?;
            let scale = rng.gen_range(0.1..2.0);
            let a = dba_attention(&d, scale);
            for i in 0..n {
                if a[i * n + i] != 1.0 {
                    failures.push(format!("#{t} diagonal"));
                }
                for j in 0..n {
                    let v = a[i * n + j];
                    if v != a[j * n + i] {
                        failures.push(format!("#{t} symmetry"));
                    }
                    if !(v > 0.0 && v <= 1.0) {
                        failures.push(format!("#{t} range"));
                    }
                    worst = worst.max((v - (-scale * d.get(i, j)).exp()).abs());
                }
            }
            // rank order of attention is the reverse of rank order of distance
            for _ in 0..50 {
                let (p, q) = (rng.gen_range(0..n * n), rng.gen_range(0..n * n));
                let (dp, dq) = (d.values()[p], d.values()[q]);
                if dp < dq && a[p] < a[q] {
                    failures.push(format!("#{t} monotonicity"));
                }
            }
        }
        failures.dedup();
        Ok((
            failures.is_empty() && worst <= 1e-7,
            format!(
                "100 matrices, oracle max diff {worst:.1e}, failures: {}",
                if failures.is_empty() { "none".into() } else { failures.join(" ") }
            ),
        ))
    })
}

/// Quadratic greedy reference: every box is tested against every kept box
/// in descending confidence, ties broken by input order.
fn nms_reference(boxes: &[DetectionBox], thr: f64) -> Vec<DetectionBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].confidence.total_cmp(&boxes[a].confidence).then(a.cmp(&b)));
    let mut removed = vec![false; boxes.len()];
    let mut out = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        if removed[i] {
            continue;
        }
        out.push(boxes[i]);
        for &j in &order[k + 1..] {
            if boxes[j].class_id == boxes[i].class_id && iou(boxes[i].xywh(), boxes[j].xywh()) > thr {
                removed[j] = true;
            }
        }
    }
    out
}

fn det(class_id: usize, confidence: f64, cx: f64, cy: f64, w: f64, h: f64) -> DetectionBox {
    DetectionBox {
        class_id,
        confidence,
        cx,
        cy,
        w,
        h,
    }
}

/// Three ground truths, ranked predictions TP FP TP TP: the precision
/// envelope is 1 up to recall 1/3 and 3/4 after, so AP = 1/3 + 2/3 · 3/4.
pub fn worked_ap_example() -> Result<f64> {
    let gt = GroundTruth {
        image_id: "a".into(),
        width: 100,
        height: 100,
        records: vec![
            AnnotationRecord::new(0, 0.1, 0.1, 0.1, 0.1)?,
            AnnotationRecord::new(0, 0.5, 0.5, 0.1, 0.1)?,
            AnnotationRecord::new(0, 0.8, 0.8, 0.1, 0.1)?,
        ],
    };
    let preds = BTreeMap::from([(
        "a".to_string(),
        vec![
            det(0, 0.9, 10.0, 10.0, 10.0, 10.0),
            det(0, 0.8, 30.0, 30.0, 10.0, 10.0),
            det(0, 0.7, 50.0, 50.0, 10.0, 10.0),
            det(0, 0.6, 80.0, 80.0, 10.0, 10.0),
        ],
    )]);
    Ok(evaluate(&preds, &[gt], EvalOptions::default())?.map50)
}

pub fn metrics_oracle() -> CheckOutcome {
    timed(6, "metrics and NMS oracle", || {
        let ap = worked_ap_example()?;
        let ap_ok = (ap - 5.0 / 6.0).abs() <= 1e-6;

        let mut rng = ChaCha8Rng::seed_from_u64(707);
        let mut gts = Vec::new();
        let mut perfect = BTreeMap::new();
        for k in 0..10 {
            let n = rng.gen_range(0..4);
            let records: Vec<AnnotationRecord> = (0..n)
                .map(|_| {
                    let (w, h) = (rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4));
                    let cx = rng.gen_range(w / 2.0..1.0 - w / 2.0);
                    let cy = rng.gen_range(h / 2.0..1.0 - h / 2.0);
                    AnnotationRecord::new(rng.gen_range(0..3), cx, cy, w, h)
                })
                .collect::<Result<_>>()?;
            let id = format!("img{k}");
            perfect.insert(
                id.clone(),
                records
                    .iter()
                    .map(|r| det(r.class_id, 0.9, r.cx * 64.0, r.cy * 64.0, r.w * 64.0, r.h * 64.0))
                    .collect(),
            );
            gts.push(GroundTruth {
                image_id: id,
                width: 64,
                height: 64,
                records,
            });
        }
        let perfect_map = evaluate(&perfect, &gts, EvalOptions::default())?.map50;

        let mut nms_bad = 0;
        for _ in 0..100 {
            let n = rng.gen_range(0..40);
            let boxes: Vec<DetectionBox> = (0..n)
                .map(|_| {
                    det(
                        rng.gen_range(0..3),
                        // coarse confidences so ties occur
                        (rng.gen_range(0..20) as f64) / 20.0,
                        rng.gen_range(0.0..40.0),
                        rng.gen_range(0.0..40.0),
                        rng.gen_range(2.0..16.0),
                        rng.gen_range(2.0..16.0),
                    )
                })
                .collect();
            let thr = rng.gen_range(0.3..0.7);
            nms_bad += usize::from(nms(boxes.clone(), thr) != nms_reference(&boxes, thr));
        }
        Ok((
            ap_ok && perfect_map == 1.0 && nms_bad == 0,
            format!("worked AP {ap:.6}, perfect mAP50 {perfect_map}, NMS mismatches {nms_bad}/100"),
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for o in run_all() {
            assert!(o.passed, "{}", o.line());
        }
    }

    #[test]
    fn unshuffle_oracle_agrees_with_documented_layout() {
        let x = Tensor::from_parts(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(unshuffle_oracle(&x, 2).data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}

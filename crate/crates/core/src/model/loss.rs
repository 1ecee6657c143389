use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::decode::TW_CLAMP;
use crate::autograd::{Ctx, Tape, Var};
use crate::data::AnnotationRecord;
use crate::error::{HdError, Result};
use crate::tensor::Tensor;

const EPS: f64 = 1e-9;

/// One ground-truth box bound to a single grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub level: usize,
    pub batch: usize,
    pub gy: usize,
    pub gx: usize,
    pub class_id: usize,
    /// `[cx, cy, w, h]` in input pixels.
    pub target: [f64; 4],
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossGains {
    pub box_gain: f64,
    pub cls_gain: f64,
}

impl Default for LossGains {
    fn default() -> Self {
        Self {
            box_gain: 1.0,
            cls_gain: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub box_loss: f64,
    pub cls_loss: f64,
    pub total: f64,
    pub n_pos: usize,
    /// Boxes that found no free cell on any level.
    pub dropped: usize,
}

/// Fraction of the input side below which a box belongs to the finest level;
/// each coarser level doubles it (64 / 128 px at a 640 input).
const LEVEL_BOUND: f64 = 0.1;

/// Level whose stride suits the box, chosen from its longer side.
fn preferred_level(cfg: &ModelConfig, w: f64, h: f64) -> usize {
    let side = w.max(h);
    let base = LEVEL_BOUND * cfg.input_size as f64;
    (0..cfg.strides.len() - 1)
        .find(|&l| side <= base * (1 << l) as f64)
        .unwrap_or(cfg.strides.len() - 1)
}

/// Centre-cell assignment. A box whose cell is already taken falls back to
/// the nearest other level; if every level is taken it is dropped.
pub fn assign_targets(cfg: &ModelConfig, targets: &[Vec<AnnotationRecord>]) -> (Vec<Assignment>, usize) {
    let size = cfg.input_size;
    let grids = cfg.grid_sizes();
    let mut taken = std::collections::HashSet::new();
    let mut out = Vec::new();
    let mut dropped = 0;
    for (b, recs) in targets.iter().enumerate() {
        for r in recs {
            let t = r.to_pixels(size, size);
            let pref = preferred_level(cfg, t[2], t[3]) as isize;
            let mut order: Vec<usize> = (0..3).collect();
            order.sort_by_key(|&l| ((l as isize - pref).abs(), l));
            let slot = order.into_iter().find_map(|level| {
                let s = cfg.strides[level] as f64;
                let g = grids[level];
                let gx = ((t[0] / s).floor() as usize).min(g - 1);
                let gy = ((t[1] / s).floor() as usize).min(g - 1);
                taken.insert((b, level, gy, gx)).then_some((level, gy, gx))
            });
            match slot {
                Some((level, gy, gx)) => out.push(Assignment {
                    level,
                    batch: b,
                    gy,
                    gx,
                    class_id: r.class_id,
                    target: t,
                }),
                None => dropped += 1,
            }
        }
    }
    (out, dropped)
}

/// Complete IoU of two `[cx, cy, w, h]` boxes.
pub fn ciou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (ax0, ax1, ay0, ay1) = (a[0] - a[2] / 2.0, a[0] + a[2] / 2.0, a[1] - a[3] / 2.0, a[1] + a[3] / 2.0);
    let (bx0, bx1, by0, by1) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0, b[1] - b[3] / 2.0, b[1] + b[3] / 2.0);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let iou = inter / (a[2] * a[3] + b[2] * b[3] - inter + EPS);
    let cw = ax1.max(bx1) - ax0.min(bx0);
    let ch = ay1.max(by1) - ay0.min(by0);
    let rho2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let v = 4.0 / (PI * PI) * ((b[2] / b[3]).atan() - (a[2] / a[3]).atan()).powi(2);
    let alpha = v / (v - iou + 1.0 + EPS);
    iou - rho2 / (cw * cw + ch * ch + EPS) - alpha * v
}

fn constant_vec(tape: &mut Tape, v: Vec<f64>) -> Var {
    let n = v.len();
    tape.constant(Tensor::from_parts(vec![n], v))
}

/// Elementwise CIoU between predicted boxes (tape vectors) and constant targets.
fn ciou_var(tape: &mut Tape, p: [Var; 4], t: &[[f64; 4]]) -> Var {
    let col = |k: usize| t.iter().map(|b| b[k]).collect::<Vec<f64>>();
    let half = |tape: &mut Tape, v| tape.scale(v, 0.5);
    let [pcx, pcy, pw, ph] = p;
    let (hw, hh) = (half(tape, pw), half(tape, ph));
    let px0 = tape.sub(pcx, hw);
    let px1 = tape.add(pcx, hw);
    let py0 = tape.sub(pcy, hh);
    let py1 = tape.add(pcy, hh);
    let (tcx, tcy, tw, th) = (col(0), col(1), col(2), col(3));
    let corner = |c: &[f64], s: &[f64], sign: f64| -> Vec<f64> {
        c.iter().zip(s).map(|(c, s)| c + sign * s / 2.0).collect()
    };
    let tx0 = constant_vec(tape, corner(&tcx, &tw, -1.0));
    let tx1 = constant_vec(tape, corner(&tcx, &tw, 1.0));
    let ty0 = constant_vec(tape, corner(&tcy, &th, -1.0));
    let ty1 = constant_vec(tape, corner(&tcy, &th, 1.0));
    let zero = constant_vec(tape, vec![0.0; t.len()]);

    let ix1 = tape.minimum(px1, tx1);
    let ix0 = tape.maximum(px0, tx0);
    let iw = tape.sub(ix1, ix0);
    let iw = tape.maximum(iw, zero);
    let iy1 = tape.minimum(py1, ty1);
    let iy0 = tape.maximum(py0, ty0);
    let ih = tape.sub(iy1, iy0);
    let ih = tape.maximum(ih, zero);
    let inter = tape.mul(iw, ih);
    let parea = tape.mul(pw, ph);
    let tarea = constant_vec(tape, tw.iter().zip(&th).map(|(w, h)| w * h).collect());
    let union = tape.add(parea, tarea);
    let union = tape.sub(union, inter);
    let union = tape.add_scalar(union, EPS);
    let iou = tape.div(inter, union);

    let ex1 = tape.maximum(px1, tx1);
    let ex0 = tape.minimum(px0, tx0);
    let cw = tape.sub(ex1, ex0);
    let ey1 = tape.maximum(py1, ty1);
    let ey0 = tape.minimum(py0, ty0);
    let ch = tape.sub(ey1, ey0);
    let cw2 = tape.square(cw);
    let ch2 = tape.square(ch);
    let c2 = tape.add(cw2, ch2);
    let c2 = tape.add_scalar(c2, EPS);

    let tcx_v = constant_vec(tape, tcx.clone());
    let tcy_v = constant_vec(tape, tcy.clone());
    let dx = tape.sub(pcx, tcx_v);
    let dy = tape.sub(pcy, tcy_v);
    let dx2 = tape.square(dx);
    let dy2 = tape.square(dy);
    let rho2 = tape.add(dx2, dy2);
    let dist = tape.div(rho2, c2);

    let ratio = tape.div(pw, ph);
    let pa = tape.atan(ratio);
    let ta = constant_vec(tape, tw.iter().zip(&th).map(|(w, h)| (w / h).atan()).collect());
    let da = tape.sub(ta, pa);
    let v = tape.square(da);
    let v = tape.scale(v, 4.0 / (PI * PI));
    let denom = tape.sub(v, iou);
    let denom = tape.add_scalar(denom, 1.0 + EPS);
    let alpha = tape.div(v, denom);
    let av = tape.mul(alpha, v);

    let out = tape.sub(iou, dist);
    tape.sub(out, av)
}

/// Decoded predicted boxes at the assigned cells of one level.
fn decoded_at(ctx: &mut Ctx, pred: Var, cells: &[&Assignment], stride: f64) -> [Var; 4] {
    let (_, c, h, w) = ctx.value(pred).dims4();
    let idx = |a: &Assignment, ch: usize| ((a.batch * c + ch) * h + a.gy) * w + a.gx;
    let raw: Vec<Var> = (0..4)
        .map(|ch| {
            let ids: Vec<usize> = cells.iter().map(|a| idx(a, ch)).collect();
            ctx.tape.gather(pred, &ids)
        })
        .collect();
    let t = &mut ctx.tape;
    let n = cells.len();
    let gx = constant_vec(t, cells.iter().map(|a| a.gx as f64).collect());
    let gy = constant_vec(t, cells.iter().map(|a| a.gy as f64).collect());
    let lo = constant_vec(t, vec![-TW_CLAMP; n]);
    let hi = constant_vec(t, vec![TW_CLAMP; n]);
    let centre = |t: &mut Tape, r: Var, g: Var| {
        let s = t.sigmoid(r);
        let s = t.add(s, g);
        t.scale(s, stride)
    };
    let size = |t: &mut Tape, r: Var| {
        let r = t.maximum(r, lo);
        let r = t.minimum(r, hi);
        let e = t.exp(r);
        t.scale(e, stride)
    };
    let pcx = centre(t, raw[0], gx);
    let pcy = centre(t, raw[1], gy);
    let pw = size(t, raw[2]);
    let ph = size(t, raw[3]);
    [pcx, pcy, pw, ph]
}

/// BCE on every class logit plus `1 − CIoU` on assigned cells, both
/// divided by `max(n_pos, 1)`.
pub fn compute_loss(
    cfg: &ModelConfig,
    ctx: &mut Ctx,
    preds: &[Var; 3],
    targets: &[Vec<AnnotationRecord>],
    gains: LossGains,
) -> Result<(Var, LossComponents)> {
    let nc = cfg.num_classes;
    let batch = ctx.value(preds[0]).dims4().0;
    if targets.len() != batch {
        return Err(HdError::Shape(format!(
            "loss: {} target lists for a batch of {batch}",
            targets.len()
        )));
    }
    if let Some(r) = targets.iter().flatten().find(|r| r.class_id >= nc) {
        return Err(HdError::Dataset(format!(
            "class id {} out of range for {nc} classes",
            r.class_id
        )));
    }
    let (assigned, dropped) = assign_targets(cfg, targets);
    let norm = assigned.len().max(1) as f64;

    let mut cls_terms = Vec::new();
    let mut box_terms = Vec::new();
    for (level, &pred) in preds.iter().enumerate() {
        let (b, _, h, w) = ctx.value(pred).dims4();
        let logits = ctx.tape.slice_channels(pred, 4, nc);
        let mut t = Tensor::zeros(vec![b, nc, h, w]);
        let cells: Vec<&Assignment> = assigned.iter().filter(|a| a.level == level).collect();
        for a in &cells {
            t.set4(a.batch, a.class_id, a.gy, a.gx, 1.0);
        }
        let bce = ctx.tape.bce_with_logits(logits, &t);
        cls_terms.push(ctx.tape.sum(bce));
        if !cells.is_empty() {
            let p = decoded_at(ctx, pred, &cells, cfg.strides[level] as f64);
            let tb: Vec<[f64; 4]> = cells.iter().map(|a| a.target).collect();
            let c = ciou_var(&mut ctx.tape, p, &tb);
            let s = ctx.tape.sum(c);
            // Σ (1 − CIoU)
            let s = ctx.tape.scale(s, -1.0);
            box_terms.push(ctx.tape.add_scalar(s, cells.len() as f64));
        }
    }
    let sum_all = |tape: &mut Tape, v: &[Var]| -> Var {
        let mut acc = match v.first() {
            Some(&x) => x,
            None => return tape.constant(Tensor::scalar(0.0)),
        };
        for &x in &v[1..] {
            acc = tape.add(acc, x);
        }
        acc
    };
    let cls = sum_all(&mut ctx.tape, &cls_terms);
    let cls = ctx.tape.scale(cls, 1.0 / norm);
    let bx = sum_all(&mut ctx.tape, &box_terms);
    let bx = ctx.tape.scale(bx, 1.0 / norm);
    let wc = ctx.tape.scale(cls, gains.cls_gain);
    let wb = ctx.tape.scale(bx, gains.box_gain);
    let total = ctx.tape.add(wc, wb);
    ctx.ensure_finite("loss", total)?;
    let comps = LossComponents {
        box_loss: ctx.value(bx).data()[0],
        cls_loss: ctx.value(cls).data()[0],
        total: ctx.value(total).data()[0],
        n_pos: assigned.len(),
        dropped,
    };
    Ok((total, comps))
}

//! Single-threaded training loop with SGD or Adam, per-epoch evaluation and
//! best / last checkpoints.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Ctx, Mode, ParamId, ParamKind};
use crate::data::Dataset;
use crate::error::{HdError, Result};
use crate::metrics::{evaluate, EvalOptions, EvalResult};
use crate::model::{
    compute_loss, save_checkpoint, Checkpoint, DetectionBox, LossGains, Model, ModelConfig, OptimizerState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn default_lr(self) -> f64 {
        match self {
            OptimizerKind::Sgd => 0.01,
            OptimizerKind::Adam => 0.001,
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = HdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(HdError::config("optimizer", format!("expected sgd or adam, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Falls back to the optimizer's default when absent.
    pub lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub gains: LossGains,
    pub seed: u64,
    /// Evaluate every this many epochs (and always after the last).
    pub eval_every: usize,
    pub eval_conf: f64,
    pub nms_iou: f64,
    /// Stop once eval mAP50 reaches this value.
    pub stop_at_map50: Option<f64>,
    /// Where `best.ckpt`, `last.ckpt` and `history.json` go.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            optimizer: OptimizerKind::Sgd,
            lr: None,
            momentum: 0.937,
            weight_decay: 5e-4,
            adam_betas: (0.9, 0.999),
            grad_clip: Some(10.0),
            gains: LossGains::default(),
            seed: 0,
            eval_every: 1,
            eval_conf: 0.001,
            nms_iou: 0.6,
            stop_at_map50: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.optimizer.default_lr())
    }

    fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !lr.is_finite() || lr < 0.0 {
            return Err(HdError::config("lr", format!("must be finite and non-negative, got {lr}")));
        }
        if self.batch_size == 0 {
            return Err(HdError::config("batch_size", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(HdError::config("eval_every", "must be at least 1"));
        }
        Ok(())
    }
}

/// YAML run file: a `model` section (or a named `preset`) and a `train`
/// section. Missing sections take the desk preset and the training defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_yaml_str(s: &str) -> Result<Self> {
        let rc: Self = serde_yaml::from_str(s)?;
        if rc.preset.is_some() && rc.model.is_some() {
            return Err(HdError::config("preset", "give either `preset` or `model`, not both"));
        }
        rc.model_config()?;
        rc.train.validate()?;
        Ok(rc)
    }

    pub fn from_yaml_file(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| HdError::io(path, e))?;
        Self::from_yaml_str(&s)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = match (&self.model, &self.preset) {
            (Some(m), _) => m.clone(),
            (None, Some(p)) => ModelConfig::preset(p)?,
            (None, None) => ModelConfig::desk(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// SGD with momentum (dampening 0) or Adam; L2 weight decay on conv
/// weights only.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    momentum: f64,
    weight_decay: f64,
    betas: (f64, f64),
    step: u64,
    ids: Vec<ParamId>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let ids: Vec<ParamId> = model.params.trainable_ids().collect();
        let zeros = |ids: &[ParamId]| ids.iter().map(|&id| vec![0.0; model.params.get(id).numel()]).collect();
        let second = match cfg.optimizer {
            OptimizerKind::Adam => zeros(&ids),
            OptimizerKind::Sgd => Vec::new(),
        };
        Self {
            kind: cfg.optimizer,
            lr: cfg.lr(),
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            betas: cfg.adam_betas,
            step: 0,
            first: zeros(&ids),
            second,
            ids,
        }
    }

    pub fn state(&self) -> OptimizerState {
        let mut buffers = self.first.clone();
        buffers.extend(self.second.iter().cloned());
        OptimizerState {
            kind: match self.kind {
                OptimizerKind::Sgd => "sgd".into(),
                OptimizerKind::Adam => "adam".into(),
            },
            step: self.step,
            buffers,
        }
    }

    pub fn load_state(&mut self, s: &OptimizerState) -> Result<()> {
        let n = self.ids.len();
        let want = if self.kind == OptimizerKind::Adam { 2 * n } else { n };
        if s.buffers.len() != want {
            return Err(HdError::Checkpoint(format!(
                "optimizer state has {} buffers, expected {want}",
                s.buffers.len()
            )));
        }
        for (i, b) in s.buffers.iter().enumerate() {
            if b.len() != self.first[i % n].len() {
                return Err(HdError::Checkpoint(format!("optimizer buffer {i} has the wrong length")));
            }
        }
        self.first = s.buffers[..n].to_vec();
        self.second = s.buffers[n..].to_vec();
        self.step = s.step;
        Ok(())
    }

    /// One update from `grads[i]` for the i-th trainable parameter.
    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>]) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = self.betas;
        for (k, &id) in self.ids.iter().enumerate() {
            let decay = if model.params.entry(id).kind == ParamKind::Weight {
                self.weight_decay
            } else {
                0.0
            };
            let p = model.params.get_mut(id).data_mut();
            let g = &grads[k];
            match self.kind {
                OptimizerKind::Sgd => {
                    let buf = &mut self.first[k];
                    for i in 0..p.len() {
                        let gi = g[i] + decay * p[i];
                        buf[i] = self.momentum * buf[i] + gi;
                        p[i] -= self.lr * buf[i];
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    for i in 0..p.len() {
                        let gi = g[i] + decay * p[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub box_loss: f64,
    pub cls_loss: f64,
    pub total_loss: f64,
    pub map50: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Wall-clock, excluded from reproducibility comparisons.
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochLog>,
    pub best_map50: f64,
    pub best_epoch: usize,
    pub final_eval: EvalResult,
}

/// Eval-mode detection over a dataset, keyed by sample id.
pub fn predict_dataset(
    model: &Model,
    data: &Dataset,
    conf: f64,
    iou: f64,
    batch_size: usize,
) -> Result<BTreeMap<String, Vec<DetectionBox>>> {
    let size = model.config.input_size;
    let mut out = BTreeMap::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk, size)?;
        let dets = model.detect(&x, conf, iou)?;
        for (&i, d) in chunk.iter().zip(dets) {
            let s = &data.samples[i];
            // back to the sample's own pixel grid
            let (sx, sy) = (s.width as f64 / size as f64, s.height as f64 / size as f64);
            let d = d
                .into_iter()
                .map(|b| DetectionBox {
                    cx: b.cx * sx,
                    cy: b.cy * sy,
                    w: b.w * sx,
                    h: b.h * sy,
                    ..b
                })
                .collect();
            out.insert(s.id.clone(), d);
        }
    }
    Ok(out)
}

pub fn evaluate_model(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<EvalResult> {
    let preds = predict_dataset(model, data, cfg.eval_conf, cfg.nms_iou, cfg.batch_size)?;
    evaluate(&preds, &data.ground_truth(), EvalOptions::default())
}

/// Per-parameter gradients of one training batch, plus the loss parts.
/// Running statistics are updated on `model` as a side effect.
pub fn train_step_grads(
    model: &mut Model,
    x: &crate::Tensor,
    targets: &[Vec<crate::data::AnnotationRecord>],
    gains: LossGains,
) -> Result<(Vec<Vec<f64>>, crate::model::LossComponents)> {
    let (grads, comps, stats) = {
        let mut ctx = Ctx::new(&model.params, Mode::Train);
        let xv = ctx.tape.constant(x.clone());
        let preds = model.forward(&mut ctx, xv)?;
        let (loss, comps) = compute_loss(&model.config, &mut ctx, &preds, targets, gains)?;
        let g = ctx.tape.backward(loss);
        let grads: Vec<Vec<f64>> = model
            .params
            .trainable_ids()
            .map(|id| {
                g.param(id)
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; model.params.get(id).numel()])
            })
            .collect();
        (grads, comps, ctx.take_stat_updates())
    };
    for (id, t) in stats {
        *model.params.get_mut(id) = t;
    }
    Ok((grads, comps))
}

fn clip(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

pub fn train(mut model: Model, train_set: &Dataset, eval_set: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(HdError::Dataset("training set is empty".into()));
    }
    if let Some(c) = train_set.max_class() {
        if c >= model.config.num_classes {
            return Err(HdError::ConfigMismatch {
                field: "num_classes".into(),
                found: format!("class id {c} in data"),
                expected: format!("< {}", model.config.num_classes),
            });
        }
    }
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| HdError::io(dir, e))?;
    }
    let size = model.config.input_size;
    let mut opt = Optimizer::new(&model, cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (-1.0f64, 0usize);
    let mut final_eval = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let (mut sb, mut sc, mut st, mut nb) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, targets) = train_set.batch(chunk, size)?;
            let (mut grads, comps) = train_step_grads(&mut model, &x, &targets, cfg.gains).map_err(|e| match e {
                HdError::NonFinite(layer) => HdError::Diverged {
                    epoch,
                    message: format!("non-finite values in {layer}"),
                },
                other => other,
            })?;
            if !grads.iter().flatten().all(|g| g.is_finite()) {
                return Err(HdError::Diverged {
                    epoch,
                    message: "non-finite gradient".into(),
                });
            }
            if let Some(c) = cfg.grad_clip {
                clip(&mut grads, c);
            }
            opt.step(&mut model, &grads);
            sb += comps.box_loss;
            sc += comps.cls_loss;
            st += comps.total;
            nb += 1;
        }
        let n = nb as f64;
        let mut log_entry = EpochLog {
            epoch,
            box_loss: sb / n,
            cls_loss: sc / n,
            total_loss: st / n,
            map50: None,
            precision: None,
            recall: None,
            seconds: 0.0,
        };
        let last = epoch == cfg.epochs;
        let mut stop = false;
        if epoch % cfg.eval_every == 0 || last {
            let ev = evaluate_model(&model, eval_set, cfg)?;
            log_entry.map50 = Some(ev.map50);
            log_entry.precision = Some(ev.precision);
            log_entry.recall = Some(ev.recall);
            if ev.map50 > best.0 {
                best = (ev.map50, epoch);
                if let Some(dir) = &cfg.out_dir {
                    let ck = Checkpoint::from_model(&model, Some(opt.state()), epoch, cfg.seed);
                    save_checkpoint(&dir.join("best.ckpt"), &ck)?;
                }
            }
            stop = cfg.stop_at_map50.is_some_and(|t| ev.map50 >= t);
            final_eval = Some(ev);
        }
        log_entry.seconds = started.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: box {:.4} cls {:.4} total {:.4} map50 {}",
            log_entry.box_loss,
            log_entry.cls_loss,
            log_entry.total_loss,
            log_entry.map50.map_or("-".into(), |m| format!("{m:.4}"))
        );
        history.push(log_entry);
        if let Some(dir) = &cfg.out_dir {
            let ck = Checkpoint::from_model(&model, Some(opt.state()), epoch, cfg.seed);
            save_checkpoint(&dir.join("last.ckpt"), &ck)?;
            let p = dir.join("history.json");
            std::fs::write(&p, serde_json::to_vec_pretty(&history)?).map_err(|e| HdError::io(&p, e))?;
        }
        if stop {
            break;
        }
    }
    let final_eval = match final_eval {
        Some(e) => e,
        None => evaluate_model(&model, eval_set, cfg)?,
    };
    Ok(TrainOutcome {
        model,
        history,
        best_map50: best.0.max(0.0),
        best_epoch: best.1,
        final_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_yolo_dataset, synth_generate, Regime, SynthSpec};

    fn tiny_set(n: usize) -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        synth_generate(&SynthSpec::new(Regime::Tiny, n, 64, 5), dir.path()).unwrap();
        let ds = load_yolo_dataset(dir.path()).unwrap();
        (dir, ds)
    }

    #[test]
    fn run_config_sections_and_defaults() {
        let rc = RunConfig::from_yaml_str("train:\n  epochs: 3\n  optimizer: adam\n").unwrap();
        assert_eq!(rc.model_config().unwrap(), ModelConfig::desk());
        assert_eq!(rc.train.epochs, 3);
        assert_eq!(rc.train.lr(), 0.001);
        let rc = RunConfig::from_yaml_str("preset: micro\n").unwrap();
        assert_eq!(rc.model_config().unwrap(), ModelConfig::micro());
        assert!(RunConfig::from_yaml_str("train:\n  epoch: 3\n").is_err());
        assert!(RunConfig::from_yaml_str("preset: nope\n").is_err());
        assert!(RunConfig::from_yaml_str("train:\n  batch_size: 0\n").is_err());
    }

    #[test]
    fn zero_lr_leaves_trainable_parameters_unchanged() {
        let (_d, ds) = tiny_set(4);
        let model = Model::new(ModelConfig::micro(), 1).unwrap();
        let before = model.params.clone();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            lr: Some(0.0),
            ..Default::default()
        };
        let out = train(model, &ds, &ds, &cfg).unwrap();
        for id in before.trainable_ids() {
            assert_eq!(before.get(id), out.model.params.get(id), "{}", before.entry(id).name);
        }
    }

    #[test]
    fn fixed_seed_reproduces_loss_trajectory() {
        let (_d, ds) = tiny_set(4);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..Default::default()
        };
        let run = || {
            let m = Model::new(ModelConfig::micro(), 2).unwrap();
            train(m, &ds, &ds, &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        let strip = |h: &[EpochLog]| h.iter().map(|e| (e.total_loss, e.map50)).collect::<Vec<_>>();
        assert_eq!(strip(&a.history), strip(&b.history));
        assert_eq!(a.model.params.entries(), b.model.params.entries());
    }

    #[test]
    fn saves_best_and_last_and_resumes_optimizer() {
        let (_d, ds) = tiny_set(2);
        let out_dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            optimizer: OptimizerKind::Adam,
            out_dir: Some(out_dir.path().to_path_buf()),
            ..Default::default()
        };
        let out = train(Model::new(ModelConfig::micro(), 3).unwrap(), &ds, &ds, &cfg).unwrap();
        let last = crate::model::load_checkpoint(&out_dir.path().join("last.ckpt")).unwrap();
        assert!(out_dir.path().join("best.ckpt").exists());
        assert_eq!(last.epoch, 2);
        let restored = last.to_model().unwrap();
        assert_eq!(restored.params.entries(), out.model.params.entries());
        let mut opt = Optimizer::new(&restored, &cfg);
        opt.load_state(last.optimizer.as_ref().unwrap()).unwrap();
        assert_eq!(opt.state(), *last.optimizer.as_ref().unwrap());
    }

    #[test]
    fn divergence_keeps_last_good_checkpoint() {
        let (_d, ds) = tiny_set(2);
        let out_dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            out_dir: Some(out_dir.path().to_path_buf()),
            ..Default::default()
        };
        let out = train(Model::new(ModelConfig::micro(), 4).unwrap(), &ds, &ds, &cfg).unwrap();
        let good = std::fs::read(out_dir.path().join("last.ckpt")).unwrap();
        let mut broken = out.model;
        let id = broken.params.trainable_ids().next().unwrap();
        broken.params.get_mut(id).data_mut()[0] = f64::NAN;
        let r = train(broken, &ds, &ds, &cfg);
        assert!(matches!(r, Err(HdError::Diverged { epoch: 1, .. })), "{r:?}");
        assert_eq!(std::fs::read(out_dir.path().join("last.ckpt")).unwrap(), good);
    }

    #[test]
    fn every_parameter_gets_a_gradient() {
        let (_d, ds) = tiny_set(4);
        let mut m = Model::new(ModelConfig::micro(), 5).unwrap();
        let (x, mut t) = ds.batch(&[0, 1, 2, 3], 64).unwrap();
        // one box per level so every head branch sees a positive
        t[0].push(crate::data::AnnotationRecord::new(1, 0.3, 0.3, 0.15, 0.15).unwrap());
        t[1].push(crate::data::AnnotationRecord::new(2, 0.5, 0.5, 0.6, 0.5).unwrap());
        let (g, _) = train_step_grads(&mut m, &x, &t, LossGains::default()).unwrap();
        let ids: Vec<ParamId> = m.params.trainable_ids().collect();
        for (k, id) in ids.iter().enumerate() {
            assert!(g[k].iter().any(|&v| v != 0.0), "dead parameter {}", m.params.entry(*id).name);
        }
    }
}

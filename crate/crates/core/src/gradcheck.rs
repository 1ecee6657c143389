//! Central finite-difference verification of tape gradients.
//!
//! The scalar under test is `Σ f(inputs) ⊙ R` for a fixed random `R`, so
//! every output element contributes with a distinct weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Ctx, Mode, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub step: f64,
    /// Coordinates checked per input tensor.
    pub input_samples: usize,
    /// Coordinates checked per parameter tensor.
    pub param_samples: usize,
    /// Cap on the number of parameter coordinates overall.
    pub max_param_coords: Option<usize>,
    /// Denominator floor in the relative error.
    pub floor: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            input_samples: 12,
            param_samples: 3,
            max_param_coords: None,
            floor: 1e-6,
            mode: Mode::Train,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Description of the worst coordinate.
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol && self.coords_checked > 0
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn run_forward<'s, F>(
    store: &'s ParamStore,
    inputs: &[Tensor],
    mode: Mode,
    f: &F,
) -> Result<(Ctx<'s>, Vec<Var>, Var)>
where
    F: Fn(&mut Ctx, &[Var]) -> Result<Var>,
{
    let mut ctx = Ctx::new(store, mode).without_stat_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| ctx.tape.leaf(t.clone())).collect();
    let out = f(&mut ctx, &vars)?;
    Ok((ctx, vars, out))
}

enum Target {
    Input(usize),
    Param(ParamId),
}

impl GradCheck {
    pub fn run<F>(&self, store: &ParamStore, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Ctx, &[Var]) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);

        let mode = self.mode;

        let (ctx0, _, out0) = run_forward(store, inputs, mode, &f)?;
        let weights = Tensor::randn(ctx0.tape.value(out0).shape().to_vec(), 1.0, &mut rng);
        drop(ctx0);

        let loss_of = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
            let (ctx, _, out) = run_forward(store, inputs, mode, &f)?;
            Ok(ctx.tape.value(out).zip_map(&weights, |a, b| a * b).sum())
        };

        let (mut ctx, vars, out) = run_forward(store, inputs, mode, &f)?;
        let w = ctx.tape.constant(weights.clone());
        let prod = ctx.tape.mul(out, w);
        let loss = ctx.tape.sum(prod);
        let grads = ctx.tape.backward(loss);

        let mut coords: Vec<(Target, usize, f64)> = Vec::new();
        for (i, v) in vars.iter().enumerate() {
            let g = grads
                .wrt(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
            for _ in 0..self.input_samples.min(inputs[i].numel()) {
                let k = rng.gen_range(0..inputs[i].numel());
                coords.push((Target::Input(i), k, g.data()[k]));
            }
        }
        let mut param_coords = Vec::new();
        for (id, g) in grads.params() {
            if !store.entry(id).kind.trainable() {
                continue;
            }
            for _ in 0..self.param_samples.min(g.numel()) {
                let k = rng.gen_range(0..g.numel());
                param_coords.push((Target::Param(id), k, g.data()[k]));
            }
        }
        if let Some(cap) = self.max_param_coords {
            // uniform subsample without replacement
            for i in (1..param_coords.len()).rev() {
                param_coords.swap(i, rng.gen_range(0..=i));
            }
            param_coords.truncate(cap);
        }
        coords.extend(param_coords);
        drop(ctx);

        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            coords_checked: 0,
            worst: String::new(),
        };
        let mut work_store = store.clone();
        let mut work_inputs = inputs.to_vec();
        let h = self.step;
        for (target, k, analytic) in coords {
            let (lp, lm) = match target {
                Target::Input(i) => {
                    let orig = work_inputs[i].data()[k];
                    work_inputs[i].data_mut()[k] = orig + h;
                    let lp = loss_of(&work_store, &work_inputs)?;
                    work_inputs[i].data_mut()[k] = orig - h;
                    let lm = loss_of(&work_store, &work_inputs)?;
                    work_inputs[i].data_mut()[k] = orig;
                    (lp, lm)
                }
                Target::Param(id) => {
                    let orig = work_store.get(id).data()[k];
                    work_store.get_mut(id).data_mut()[k] = orig + h;
                    let lp = loss_of(&work_store, &work_inputs)?;
                    work_store.get_mut(id).data_mut()[k] = orig - h;
                    let lm = loss_of(&work_store, &work_inputs)?;
                    work_store.get_mut(id).data_mut()[k] = orig;
                    (lp, lm)
                }
            };
            let numeric = (lp - lm) / (2.0 * h);
            let err = relative_error(analytic, numeric, self.floor);
            report.coords_checked += 1;
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = report.max_rel_err.max(err);
                let what = match target {
                    Target::Input(i) => format!("input {i}"),
                    Target::Param(id) => store.entry(id).name.clone(),
                };
                report.worst = format!("{what}[{k}]: analytic {analytic:.6e} numeric {numeric:.6e}");
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_larger_magnitude_and_floor() {
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 1e-9, 1e-6), 1e-3);
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
    }
}

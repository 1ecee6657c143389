//! Parameterised layers shared by every block: plain convolution, batch
//! normalization and the Conv Block (convolution → BN → LeakyReLU(0.1)).

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Ctx, Mode, ParamId, ParamKind, ParamStore, Var};
use crate::error::{HdError, Result};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Registers parameters with deterministic initialisation.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    pub fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Conv {
        let weight = self
            .store
            .add_conv_weight(format!("{name}.weight"), [c_out, c_in, kernel, kernel], self.rng);
        let bias = bias.then(|| {
            self.store
                .add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(vec![c_out]))
        });
        Conv {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
        }
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) -> BatchNorm {
        BatchNorm {
            gamma: self
                .store
                .add(format!("{name}.gamma"), ParamKind::BnScale, Tensor::full(vec![c], 1.0)),
            beta: self
                .store
                .add(format!("{name}.beta"), ParamKind::BnShift, Tensor::zeros(vec![c])),
            running_mean: self.store.add(
                format!("{name}.running_mean"),
                ParamKind::RunningMean,
                Tensor::zeros(vec![c]),
            ),
            running_var: self.store.add(
                format!("{name}.running_var"),
                ParamKind::RunningVar,
                Tensor::full(vec![c], 1.0),
            ),
            channels: c,
        }
    }

    pub fn conv_block(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> ConvBlock {
        ConvBlock {
            conv: self.conv(&format!("{name}.conv"), c_in, c_out, kernel, stride, false),
            bn: self.batch_norm(&format!("{name}.bn"), c_out),
        }
    }
}

pub(crate) fn check_channels(ctx: &Ctx, x: Var, expected: usize, layer: &str) -> Result<()> {
    let shape = ctx.tape.shape(x);
    if shape.len() != 4 {
        return Err(HdError::Shape(format!("{layer}: expected rank-4 input, got {shape:?}")));
    }
    if shape[1] != expected {
        return Err(HdError::Shape(format!(
            "{layer}: expected {expected} input channels, got {}",
            shape[1]
        )));
    }
    Ok(())
}

/// Convolution with "same" padding `(k − 1) / 2`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        check_channels(ctx, x, self.c_in, "conv")?;
        let w = ctx.param(self.weight);
        let b = self.bias.map(|id| ctx.param(id));
        Ok(ctx.tape.conv2d(x, w, b, self.stride, (self.kernel - 1) / 2))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        match ctx.mode() {
            Mode::Train => {
                let (b_, h, w) = {
                    let s = ctx.tape.shape(x);
                    (s[0], s[2], s[3])
                };
                let (y, mean, var) = ctx.tape.batch_norm_train(x, g, b, BN_EPS);
                let n = (b_ * h * w) as f64;
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let rm = ctx.params().get(self.running_mean).data().to_vec();
                let rv = ctx.params().get(self.running_var).data().to_vec();
                let new_mean = rm
                    .iter()
                    .zip(&mean)
                    .map(|(r, m)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m)
                    .collect();
                let new_var = rv
                    .iter()
                    .zip(&var)
                    .map(|(r, v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v * unbias)
                    .collect();
                ctx.record_stat(self.running_mean, Tensor::from_parts(vec![self.channels], new_mean));
                ctx.record_stat(self.running_var, Tensor::from_parts(vec![self.channels], new_var));
                y
            }
            Mode::Eval => {
                let mean = ctx.params().get(self.running_mean).data().to_vec();
                let var = ctx.params().get(self.running_var).data().to_vec();
                ctx.tape.batch_norm_eval(x, g, b, &mean, &var, BN_EPS)
            }
        }
    }
}

/// Convolution (no bias) → batch norm → LeakyReLU(0.1).
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y);
        Ok(ctx.tape.leaky_relu(y, LEAKY_SLOPE))
    }

    pub fn c_out(&self) -> usize {
        self.conv.c_out
    }
}

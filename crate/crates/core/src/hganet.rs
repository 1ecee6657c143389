//! Multi-scale aggregation with distance-based attention.
//!
//! The three backbone levels are brought to the middle resolution, fused,
//! mixed by `exp(−scale·distance)` attention over spatial vertices and then
//! redistributed to every level as a residual.

use crate::autograd::{Ctx, Var};
use crate::error::{HdError, Result};
use crate::hypergraph::DistanceMatrix;
use crate::nn::{check_channels, BatchNorm, Builder, Conv, ConvBlock};

pub const DEFAULT_VERTEX_CAP: usize = 4096;

/// `exp(−scale · d)` elementwise; unit diagonal, symmetric, in `(0, 1]`.
pub fn dba_attention(d: &DistanceMatrix, scale: f64) -> Vec<f64> {
    d.values().iter().map(|&v| (-scale * v).exp()).collect()
}

#[derive(Debug, Clone)]
pub struct Hganet {
    pub fuse: ConvBlock,
    /// V = Conv₁(X_in).
    pub value: Conv,
    /// X_out = SiLU(BN(Conv₂(X_mid))).
    pub out_conv: Conv,
    pub out_bn: BatchNorm,
    pub redistribute: [Conv; 3],
    pub level_channels: [usize; 3],
    pub width: usize,
    pub scale: f64,
    pub vertex_cap: usize,
}

/// Intermediates of one pass, on the (possibly pooled) middle grid.
#[derive(Debug, Clone, Copy)]
pub struct HganetTrace {
    pub x_in: Var,
    pub attention: Var,
    pub x_mid: Var,
    pub x_out: Var,
}

impl Hganet {
    pub fn new(
        b: &mut Builder,
        name: &str,
        level_channels: [usize; 3],
        width: usize,
        scale: f64,
        vertex_cap: usize,
    ) -> Self {
        let total = level_channels.iter().sum();
        Self {
            fuse: b.conv_block(&format!("{name}.fuse"), total, width, 1, 1),
            value: b.conv(&format!("{name}.value"), width, width, 1, 1, true),
            out_conv: b.conv(&format!("{name}.out.conv"), width, width, 1, 1, false),
            out_bn: b.batch_norm(&format!("{name}.out.bn"), width),
            redistribute: [0, 1, 2].map(|i| {
                b.conv(
                    &format!("{name}.redistribute.{i}"),
                    width,
                    level_channels[i],
                    1,
                    1,
                    true,
                )
            }),
            level_channels,
            width,
            scale,
            vertex_cap,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, levels: [Var; 3]) -> Result<[Var; 3]> {
        Ok(self.forward_traced(ctx, levels)?.0)
    }

    pub fn forward_traced(&self, ctx: &mut Ctx, levels: [Var; 3]) -> Result<([Var; 3], HganetTrace)> {
        let dims: Vec<(usize, usize, usize, usize)> =
            levels.iter().map(|&v| ctx.value(v).dims4()).collect();
        for (i, &v) in levels.iter().enumerate() {
            check_channels(ctx, v, self.level_channels[i], "hganet")?;
        }
        for i in 0..2 {
            let (_, _, h0, w0) = dims[i];
            let (_, _, h1, w1) = dims[i + 1];
            if h0 != 2 * h1 || w0 != 2 * w1 {
                return Err(HdError::Shape(format!(
                    "hganet: level {i} is {h0}x{w0} but level {} is {h1}x{w1}; need exactly 2x",
                    i + 1
                )));
            }
        }
        let (_, _, mh, mw) = dims[1];
        let resized: Vec<Var> = levels
            .iter()
            .map(|&v| ctx.tape.resize_nearest(v, mh, mw))
            .collect();
        let cat = ctx.tape.concat_channels(&resized);
        let fused = self.fuse.forward(ctx, cat)?;

        let x_in = if mh * mw > self.vertex_cap {
            let f = ((mh * mw) as f64 / self.vertex_cap as f64).sqrt().ceil() as usize;
            let (ph, pw) = (mh.div_ceil(f), mw.div_ceil(f));
            if ph * pw > self.vertex_cap {
                return Err(HdError::VertexCap {
                    height: ph,
                    width: pw,
                    count: ph * pw,
                    cap: self.vertex_cap,
                });
            }
            ctx.tape.adaptive_avg_pool(fused, ph, pw)
        } else {
            fused
        };

        let d = ctx.tape.pairwise_distance(x_in);
        let neg = ctx.tape.scale(d, -self.scale);
        let attention = ctx.tape.exp(neg);
        let v = self.value.forward(ctx, x_in)?;
        let mixed = ctx.tape.vertex_matmul(attention, v);
        let x_mid = ctx.tape.add(mixed, x_in);
        let y = self.out_conv.forward(ctx, x_mid)?;
        let y = self.out_bn.forward(ctx, y);
        let x_out = ctx.tape.silu(y);
        let full = ctx.tape.resize_nearest(x_out, mh, mw);

        let mut out = levels;
        for (i, slot) in out.iter_mut().enumerate() {
            let (_, _, h, w) = dims[i];
            let r = ctx.tape.resize_nearest(full, h, w);
            let r = self.redistribute[i].forward(ctx, r)?;
            *slot = ctx.tape.add(levels[i], r);
        }
        Ok((
            out,
            HganetTrace {
                x_in,
                attention,
                x_mid,
                x_out,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Mode, ParamStore};
    use crate::gradcheck::GradCheck;
    use crate::hypergraph::{pairwise_distance, VertexSet};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_scalar_values() {
        let d = DistanceMatrix::from_values(2, vec![0.0, 2f64.ln(), 2f64.ln(), 0.0]).unwrap();
        let a = dba_attention(&d, 1.0);
        assert_eq!(a[0], 1.0);
        assert!((a[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn attention_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vs = VertexSet::new(6, 3, (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let d = pairwise_distance(&vs).unwrap();
        let a = dba_attention(&d, 1.0);
        for i in 0..6 {
            for j in 0..6 {
                let want = (-d.get(i, j)).exp();
                assert!((a[i * 6 + j] - want).abs() < 1e-7);
            }
        }
    }

    fn toy(seed: u64, dims: [(usize, usize); 3]) -> (ParamStore, Hganet, [Tensor; 3]) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chans = [3, 4, 5];
        let net = Hganet::new(&mut Builder::new(&mut store, &mut rng), "hga", chans, 4, 1.0, 4096);
        let xs = [0, 1, 2].map(|i| Tensor::randn(vec![1, chans[i], dims[i].0, dims[i].1], 0.5, &mut rng));
        (store, net, xs)
    }

    #[test]
    fn output_shapes_match_inputs() {
        let (store, net, xs) = toy(2, [(8, 8), (4, 4), (2, 2)]);
        let mut ctx = Ctx::new(&store, Mode::Train);
        let vs = xs.clone().map(|x| ctx.tape.constant(x));
        let out = net.forward(&mut ctx, vs).unwrap();
        for i in 0..3 {
            assert_eq!(ctx.tape.shape(out[i]), xs[i].shape());
        }
    }

    #[test]
    fn zero_value_conv_reduces_to_out_block_of_input() {
        let (mut store, net, xs) = toy(3, [(8, 8), (4, 4), (2, 2)]);
        store.get_mut(net.value.weight).data_mut().fill(0.0);
        let mut ctx = Ctx::new(&store, Mode::Train);
        let vs = xs.map(|x| ctx.tape.constant(x));
        let (_, t) = net.forward_traced(&mut ctx, vs).unwrap();
        assert_eq!(ctx.value(t.x_mid), ctx.value(t.x_in));
        let direct = {
            let y = net.out_conv.forward(&mut ctx, t.x_in).unwrap();
            let y = net.out_bn.forward(&mut ctx, y);
            ctx.tape.silu(y)
        };
        assert_eq!(ctx.value(direct), ctx.value(t.x_out));
    }

    #[test]
    fn attention_on_tape_has_unit_diagonal() {
        let (store, net, xs) = toy(4, [(8, 8), (4, 4), (2, 2)]);
        let mut ctx = Ctx::new(&store, Mode::Train);
        let vs = xs.map(|x| ctx.tape.constant(x));
        let (_, t) = net.forward_traced(&mut ctx, vs).unwrap();
        let a = ctx.value(t.attention);
        let n = 16;
        for i in 0..n {
            assert_eq!(a.data()[i * n + i], 1.0);
            for j in 0..n {
                assert_eq!(a.data()[i * n + j], a.data()[j * n + i]);
                assert!(a.data()[i * n + j] > 0.0 && a.data()[i * n + j] <= 1.0);
            }
        }
    }

    #[test]
    fn rejects_broken_pyramid() {
        let (store, net, xs) = toy(5, [(8, 8), (4, 4), (3, 3)]);
        let mut ctx = Ctx::new(&store, Mode::Train);
        let vs = xs.map(|x| ctx.tape.constant(x));
        assert!(net.forward(&mut ctx, vs).is_err());
    }

    #[test]
    fn pools_down_to_the_vertex_cap() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = Hganet::new(&mut Builder::new(&mut store, &mut rng), "hga", [2, 2, 2], 2, 1.0, 4);
        let xs = [(8, 8), (4, 4), (2, 2)].map(|(h, w)| Tensor::randn(vec![1, 2, h, w], 1.0, &mut rng));
        let mut ctx = Ctx::new(&store, Mode::Train);
        let vs = xs.map(|x| ctx.tape.constant(x));
        let (out, t) = net.forward_traced(&mut ctx, vs).unwrap();
        assert_eq!(ctx.tape.shape(t.x_in), &[1, 2, 2, 2]);
        assert_eq!(ctx.tape.shape(out[0]), &[1, 2, 8, 8]);
    }

    #[test]
    fn bitwise_deterministic() {
        let run = || {
            let (store, net, xs) = toy(7, [(8, 8), (4, 4), (2, 2)]);
            let mut ctx = Ctx::new(&store, Mode::Eval);
            let vs = xs.map(|x| ctx.tape.constant(x));
            let out = net.forward(&mut ctx, vs).unwrap();
            out.map(|v| ctx.value(v).clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn full_block_gradient() {
        let (store, net, xs) = toy(8, [(8, 8), (4, 4), (2, 2)]);
        let r = GradCheck::default()
            .run(&store, &xs, |ctx, v| {
                let out = net.forward(ctx, [v[0], v[1], v[2]])?;
                let flat: Vec<Var> = out
                    .iter()
                    .map(|&o| {
                        let n = ctx.value(o).numel();
                        ctx.tape.reshape(o, &[1, n, 1, 1])
                    })
                    .collect();
                Ok(ctx.tape.concat_channels(&flat))
            })
            .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}

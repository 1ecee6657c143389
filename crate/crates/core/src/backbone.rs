//! Backbone building blocks: the defect-aware attention network (DAN), the
//! defect-aware module (DAM) wrapping it, and the mixed graph network
//! (MGNet) that downsamples with a hypergraph branch beside a conv branch.

use crate::autograd::{Ctx, ParamId, Var};
use crate::error::{HdError, Result};
use crate::hypergraph::{construct_hypergraph_scaled, feature_map_to_vertices, VertexScaling};
use crate::nn::{check_channels, Builder, Conv, ConvBlock};
use crate::tensor::Tensor;

/// Produces a single-channel attention map in `(0, 1)`.
///
/// ```text
/// ca    = σ(Conv₁(AvgPool(X) ‖ MaxPool(X)))         global pools, 1×1 conv
/// sa    = mean_channels(Conv₂(X) · ca)               3×3 conv
/// X_mid = X · sa + X
/// out   = σ(Conv₃(X_mid))                            7×7 conv → 1 channel
/// ```
#[derive(Debug, Clone)]
pub struct Dan {
    pub conv1: Conv,
    pub conv2: Conv,
    pub conv3: Conv,
    pub channels: usize,
}

impl Dan {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        Self {
            conv1: b.conv(&format!("{name}.conv1"), 2 * channels, channels, 1, 1, true),
            conv2: b.conv(&format!("{name}.conv2"), channels, channels, 3, 1, true),
            conv3: b.conv(&format!("{name}.conv3"), channels, 1, 7, 1, true),
            channels,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        check_channels(ctx, x, self.channels, "dan")?;
        let avg = ctx.tape.global_avg_pool(x);
        let max = ctx.tape.global_max_pool(x);
        let pooled = ctx.tape.concat_channels(&[avg, max]);
        let ca = self.conv1.forward(ctx, pooled)?;
        let ca = ctx.tape.sigmoid(ca);
        let c2 = self.conv2.forward(ctx, x)?;
        let weighted = ctx.tape.mul(c2, ca);
        let sa = ctx.tape.channel_mean(weighted);
        let scaled = ctx.tape.mul(x, sa);
        let mid = ctx.tape.add(scaled, x);
        let out = self.conv3.forward(ctx, mid)?;
        Ok(ctx.tape.sigmoid(out))
    }
}

/// `V ⊙ DAN(X) + V` with `V` a 1×1 Conv Block value embedding of `X`.
#[derive(Debug, Clone)]
pub struct Dam {
    pub dan: Dan,
    pub value: ConvBlock,
}

/// Intermediates of one DAM pass.
#[derive(Debug, Clone, Copy)]
pub struct DamTrace {
    pub attention: Var,
    pub value: Var,
    pub output: Var,
}

impl Dam {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        Self {
            dan: Dan::new(b, &format!("{name}.dan"), channels),
            value: b.conv_block(&format!("{name}.value"), channels, channels, 1, 1),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, x)?.output)
    }

    pub fn forward_traced(&self, ctx: &mut Ctx, x: Var) -> Result<DamTrace> {
        let value = self.value.forward(ctx, x)?;
        let attention = self.dan.forward(ctx, x)?;
        let gated = ctx.tape.mul(value, attention);
        let output = ctx.tape.add(gated, value);
        Ok(DamTrace {
            attention,
            value,
            output,
        })
    }
}

/// Dual-branch downsampling block.
///
/// ```text
/// X_ge            = Conv₁(X)                 3×3 stride 2, c_in → 2·c_out
/// X_graph, X_conv = split(X_ge)
/// Y_graph         = HyperConv(X_graph)       ε-ball hypergraph per sample
/// X_le            = Conv₂(X_conv)            1×1
/// X_c1, X_c2      = split(X_le)
/// Y_c2            = BottleNeck(X_c2)         two 3×3 blocks + identity
/// out             = Conv₄(Y_graph ‖ X_c1 ‖ Y_c2)   1×1 → c_out
/// ```
#[derive(Debug, Clone)]
pub struct Mgnet {
    pub conv1: ConvBlock,
    /// Stored as a 1×1 kernel `(c_out, c_out, 1, 1)` holding `Θᵀ`.
    pub theta: ParamId,
    pub conv2: ConvBlock,
    pub bottleneck: [ConvBlock; 2],
    pub conv4: ConvBlock,
    pub c_in: usize,
    pub c_out: usize,
    pub epsilon: f64,
    pub scaling: VertexScaling,
}

#[derive(Debug, Clone, Copy)]
pub struct MgnetTrace {
    pub x_graph: Var,
    pub y_graph: Var,
    pub output: Var,
}

impl Mgnet {
    pub fn new(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        c_out: usize,
        epsilon: f64,
        scaling: VertexScaling,
    ) -> Result<Self> {
        if c_out < 2 || c_out % 2 != 0 {
            return Err(HdError::config(
                "widths",
                format!("MGNet output width must be even, got {c_out}"),
            ));
        }
        let half = c_out / 2;
        let theta_std = 1.0 / (c_out as f64).sqrt();
        let theta = {
            let t = Tensor::randn(vec![c_out, c_out, 1, 1], theta_std * 0.5, b.rng);
            b.store
                .add(format!("{name}.theta"), crate::autograd::ParamKind::Weight, t)
        };
        Ok(Self {
            conv1: b.conv_block(&format!("{name}.conv1"), c_in, 2 * c_out, 3, 2),
            theta,
            conv2: b.conv_block(&format!("{name}.conv2"), c_out, c_out, 1, 1),
            bottleneck: [
                b.conv_block(&format!("{name}.bottleneck.0"), half, half, 3, 1),
                b.conv_block(&format!("{name}.bottleneck.1"), half, half, 3, 1),
            ],
            conv4: b.conv_block(&format!("{name}.conv4"), 2 * c_out, c_out, 1, 1),
            c_in,
            c_out,
            epsilon,
            scaling,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, x)?.output)
    }

    pub fn forward_traced(&self, ctx: &mut Ctx, x: Var) -> Result<MgnetTrace> {
        check_channels(ctx, x, self.c_in, "mgnet")?;
        let (_, _, h, w) = ctx.value(x).dims4();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(HdError::Shape(format!(
                "mgnet: spatial size {h}x{w} must be even"
            )));
        }
        let c = self.c_out;
        let ge = self.conv1.forward(ctx, x)?;
        let x_graph = ctx.tape.slice_channels(ge, 0, c);
        let x_conv = ctx.tape.slice_channels(ge, c, c);

        let y_graph = self.hyperconv(ctx, x_graph)?;

        let le = self.conv2.forward(ctx, x_conv)?;
        let x_c1 = ctx.tape.slice_channels(le, 0, c / 2);
        let x_c2 = ctx.tape.slice_channels(le, c / 2, c / 2);
        let t = self.bottleneck[0].forward(ctx, x_c2)?;
        let t = self.bottleneck[1].forward(ctx, t)?;
        let y_c2 = ctx.tape.add(t, x_c2);

        let cat = ctx.tape.concat_channels(&[y_graph, x_c1, y_c2]);
        let output = self.conv4.forward(ctx, cat)?;
        Ok(MgnetTrace {
            x_graph,
            y_graph,
            output,
        })
    }

    /// `X + P·X·Θ` with `P = D_v⁻¹ H D_e⁻¹ Hᵀ` built from the current
    /// features of each batch item; `P` carries no gradient.
    fn hyperconv(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (b, _, h, w) = ctx.value(x).dims4();
        let n = h * w;
        let mut prop = Vec::with_capacity(b * n * n);
        for vs in feature_map_to_vertices(ctx.value(x))? {
            let hg = construct_hypergraph_scaled(&vs, self.epsilon, self.scaling)?;
            prop.extend(hg.propagation_matrix());
        }
        let p = ctx.tape.constant(Tensor::from_parts(vec![b, 1, n, n], prop));
        let theta = ctx.param(self.theta);
        let projected = ctx.tape.conv2d(x, theta, None, 1, 0);
        let agg = ctx.tape.vertex_matmul(p, projected);
        Ok(ctx.tape.add(x, agg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Mode, ParamStore};
    use crate::gradcheck::GradCheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn conv_block_shapes_and_channel_check() {
        let (mut store, mut rng) = setup(1);
        let mut b = Builder::new(&mut store, &mut rng);
        let s1 = b.conv_block("a", 4, 8, 3, 1);
        let s2 = b.conv_block("b", 4, 8, 3, 2);
        let x = Tensor::randn(vec![1, 4, 8, 8], 1.0, &mut rng);
        let mut ctx = Ctx::new(&store, Mode::Train);
        let xv = ctx.tape.leaf(x);
        let y1 = s1.forward(&mut ctx, xv).unwrap();
        let y2 = s2.forward(&mut ctx, xv).unwrap();
        assert_eq!(ctx.tape.shape(y1), &[1, 8, 8, 8]);
        assert_eq!(ctx.tape.shape(y2), &[1, 8, 4, 4]);
        assert!(s1.forward(&mut ctx, y1).is_err());
    }

    #[test]
    fn conv_block_gradient() {
        let (mut store, mut rng) = setup(2);
        let block = Builder::new(&mut store, &mut rng).conv_block("cb", 2, 3, 3, 1);
        let x = Tensor::randn(vec![1, 2, 4, 4], 1.0, &mut rng);
        let r = GradCheck::default()
            .run(&store, &[x], |ctx, v| block.forward(ctx, v[0]))
            .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn dan_output_in_unit_interval_with_input_shape() {
        let (mut store, mut rng) = setup(3);
        let dan = Dan::new(&mut Builder::new(&mut store, &mut rng), "dan", 4);
        let x = Tensor::randn(vec![2, 4, 6, 5], 3.0, &mut rng);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let xv = ctx.tape.constant(x);
        let y = dan.forward(&mut ctx, xv).unwrap();
        assert_eq!(ctx.tape.shape(y), &[2, 1, 6, 5]);
        assert!(ctx.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn dan_gradient() {
        let (mut store, mut rng) = setup(4);
        let dan = Dan::new(&mut Builder::new(&mut store, &mut rng), "dan", 4);
        let x = Tensor::randn(vec![1, 4, 6, 6], 1.0, &mut rng);
        let r = GradCheck::default()
            .run(&store, &[x], |ctx, v| dan.forward(ctx, v[0]))
            .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn dam_equals_value_times_one_plus_attention() {
        let (mut store, mut rng) = setup(5);
        let dam = Dam::new(&mut Builder::new(&mut store, &mut rng), "dam", 3);
        let x = Tensor::randn(vec![2, 3, 5, 5], 1.0, &mut rng);
        let mut ctx = Ctx::new(&store, Mode::Train);
        let xv = ctx.tape.constant(x);
        let t = dam.forward_traced(&mut ctx, xv).unwrap();
        let (a, v, out) = (ctx.value(t.attention), ctx.value(t.value), ctx.value(t.output));
        assert_eq!(out.shape(), v.shape());
        let (b, c, h, w) = v.dims4();
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let want = v.at4(bi, ci, y, xx) * (1.0 + a.at4(bi, 0, y, xx));
                        assert!((out.at4(bi, ci, y, xx) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn dam_with_vanishing_attention_is_value() {
        let (mut store, mut rng) = setup(6);
        let dam = Dam::new(&mut Builder::new(&mut store, &mut rng), "dam", 3);
        // push Conv₃'s bias far negative: σ → 0
        let bias = dam.dan.conv3.bias.unwrap();
        store.get_mut(bias).data_mut()[0] = -800.0;
        let x = Tensor::randn(vec![1, 3, 4, 4], 1.0, &mut rng);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let xv = ctx.tape.constant(x);
        let t = dam.forward_traced(&mut ctx, xv).unwrap();
        assert_eq!(ctx.value(t.output), ctx.value(t.value));
    }

    #[test]
    fn dam_is_translation_consistent_on_interior() {
        let (mut store, mut rng) = setup(7);
        let dam = Dam::new(&mut Builder::new(&mut store, &mut rng), "dam", 2);
        let (h, w) = (14, 14);
        let x = Tensor::randn(vec![1, 2, h, w], 1.0, &mut rng);
        // circular shift by (1, 2) leaves the global pools unchanged
        let mut shifted = Tensor::zeros(vec![1, 2, h, w]);
        for c in 0..2 {
            for y in 0..h {
                for xx in 0..w {
                    shifted.set4(0, c, (y + 1) % h, (xx + 2) % w, x.at4(0, c, y, xx));
                }
            }
        }
        let run = |t: Tensor| {
            let mut ctx = Ctx::new(&store, Mode::Eval);
            let v = ctx.tape.constant(t);
            let o = dam.forward(&mut ctx, v).unwrap();
            ctx.value(o).clone()
        };
        let (a, b) = (run(x), run(shifted));
        let margin = 5; // 3×3 then 7×7 receptive field
        for c in 0..2 {
            for y in margin..h - margin - 1 {
                for xx in margin..w - margin - 2 {
                    let d = (a.at4(0, c, y, xx) - b.at4(0, c, y + 1, xx + 2)).abs();
                    assert!(d < 1e-10, "({c},{y},{xx}) differs by {d}");
                }
            }
        }
    }

    #[test]
    fn dam_gradient() {
        let (mut store, mut rng) = setup(8);
        let dam = Dam::new(&mut Builder::new(&mut store, &mut rng), "dam", 3);
        let x = Tensor::randn(vec![1, 3, 6, 6], 1.0, &mut rng);
        let r = GradCheck::default()
            .run(&store, &[x], |ctx, v| dam.forward(ctx, v[0]))
            .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn mgnet_halves_spatial_and_sets_width() {
        let (mut store, mut rng) = setup(9);
        let m = Mgnet::new(
            &mut Builder::new(&mut store, &mut rng),
            "mg",
            64,
            128,
            3.0,
            VertexScaling::Raw,
        )
        .unwrap();
        let x = Tensor::randn(vec![1, 64, 16, 16], 1.0, &mut rng);
        let mut ctx = Ctx::new(&store, Mode::Train);
        let xv = ctx.tape.constant(x);
        let y = m.forward(&mut ctx, xv).unwrap();
        assert_eq!(ctx.tape.shape(y), &[1, 128, 8, 8]);
    }

    #[test]
    fn mgnet_rejects_odd_spatial() {
        let (mut store, mut rng) = setup(10);
        let m = Mgnet::new(&mut Builder::new(&mut store, &mut rng), "mg", 4, 8, 3.0, VertexScaling::Raw)
            .unwrap();
        let mut ctx = Ctx::new(&store, Mode::Train);
        let xv = ctx.tape.constant(Tensor::zeros(vec![1, 4, 7, 8]));
        assert!(matches!(m.forward(&mut ctx, xv), Err(HdError::Shape(_))));
    }

    #[test]
    fn mgnet_zero_theta_passes_graph_branch_through() {
        let (mut store, mut rng) = setup(11);
        let m = Mgnet::new(&mut Builder::new(&mut store, &mut rng), "mg", 4, 8, 30.0, VertexScaling::Raw)
            .unwrap();
        store.get_mut(m.theta).data_mut().fill(0.0);
        let x = Tensor::randn(vec![2, 4, 8, 8], 1.0, &mut rng);
        let mut ctx = Ctx::new(&store, Mode::Train);
        let xv = ctx.tape.constant(x);
        let t = m.forward_traced(&mut ctx, xv).unwrap();
        assert_eq!(ctx.value(t.y_graph), ctx.value(t.x_graph));
    }

    #[test]
    fn mgnet_is_deterministic_per_seed() {
        let build = || {
            let (mut store, mut rng) = setup(12);
            let m = Mgnet::new(&mut Builder::new(&mut store, &mut rng), "mg", 4, 8, 3.0, VertexScaling::Raw)
                .unwrap();
            let x = Tensor::randn(vec![1, 4, 8, 8], 1.0, &mut rng);
            let mut ctx = Ctx::new(&store, Mode::Train);
            let xv = ctx.tape.constant(x);
            let y = m.forward(&mut ctx, xv).unwrap();
            ctx.value(y).clone()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn mgnet_gradient() {
        let (mut store, mut rng) = setup(13);
        let m = Mgnet::new(&mut Builder::new(&mut store, &mut rng), "mg", 8, 8, 3.0, VertexScaling::Raw)
            .unwrap();
        let x = Tensor::randn(vec![1, 8, 8, 8], 1.0, &mut rng);
        let r = GradCheck::default()
            .run(&store, &[x], |ctx, v| m.forward(ctx, v[0]))
            .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}

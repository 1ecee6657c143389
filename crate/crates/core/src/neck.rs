//! Neck blocks: cross-scale fusion (CSF), the semantic aware module (SAM)
//! and the top-down FPN that wires them together.

use crate::autograd::{Ctx, Var};
use crate::error::{HdError, Result};
use crate::nn::{check_channels, Builder, Conv, ConvBlock, LEAKY_SLOPE};
use crate::tensor::Tensor;

fn unshuffle_perm(shape: &[usize], r: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if shape.len() != 4 {
        return Err(HdError::Shape(format!("pixel_unshuffle: expected rank 4, got {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(HdError::Shape(format!(
            "pixel_unshuffle: {h}x{w} is not divisible by factor {r}"
        )));
    }
    let (oh, ow, oc) = (h / r, w / r, c * r * r);
    let mut perm = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    for y in 0..oh {
                        for x in 0..ow {
                            perm.push(((bi * c + ci) * h + y * r + i) * w + x * r + j);
                        }
                    }
                }
            }
        }
    }
    Ok((vec![b, oc, oh, ow], perm))
}

/// `(B, C, H, W) → (B, C·r², H/r, W/r)`; output channel `c·r² + i·r + j`
/// at `(y, x)` holds input channel `c` at `(y·r + i, x·r + j)`.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (shape, perm) = unshuffle_perm(x.shape(), r)?;
    let d = x.data();
    Ok(Tensor::from_parts(shape, perm.iter().map(|&p| d[p]).collect()))
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4();
    if r == 0 || c % (r * r) != 0 {
        return Err(HdError::Shape(format!(
            "pixel_shuffle: {c} channels not divisible by {}",
            r * r
        )));
    }
    let target = [b, c / (r * r), h * r, w * r];
    let (_, perm) = unshuffle_perm(&target, r)?;
    let mut out = vec![0.0; x.numel()];
    for (i, &p) in perm.iter().enumerate() {
        out[p] = x.data()[i];
    }
    Ok(Tensor::from_parts(target.to_vec(), out))
}

/// Tape version of [`pixel_unshuffle`].
pub fn pixel_unshuffle_var(ctx: &mut Ctx, x: Var, r: usize) -> Result<Var> {
    let (shape, perm) = unshuffle_perm(ctx.tape.shape(x), r)?;
    Ok(ctx.tape.permute_elements(x, shape, perm))
}

/// Unshuffle the shallow map, concatenate with the deep one, then channel
/// attention, spatial attention and a 1×1 fusion block.
#[derive(Debug, Clone)]
pub struct Csf {
    pub fc1: Conv,
    pub fc2: Conv,
    pub spatial: Conv,
    pub fuse: ConvBlock,
    pub shallow_channels: usize,
    pub deep_channels: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct CsfTrace {
    pub concat: Var,
    pub channel_attention: Var,
    pub spatial_attention: Var,
    pub output: Var,
}

impl Csf {
    pub fn new(b: &mut Builder, name: &str, shallow: usize, deep: usize, width: usize) -> Self {
        let cat = 4 * shallow + deep;
        let hidden = (cat / 4).max(1);
        Self {
            fc1: b.conv(&format!("{name}.fc1"), cat, hidden, 1, 1, true),
            fc2: b.conv(&format!("{name}.fc2"), hidden, cat, 1, 1, true),
            spatial: b.conv(&format!("{name}.spatial"), 2, 1, 7, 1, true),
            fuse: b.conv_block(&format!("{name}.fuse"), cat, width, 1, 1),
            shallow_channels: shallow,
            deep_channels: deep,
        }
    }

    fn mlp(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.leaky_relu(h, LEAKY_SLOPE);
        self.fc2.forward(ctx, h)
    }

    pub fn forward(&self, ctx: &mut Ctx, shallow: Var, deep: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, shallow, deep)?.output)
    }

    pub fn forward_traced(&self, ctx: &mut Ctx, shallow: Var, deep: Var) -> Result<CsfTrace> {
        check_channels(ctx, shallow, self.shallow_channels, "csf shallow")?;
        check_channels(ctx, deep, self.deep_channels, "csf deep")?;
        let (sb, _, sh, sw) = ctx.value(shallow).dims4();
        let (db, _, dh, dw) = ctx.value(deep).dims4();
        if sb != db || sh != 2 * dh || sw != 2 * dw {
            return Err(HdError::Shape(format!(
                "csf: shallow {sh}x{sw} must be exactly twice deep {dh}x{dw}"
            )));
        }
        let un = pixel_unshuffle_var(ctx, shallow, 2)?;
        let concat = ctx.tape.concat_channels(&[un, deep]);

        let avg = ctx.tape.global_avg_pool(concat);
        let max = ctx.tape.global_max_pool(concat);
        let a = self.mlp(ctx, avg)?;
        let m = self.mlp(ctx, max)?;
        let s = ctx.tape.add(a, m);
        let channel_attention = ctx.tape.sigmoid(s);
        let x = ctx.tape.mul(concat, channel_attention);

        let mean = ctx.tape.channel_mean(x);
        let peak = ctx.tape.channel_max(x);
        let pair = ctx.tape.concat_channels(&[mean, peak]);
        let sa = self.spatial.forward(ctx, pair)?;
        let spatial_attention = ctx.tape.sigmoid(sa);
        let x = ctx.tape.mul(x, spatial_attention);

        let output = self.fuse.forward(ctx, x)?;
        Ok(CsfTrace {
            concat,
            channel_attention,
            spatial_attention,
            output,
        })
    }
}

/// Parallel Conv Blocks with different kernels, concatenated and fused 1×1.
#[derive(Debug, Clone)]
pub struct Sam {
    pub branches: Vec<ConvBlock>,
    pub fuse: ConvBlock,
    pub c_in: usize,
    pub width: usize,
}

impl Sam {
    pub fn new(b: &mut Builder, name: &str, c_in: usize, width: usize, kernels: [usize; 3]) -> Result<Self> {
        if let Some(k) = kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(HdError::config(
                "sam_kernels",
                format!("kernel sizes must be odd, got {k}"),
            ));
        }
        let branches = kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| b.conv_block(&format!("{name}.branch{i}"), c_in, width, k, 1))
            .collect();
        Ok(Self {
            branches,
            fuse: b.conv_block(&format!("{name}.fuse"), 3 * width, width, 1, 1),
            c_in,
            width,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        check_channels(ctx, x, self.c_in, "sam")?;
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            outs.push(b.forward(ctx, x)?);
        }
        let cat = ctx.tape.concat_channels(&outs);
        self.fuse.forward(ctx, cat)
    }
}

/// Top-down neck without a bottom-up path.
///
/// ```text
/// D5 = CSF(P4, P5)             out5 = SAM(D5)
/// D4 = CSF(P3, P4)             out4 = SAM(merge4(up(out5) ‖ D4))
///                              out3 = SAM(merge3(up(out4) ‖ P3))
/// ```
#[derive(Debug, Clone)]
pub struct FpnNeck {
    pub csf5: Csf,
    pub csf4: Csf,
    pub merge4: ConvBlock,
    pub merge3: ConvBlock,
    pub sam5: Sam,
    pub sam4: Sam,
    pub sam3: Sam,
}

impl FpnNeck {
    /// `widths` are the channel counts of P3, P4, P5; outputs keep them.
    pub fn new(b: &mut Builder, name: &str, widths: [usize; 3], kernels: [usize; 3]) -> Result<Self> {
        let [w3, w4, w5] = widths;
        Ok(Self {
            csf5: Csf::new(b, &format!("{name}.csf5"), w4, w5, w5),
            csf4: Csf::new(b, &format!("{name}.csf4"), w3, w4, w4),
            merge4: b.conv_block(&format!("{name}.merge4"), w5 + w4, w4, 1, 1),
            merge3: b.conv_block(&format!("{name}.merge3"), w4 + w3, w3, 1, 1),
            sam5: Sam::new(b, &format!("{name}.sam5"), w5, w5, kernels)?,
            sam4: Sam::new(b, &format!("{name}.sam4"), w4, w4, kernels)?,
            sam3: Sam::new(b, &format!("{name}.sam3"), w3, w3, kernels)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, levels: [Var; 3]) -> Result<[Var; 3]> {
        let [p3, p4, p5] = levels;
        let d5 = self.csf5.forward(ctx, p4, p5)?;
        ctx.ensure_finite("neck.csf5", d5)?;
        let out5 = self.sam5.forward(ctx, d5)?;
        ctx.ensure_finite("neck.sam5", out5)?;

        let d4 = self.csf4.forward(ctx, p3, p4)?;
        ctx.ensure_finite("neck.csf4", d4)?;
        let (_, _, h4, w4) = ctx.value(d4).dims4();
        let up5 = ctx.tape.resize_nearest(out5, h4, w4);
        let cat4 = ctx.tape.concat_channels(&[up5, d4]);
        let m4 = self.merge4.forward(ctx, cat4)?;
        let out4 = self.sam4.forward(ctx, m4)?;
        ctx.ensure_finite("neck.sam4", out4)?;

        let (_, _, h3, w3) = ctx.value(p3).dims4();
        let up4 = ctx.tape.resize_nearest(out4, h3, w3);
        let cat3 = ctx.tape.concat_channels(&[up4, p3]);
        let m3 = self.merge3.forward(ctx, cat3)?;
        let out3 = self.sam3.forward(ctx, m3)?;
        ctx.ensure_finite("neck.sam3", out3)?;
        Ok([out3, out4, out5])
    }
}

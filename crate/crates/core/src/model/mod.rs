//! Full detector: backbone → HGANet → FPN neck → decoupled heads, plus
//! loss, decoding and checkpoint persistence.

mod checkpoint;
mod config;
mod decode;
mod loss;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use decode::{decode, decode_and_nms, nms, DetectionBox};
pub use loss::{assign_targets, ciou, compute_loss, Assignment, LossComponents, LossGains};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Ctx, Mode, ParamStore, Var};
use crate::backbone::{Dam, Mgnet};
use crate::error::{HdError, Result};
use crate::hganet::Hganet;
use crate::neck::FpnNeck;
use crate::nn::{Builder, Conv, ConvBlock};
use crate::tensor::Tensor;

/// Classification prior `p = 0.01` for the initial logit bias.
const CLS_PRIOR: f64 = 0.01;

/// Box branch and class branch, each a 3×3 Conv Block then a 1×1 output.
#[derive(Debug, Clone)]
pub struct Head {
    pub box_stem: ConvBlock,
    pub box_out: Conv,
    pub cls_stem: ConvBlock,
    pub cls_out: Conv,
}

impl Head {
    fn new(b: &mut Builder, name: &str, c: usize, num_classes: usize) -> Self {
        let head = Self {
            box_stem: b.conv_block(&format!("{name}.box.stem"), c, c, 3, 1),
            box_out: b.conv(&format!("{name}.box.out"), c, 4, 1, 1, true),
            cls_stem: b.conv_block(&format!("{name}.cls.stem"), c, c, 3, 1),
            cls_out: b.conv(&format!("{name}.cls.out"), c, num_classes, 1, 1, true),
        };
        let prior = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        if let Some(id) = head.cls_out.bias {
            b.store.get_mut(id).data_mut().fill(prior);
        }
        head
    }

    /// `(B, 4 + num_classes, H, W)`: box channels first.
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let bx = self.box_stem.forward(ctx, x)?;
        let bx = self.box_out.forward(ctx, bx)?;
        let cl = self.cls_stem.forward(ctx, x)?;
        let cl = self.cls_out.forward(ctx, cl)?;
        Ok(ctx.tape.concat_channels(&[bx, cl]))
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub stem: ConvBlock,
    pub down1: ConvBlock,
    pub dam1: Dam,
    pub down2: ConvBlock,
    pub dam2: Dam,
    pub mgnet3: Mgnet,
    pub mgnet4: Mgnet,
    pub hganet: Hganet,
    pub neck: FpnNeck,
    pub heads: [Head; 3],
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub net: Network,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let [w0, w1, w2, w3] = config.widths;
        let net = Network {
            stem: b.conv_block("stem", 3, w0, 3, 2),
            down1: b.conv_block("stage1.down", w0, w0, 3, 2),
            dam1: Dam::new(&mut b, "stage1.dam", w0),
            down2: b.conv_block("stage2.down", w0, w1, 3, 2),
            dam2: Dam::new(&mut b, "stage2.dam", w1),
            mgnet3: Mgnet::new(&mut b, "stage3.mgnet", w1, w2, config.epsilon, config.scaling)?,
            mgnet4: Mgnet::new(&mut b, "stage4.mgnet", w2, w3, config.epsilon, config.scaling)?,
            hganet: Hganet::new(
                &mut b,
                "hganet",
                [w1, w2, w3],
                w2,
                config.dba_scale,
                config.vertex_cap,
            ),
            neck: FpnNeck::new(&mut b, "neck", [w1, w2, w3], config.sam_kernels)?,
            heads: [
                Head::new(&mut b, "head.p3", w1, config.num_classes),
                Head::new(&mut b, "head.p4", w2, config.num_classes),
                Head::new(&mut b, "head.p5", w3, config.num_classes),
            ],
        };
        Ok(Self { config, params, net })
    }

    /// Trainable scalar count (running statistics excluded).
    pub fn num_parameters(&self) -> usize {
        self.params.num_trainable()
    }

    /// Raw per-level predictions `(B, 4 + num_classes, S/s, S/s)` for strides 8, 16, 32.
    pub fn forward(&self, ctx: &mut Ctx, images: Var) -> Result<[Var; 3]> {
        let s = ctx.tape.shape(images).to_vec();
        let size = self.config.input_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(HdError::Shape(format!(
                "model: expected images (B, 3, {size}, {size}), got {s:?}"
            )));
        }
        let n = &self.net;
        let x = n.stem.forward(ctx, images)?;
        ctx.ensure_finite("stem", x)?;
        let x = n.down1.forward(ctx, x)?;
        let x = n.dam1.forward(ctx, x)?;
        ctx.ensure_finite("stage1", x)?;
        let x = n.down2.forward(ctx, x)?;
        let p3 = n.dam2.forward(ctx, x)?;
        ctx.ensure_finite("stage2", p3)?;
        let p4 = n.mgnet3.forward(ctx, p3)?;
        ctx.ensure_finite("stage3.mgnet", p4)?;
        let p5 = n.mgnet4.forward(ctx, p4)?;
        ctx.ensure_finite("stage4.mgnet", p5)?;
        let levels = n.hganet.forward(ctx, [p3, p4, p5])?;
        for (i, &l) in levels.iter().enumerate() {
            ctx.ensure_finite(&format!("hganet.level{i}"), l)?;
        }
        let feats = n.neck.forward(ctx, levels)?;
        let mut out = feats;
        for (i, (slot, head)) in out.iter_mut().zip(&n.heads).enumerate() {
            *slot = head.forward(ctx, feats[i])?;
            ctx.ensure_finite(&format!("head.{}", ["p3", "p4", "p5"][i]), *slot)?;
        }
        Ok(out)
    }

    /// Eval-mode forward on a batch.
    pub fn predict(&self, images: &Tensor) -> Result<[Tensor; 3]> {
        let mut ctx = Ctx::new(&self.params, Mode::Eval);
        let x = ctx.tape.constant(images.clone());
        let out = self.forward(&mut ctx, x)?;
        Ok(out.map(|v| ctx.value(v).clone()))
    }

    pub fn detect(&self, images: &Tensor, conf: f64, iou: f64) -> Result<Vec<Vec<DetectionBox>>> {
        let preds = self.predict(images)?;
        Ok(decode_and_nms(&self.config, &preds, conf, iou))
    }
}

//! The frozen Vision Transformer.
//!
//! Pre-LN blocks: `x + Attn(LN1(x))`, then `x + FFN(LN2(x))` with a GELU FFN.
//! Register (CLS-like) tokens are prepended to the patch tokens before the
//! positional embedding is added. `X_i` denotes the input of block `i`.

use serde::{Deserialize, Serialize};

use crate::baselines::Lora;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    #[serde(default = "default_registers")]
    pub num_register_tokens: usize,
}

fn default_channels() -> usize {
    3
}

fn default_registers() -> usize {
    1
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    /// Desk-scale geometry used throughout the tests.
    pub fn toy() -> Self {
        BackboneConfig {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            depth: 4,
            width: 32,
            heads: 4,
            mlp_ratio: 4,
            num_register_tokens: 1,
        }
    }

    /// ViT-B/16 at 224×224.
    pub fn vit_b16() -> Self {
        BackboneConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            depth: 12,
            width: 768,
            heads: 12,
            mlp_ratio: 4,
            num_register_tokens: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("depth", self.depth),
            ("width", self.width),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Tokens per sequence: patches plus register tokens.
    pub fn tokens(&self) -> usize {
        self.num_patches() + self.num_register_tokens
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const BLOCK_FIELDS: [&str; 16] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.wq",
    "attn.bq",
    "attn.wk",
    "attn.bk",
    "attn.wv",
    "attn.bv",
    "attn.wo",
    "attn.bo",
    "ln2.gamma",
    "ln2.beta",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
];

impl BlockWeights {
    fn init(cfg: &BackboneConfig, rng: &mut Rng) -> Self {
        let d = cfg.width;
        let h = cfg.mlp_hidden();
        let w = |shape: &[usize], rng: &mut Rng| {
            Tensor::trunc_normal(shape, INIT_STD, rng).into_parameter()
        };
        let zeros = |n: usize| Tensor::zeros(&[n]).into_parameter();
        let ones = |n: usize| Tensor::ones(&[n]).into_parameter();
        BlockWeights {
            ln1_gamma: ones(d),
            ln1_beta: zeros(d),
            wq: w(&[d, d], rng),
            bq: zeros(d),
            wk: w(&[d, d], rng),
            bk: zeros(d),
            wv: w(&[d, d], rng),
            bv: zeros(d),
            wo: w(&[d, d], rng),
            bo: zeros(d),
            ln2_gamma: ones(d),
            ln2_beta: zeros(d),
            w1: w(&[d, h], rng),
            b1: zeros(h),
            w2: w(&[h, d], rng),
            b2: zeros(d),
        }
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn from_tensors(t: Vec<Tensor>) -> Self {
        let mut it = t.into_iter().map(Tensor::into_parameter);
        let mut next = || it.next().expect("16 block tensors");
        BlockWeights {
            ln1_gamma: next(),
            ln1_beta: next(),
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln2_gamma: next(),
            ln2_beta: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        }
    }

    fn shapes(cfg: &BackboneConfig) -> [Vec<usize>; 16] {
        let d = cfg.width;
        let h = cfg.mlp_hidden();
        [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, h],
            vec![h],
            vec![h, d],
            vec![d],
        ]
    }

    /// Tape-tracked copy of every weight, for fully fine-tuned baselines.
    pub fn watch(&self, tape: &Tape) -> Self {
        Self::from_tensors(self.tensors().iter().map(|t| tape.watch(t)).collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        BLOCK_FIELDS.into_iter().zip(self.tensors())
    }
}

/// Every weight of the ViT, trainable or not.
#[derive(Debug, Clone)]
pub struct VitWeights {
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub registers: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
}

impl VitWeights {
    pub fn watch(&self, tape: &Tape) -> Self {
        VitWeights {
            patch_w: tape.watch(&self.patch_w),
            patch_b: tape.watch(&self.patch_b),
            registers: tape.watch(&self.registers),
            pos: tape.watch(&self.pos),
            blocks: self.blocks.iter().map(|b| b.watch(tape)).collect(),
            norm_gamma: tape.watch(&self.norm_gamma),
            norm_beta: tape.watch(&self.norm_beta),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_embed.w".to_string(), &self.patch_w),
            ("patch_embed.b".to_string(), &self.patch_b),
            ("registers".to_string(), &self.registers),
            ("pos_embed".to_string(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out.push(("norm.gamma".to_string(), &self.norm_gamma));
        out.push(("norm.beta".to_string(), &self.norm_beta));
        out
    }
}

/// Output of one block plus the keys and values its attention consumed.
pub struct BlockTrace {
    pub output: Tensor,
    pub keys: Tensor,
    pub values: Tensor,
}

/// One pre-LN transformer block. `lora`, when given, adds low-rank updates
/// to the query and value projections.
pub fn block_forward(
    tape: &Tape,
    w: &BlockWeights,
    x: &Tensor,
    heads: usize,
    lora: Option<&Lora>,
) -> Result<BlockTrace> {
    let h = tape.layernorm(x, &w.ln1_gamma, &w.ln1_beta, LN_EPS)?;
    let mut q = tape.linear(&h, &w.wq, &w.bq)?;
    let k = tape.linear(&h, &w.wk, &w.bk)?;
    let mut v = tape.linear(&h, &w.wv, &w.bv)?;
    if let Some(lora) = lora {
        q = tape.add(&q, &lora.delta_q(tape, &h)?)?;
        v = tape.add(&v, &lora.delta_v(tape, &h)?)?;
    }
    let a = tape.attention(&q, &k, &v, heads)?;
    let o = tape.linear(&a, &w.wo, &w.bo)?;
    let x1 = tape.add(x, &o)?;
    let f = ffn(tape, w, &x1)?;
    let output = tape.add(&x1, &f)?;
    Ok(BlockTrace {
        output,
        keys: k,
        values: v,
    })
}

/// `FFN(LN2(x))` with the block's weights.
pub fn ffn(tape: &Tape, w: &BlockWeights, x: &Tensor) -> Result<Tensor> {
    let h = tape.layernorm(x, &w.ln2_gamma, &w.ln2_beta, LN_EPS)?;
    let f = tape.linear(&h, &w.w1, &w.b1)?;
    let g = tape.gelu(&f)?;
    tape.linear(&g, &w.w2, &w.b2)
}

/// Splits a `[c, H, W]` image into row-major flattened patches
/// `[num_patches, c·p·p]`, each patch ordered channel, row, column.
pub fn patchify(cfg: &BackboneConfig, image: &Tensor) -> Result<Tensor> {
    if image.shape() != cfg.image_shape() {
        return Err(Error::dim("patchify", image.shape(), &cfg.image_shape()));
    }
    let (p, g, s) = (cfg.patch_size, cfg.grid(), cfg.image_size);
    let src = image.data();
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..cfg.channels {
                for py in 0..p {
                    let row = (c * s + gy * p + py) * s + gx * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::new(&[cfg.num_patches(), cfg.patch_dim()], out)
}

/// Token sequence entering the first block.
pub fn embed(tape: &Tape, cfg: &BackboneConfig, w: &VitWeights, image: &Tensor) -> Result<Tensor> {
    let patches = patchify(cfg, image)?;
    let tokens = tape.linear(&patches, &w.patch_w, &w.patch_b)?;
    let seq = tape.concat(&[&w.registers, &tokens], 0)?;
    tape.add(&seq, &w.pos)
}

/// Per-block features of one image, gathered without gradients.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    /// `inputs[i]` is the token sequence entering block `i`.
    pub inputs: Vec<Tensor>,
    /// Output of the last block.
    pub output: Tensor,
    /// Keys and values computed by block `i`'s attention from `inputs[i]`.
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

impl FeatureStack {
    pub fn depth(&self) -> usize {
        self.inputs.len()
    }
}

/// The pre-trained model, frozen. Its weights are never watched by a tape.
#[derive(Debug, Clone)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    weights: VitWeights,
}

impl FrozenBackbone {
    /// Truncated-normal (std 0.02) weights, zero biases, unit LayerNorm gains.
    pub fn build(config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let w = |shape: &[usize], rng: &mut Rng| {
            Tensor::trunc_normal(shape, INIT_STD, rng).into_parameter()
        };
        let patch_w = w(&[config.patch_dim(), d], rng);
        let registers = w(&[config.num_register_tokens, d], rng);
        let pos = w(&[config.tokens(), d], rng);
        let blocks = (0..config.depth)
            .map(|_| BlockWeights::init(&config, rng))
            .collect();
        Ok(FrozenBackbone {
            config,
            weights: VitWeights {
                patch_w,
                patch_b: Tensor::zeros(&[d]).into_parameter(),
                registers,
                pos,
                blocks,
                norm_gamma: Tensor::ones(&[d]).into_parameter(),
                norm_beta: Tensor::zeros(&[d]).into_parameter(),
            },
        })
    }

    pub fn from_checkpoint(config: BackboneConfig, ck: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let p = |t: Tensor| t.into_parameter();
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let shapes = BlockWeights::shapes(&config);
            let mut ts = Vec::with_capacity(16);
            for (name, shape) in BLOCK_FIELDS.iter().zip(shapes.iter()) {
                ts.push(ck.expect(&format!("blocks.{i}.{name}"), shape)?);
            }
            blocks.push(BlockWeights::from_tensors(ts));
        }
        let weights = VitWeights {
            patch_w: p(ck.expect("patch_embed.w", &[config.patch_dim(), d])?),
            patch_b: p(ck.expect("patch_embed.b", &[d])?),
            registers: p(ck.expect("registers", &[config.num_register_tokens, d])?),
            pos: p(ck.expect("pos_embed", &[config.tokens(), d])?),
            blocks,
            norm_gamma: p(ck.expect("norm.gamma", &[d])?),
            norm_beta: p(ck.expect("norm.beta", &[d])?),
        };
        let expected = weights.named().len();
        if ck.tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, backbone has {expected}",
                ck.tensors.len()
            )));
        }
        Ok(FrozenBackbone { config, weights })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, t) in self.weights.named() {
            ck.push(name, t);
        }
        ck
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn weights(&self) -> &VitWeights {
        &self.weights
    }

    /// Runs the frozen forward pass, collecting each block's input. Nothing
    /// is retained on `tape`.
    pub fn forward_collect(&self, tape: &Tape, image: &Tensor) -> Result<FeatureStack> {
        let mut x = embed(tape, &self.config, &self.weights, image)?;
        let l = self.config.depth;
        let (mut inputs, mut keys, mut values) = (
            Vec::with_capacity(l),
            Vec::with_capacity(l),
            Vec::with_capacity(l),
        );
        for block in &self.weights.blocks {
            let trace = block_forward(tape, block, &x, self.config.heads, None)?;
            inputs.push(x);
            keys.push(trace.keys);
            values.push(trace.values);
            x = trace.output;
        }
        Ok(FeatureStack {
            inputs,
            output: x,
            keys,
            values,
        })
    }

    /// Read-only access to block `index` (zero-based) for knowledge extraction.
    pub fn kem_view(&self, index: usize) -> Result<KemView<'_>> {
        let block = self.weights.blocks.get(index).ok_or(Error::Index {
            what: "backbone block",
            index,
            len: self.config.depth,
        })?;
        Ok(KemView {
            block,
            heads: self.config.heads,
            index,
        })
    }
}

/// Borrowed, read-only view of one frozen block.
#[derive(Debug, Clone, Copy)]
pub struct KemView<'a> {
    block: &'a BlockWeights,
    heads: usize,
    index: usize,
}

impl<'a> KemView<'a> {
    pub fn new(block: &'a BlockWeights, heads: usize) -> Self {
        KemView {
            block,
            heads,
            index: 0,
        }
    }

    pub fn weights(&self) -> &'a BlockWeights {
        self.block
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn index(&self) -> usize {
        self.index
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_configs() {
        let mut cfg = BackboneConfig::toy();
        cfg.width = 6;
        cfg.heads = 4;
        assert!(matches!(
            FrozenBackbone::build(cfg, &mut Rng::new(0)),
            Err(Error::Config(_))
        ));
        let mut cfg = BackboneConfig::toy();
        cfg.patch_size = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toy_geometry() {
        let cfg = BackboneConfig::toy();
        assert_eq!(cfg.tokens(), 17);
        assert_eq!(cfg.patch_dim(), 48);
        assert_eq!(BackboneConfig::vit_b16().tokens(), 197);
    }

    #[test]
    fn patchify_orders_patches_row_major() {
        let cfg = BackboneConfig {
            image_size: 4,
            patch_size: 2,
            channels: 1,
            ..BackboneConfig::toy()
        };
        let img = Tensor::new(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&cfg, &img).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn kem_view_bounds() {
        let b = FrozenBackbone::build(BackboneConfig::toy(), &mut Rng::new(1)).unwrap();
        assert!(b.kem_view(3).is_ok());
        assert!(matches!(b.kem_view(4), Err(Error::Index { .. })));
    }
}

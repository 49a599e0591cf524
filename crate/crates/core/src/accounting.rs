//! Closed-form census of trainable parameters, stored activations and
//! inference FLOPs for a tuning scheme on a given architecture.
//!
//! Activation counts follow the tape's retention rules exactly (see
//! [`Tape::saved_scalar_count`](crate::Tape::saved_scalar_count)), so every
//! scheme that can be instantiated at toy scale is checked against a real
//! tape. The others (VPT-deep, adapters, BitFit, LoRA on every block) apply
//! the same per-op rules to the structure they would add.

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::blocks::SynqtConfig;
use crate::error::{Error, Result};
use crate::head::{Aggregation, FeatureLayout, Projection};
use crate::model::{QueryMode, Variant};

/// Bytes per stored scalar in the 32-bit training regime being modelled.
pub const BYTES_PER_SCALAR: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Params,
    Activations,
    Flops,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerItem {
    pub name: String,
    pub category: Category,
    pub count: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    pub trainable_params: u64,
    pub stored_activation_scalars: u64,
    pub flops: u64,
    pub items: Vec<LedgerItem>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, category: Category, count: u64) {
        match category {
            Category::Params => self.trainable_params += count,
            Category::Activations => self.stored_activation_scalars += count,
            Category::Flops => self.flops += count,
        }
        self.items.push(LedgerItem {
            name: name.into(),
            category,
            count,
        });
    }

    /// Sum of the items in one category.
    pub fn item_total(&self, category: Category) -> u64 {
        self.items
            .iter()
            .filter(|i| i.category == category)
            .map(|i| i.count)
            .sum()
    }

    pub fn is_consistent(&self) -> bool {
        self.item_total(Category::Params) == self.trainable_params
            && self.item_total(Category::Activations) == self.stored_activation_scalars
            && self.item_total(Category::Flops) == self.flops
    }

    pub fn activation_bytes(&self) -> u64 {
        self.stored_activation_scalars * BYTES_PER_SCALAR
    }

    /// Appends another ledger's items, prefixing their names.
    pub fn absorb(&mut self, prefix: &str, other: Ledger) {
        for item in other.items {
            self.push(format!("{prefix}{}", item.name), item.category, item.count);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraPlacement {
    /// One block, one-based.
    Layer(usize),
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchemeKind {
    FullFinetune,
    LinearProbe,
    Bitfit,
    VptDeep {
        tokens: usize,
    },
    Lora {
        rank: usize,
        placement: LoraPlacement,
    },
    Adapter {
        hidden: usize,
    },
    Synqt {
        config: SynqtConfig,
        variant: Variant,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scheme {
    pub kind: SchemeKind,
    pub arch: BackboneConfig,
    pub num_classes: usize,
}

impl Scheme {
    pub fn new(kind: SchemeKind, arch: BackboneConfig, num_classes: usize) -> Self {
        Scheme {
            kind,
            arch,
            num_classes,
        }
    }

    pub fn synqt(config: SynqtConfig, arch: BackboneConfig, num_classes: usize) -> Self {
        Self::new(
            SchemeKind::Synqt {
                config,
                variant: Variant::default(),
            },
            arch,
            num_classes,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        let l = self.arch.depth;
        match self.kind {
            SchemeKind::VptDeep { tokens: 0 } => {
                Err(Error::Config("vpt_deep needs at least one token".into()))
            }
            SchemeKind::Lora { rank: 0, .. } => {
                Err(Error::Config("LoRA rank must be at least 1".into()))
            }
            SchemeKind::Lora {
                placement: LoraPlacement::Layer(k),
                ..
            } if k == 0 || k > l => Err(Error::Config(format!(
                "LoRA layer must be in 1..={l}, got {k}"
            ))),
            SchemeKind::Adapter { hidden: 0 } => Err(Error::Config(
                "adapter hidden width must be at least 1".into(),
            )),
            SchemeKind::Synqt { config, .. } => config.validate(self.arch.width),
            _ => Ok(()),
        }
    }
}

fn u(x: usize) -> u64 {
    x as u64
}

// -- parameters -------------------------------------------------------------

fn linear_params(inputs: usize, outputs: usize) -> u64 {
    u(inputs * outputs + outputs)
}

fn bottleneck_params(width: usize, hidden: usize) -> u64 {
    linear_params(width, hidden) + linear_params(hidden, width)
}

/// Trainable scalars of one query synthesis block.
pub fn qsm_params(cfg: &SynqtConfig, width: usize, prompt: bool) -> u64 {
    let p = if prompt { u(cfg.n * width) } else { 0 };
    p + 2 * bottleneck_params(width, cfg.hidden)
        + 3 * bottleneck_params(width, cfg.qkv_hidden)
        + u(4 * width)
}

fn backbone_block_params(a: &BackboneConfig) -> u64 {
    let d = a.width;
    4 * linear_params(d, d)
        + linear_params(d, a.mlp_hidden())
        + linear_params(a.mlp_hidden(), d)
        + u(4 * d)
}

/// Trainable-parameter census. Classifier heads are excluded for every
/// scheme, so a linear probe counts zero; SynQT's shared projection and
/// weight generator are counted, its final MLP is not.
pub fn count_params(scheme: &Scheme) -> Result<Ledger> {
    scheme.validate()?;
    let a = &scheme.arch;
    let (d, l) = (a.width, a.depth);
    let mut ledger = Ledger::new();
    let p = Category::Params;
    match scheme.kind {
        SchemeKind::FullFinetune => {
            ledger.push("patch_embed", p, linear_params(a.patch_dim(), d));
            ledger.push("registers", p, u(a.num_register_tokens * d));
            ledger.push("pos_embed", p, u(a.tokens() * d));
            for i in 1..=l {
                ledger.push(format!("block{i}"), p, backbone_block_params(a));
            }
            ledger.push("norm", p, u(2 * d));
        }
        SchemeKind::LinearProbe => {}
        SchemeKind::Bitfit => {
            ledger.push("patch_embed.b", p, u(d));
            for i in 1..=l {
                ledger.push(format!("block{i}.biases"), p, u(7 * d + a.mlp_hidden()));
            }
            ledger.push("norm.beta", p, u(d));
        }
        SchemeKind::VptDeep { tokens } => {
            for i in 1..=l {
                ledger.push(format!("block{i}.prompts"), p, u(tokens * d));
            }
        }
        SchemeKind::Lora { rank, placement } => {
            let layers: Vec<usize> = match placement {
                LoraPlacement::Layer(k) => vec![k],
                LoraPlacement::All => (1..=l).collect(),
            };
            for i in layers {
                ledger.push(format!("block{i}.lora"), p, u(4 * d * rank));
            }
        }
        SchemeKind::Adapter { hidden } => {
            for i in 1..=l {
                ledger.push(
                    format!("block{i}.adapters"),
                    p,
                    2 * bottleneck_params(d, hidden),
                );
            }
        }
        SchemeKind::Synqt { config, variant } => {
            if variant.queries == QueryMode::Synthesized {
                for i in 1..=l {
                    ledger.push(format!("qsm{i}"), p, qsm_params(&config, d, variant.prompt));
                }
            }
            let layout = FeatureLayout::new(l, &variant.head_options());
            let projections = match variant.projection {
                Projection::Shared => 1,
                Projection::Independent => layout.len(),
                Projection::None => 0,
            };
            if projections > 0 {
                ledger.push(
                    "head.projection",
                    p,
                    u(projections) * bottleneck_params(d, config.hidden),
                );
            }
            let gates = layout.len() - 1;
            match variant.aggregation {
                Aggregation::Conditional => {
                    ledger.push("head.generator", p, linear_params(d, gates))
                }
                Aggregation::Fixed => ledger.push("head.fixed_weights", p, u(gates)),
                Aggregation::Mean => {}
            }
        }
    }
    Ok(ledger)
}

// -- stored activations -----------------------------------------------------

/// Scalars one training sample keeps for backward. Multiply by the batch
/// size with [`activation_ledger`].
struct Geometry {
    m: u64,
    d: u64,
    h: u64,
    f: u64,
    c: u64,
}

impl Geometry {
    fn new(a: &BackboneConfig, num_classes: usize) -> Self {
        Geometry {
            m: u(a.tokens()),
            d: u(a.width),
            h: u(a.heads),
            f: u(a.mlp_hidden()),
            c: u(num_classes),
        }
    }

    /// Block whose every weight is trainable.
    fn trainable_block(&self, m: u64) -> u64 {
        let (d, h, f) = (self.d, self.h, self.f);
        // ln1, qkv input, q/k/v + probs, wo input, ln2, w1 input, gelu input, w2 input
        (m * d + m) + m * d + (3 * m * d + h * m * m) + m * d + (m * d + m) + m * d + m * f + m * f
    }

    /// Frozen block whose input carries a gradient.
    fn frozen_flow_block(&self, m: u64) -> u64 {
        let (d, h, f) = (self.d, self.h, self.f);
        // ln1, q/k/v + probs, ln2, gelu input
        (m * d + m) + (3 * m * d + h * m * m) + (m * d + m) + m * f
    }

    /// LayerNorm on the first register token, a linear classifier, softmax.
    fn token_head(&self, input_tracked: bool) -> u64 {
        let ln = if input_tracked { self.d + 1 } else { 0 };
        ln + self.d + self.c
    }
}

fn activations(scheme: &Scheme) -> Result<Ledger> {
    scheme.validate()?;
    let a = &scheme.arch;
    let g = Geometry::new(a, scheme.num_classes);
    let (m, d, h, f) = (g.m, g.d, g.h, g.f);
    let l = a.depth;
    let act = Category::Activations;
    let mut ledger = Ledger::new();
    match scheme.kind {
        SchemeKind::FullFinetune => {
            ledger.push("patch_embed", act, u(a.num_patches() * a.patch_dim()));
            for i in 1..=l {
                ledger.push(format!("block{i}"), act, g.trainable_block(m));
            }
            ledger.push("head", act, g.token_head(true));
        }
        SchemeKind::LinearProbe => {
            ledger.push("head", act, g.token_head(false));
        }
        SchemeKind::Bitfit => {
            for i in 1..=l {
                ledger.push(format!("block{i}"), act, g.frozen_flow_block(m));
            }
            ledger.push("head", act, g.token_head(true));
        }
        SchemeKind::VptDeep { tokens } => {
            let mp = m + u(tokens);
            for i in 1..=l {
                ledger.push(format!("block{i}"), act, g.frozen_flow_block(mp));
            }
            ledger.push("head", act, g.token_head(true));
        }
        SchemeKind::Lora { rank, placement } => {
            let r = u(rank);
            // h·A input (shared by q and v), h·A outputs, k and v for probs, ln2, gelu
            let first = m * d + 2 * m * r + (h * m * m + 2 * m * d) + (m * d + m) + m * f;
            let later = g.frozen_flow_block(m) + m * d + 2 * m * r;
            let start = match placement {
                LoraPlacement::Layer(k) => k,
                LoraPlacement::All => 1,
            };
            ledger.push(format!("block{start}.lora"), act, first);
            for i in start + 1..=l {
                let (name, count) = match placement {
                    LoraPlacement::Layer(_) => (format!("block{i}"), g.frozen_flow_block(m)),
                    LoraPlacement::All => (format!("block{i}.lora"), later),
                };
                ledger.push(name, act, count);
            }
            ledger.push("head", act, g.token_head(true));
        }
        SchemeKind::Adapter { hidden } => {
            let adapters = 2 * (m * d + 2 * m * u(hidden));
            ledger.push("block1", act, (m * d + m) + m * f + adapters);
            for i in 2..=l {
                ledger.push(format!("block{i}"), act, g.frozen_flow_block(m) + adapters);
            }
            ledger.push("head", act, g.token_head(true));
        }
        SchemeKind::Synqt { config, variant } => {
            synqt_activations(&mut ledger, &g, l, &config, &variant);
        }
    }
    Ok(ledger)
}

fn synqt_activations(ledger: &mut Ledger, g: &Geometry, l: usize, cfg: &SynqtConfig, v: &Variant) {
    let act = Category::Activations;
    let (m, d, h, f, c) = (g.m, g.d, g.h, g.f, g.c);
    let (n, dh, q) = (u(cfg.n), u(cfg.hidden), u(cfg.qkv_hidden));
    if v.queries == QueryMode::Synthesized {
        let mut zeros_counted = false;
        for i in 1..=l {
            // The input-bottleneck operand is the shared zero tensor whenever
            // no prompt is added to a zero previous output; it counts once.
            let zero_input = !v.prompt && (i == 1 || !v.last_output);
            let input = if zero_input && zeros_counted {
                0
            } else {
                n * d
            };
            zeros_counted |= zero_input;
            // input bottleneck, ln, q/k/v bottlenecks, attention, ln, ffn bottleneck
            let qsm = (input + n * dh)
                + (n * d + n)
                + (n * d + 6 * n * q)
                + (3 * n * d + n * n)
                + (n * d + n)
                + (n * d + 2 * n * dh);
            ledger.push(format!("qsm{i}"), act, qsm);
            // ln1, probs + frozen keys/values, ln2, gelu input
            let kem = (n * d + n) + (h * n * m + 2 * m * d) + (n * d + n) + n * f;
            ledger.push(format!("kem{i}"), act, kem);
        }
    }
    let layout = FeatureLayout::new(l, &v.head_options());
    let count = u(layout.len());
    let features_tracked = v.queries == QueryMode::Synthesized;
    let projected = v.projection != Projection::None;
    if projected {
        ledger.push("head.projection", act, count * (d + dh));
    }
    let gated = v.aggregation != Aggregation::Mean;
    match v.aggregation {
        Aggregation::Conditional => {
            let input = if projected { 0 } else { d };
            ledger.push("head.generator", act, input + (count - 1));
        }
        Aggregation::Fixed => ledger.push("head.fixed_weights", act, count - 1),
        Aggregation::Mean => {}
    }
    if gated {
        ledger.push("head.dropfeat", act, count - 1);
    }
    let stack_tracked = projected || features_tracked;
    let mut sum = 0;
    if stack_tracked {
        sum += count;
    }
    if gated {
        sum += count * d;
    }
    if sum > 0 {
        ledger.push("head.aggregate", act, sum);
    }
    ledger.push("head.classifier", act, (d + 1) + d + 2 * dh + c);
}

/// Stored-activation ledger for `batch_size` samples.
pub fn activation_ledger(scheme: &Scheme, batch_size: usize) -> Result<Ledger> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let per_sample = activations(scheme)?;
    let mut ledger = Ledger::new();
    for item in per_sample.items {
        ledger.push(item.name, item.category, item.count * u(batch_size));
    }
    Ok(ledger)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// One-based LoRA block.
    pub k: usize,
    pub scalars: u64,
    pub bytes: u64,
}

/// Stored activations of LoRA confined to block `k`, for every `k`.
pub fn entanglement_sweep(
    arch: &BackboneConfig,
    rank: usize,
    num_classes: usize,
    batch_size: usize,
) -> Result<Vec<SweepPoint>> {
    (1..=arch.depth)
        .map(|k| {
            let scheme = Scheme::new(
                SchemeKind::Lora {
                    rank,
                    placement: LoraPlacement::Layer(k),
                },
                *arch,
                num_classes,
            );
            let ledger = activation_ledger(&scheme, batch_size)?;
            Ok(SweepPoint {
                k,
                scalars: ledger.stored_activation_scalars,
                bytes: ledger.activation_bytes(),
            })
        })
        .collect()
}

/// `k,scalars,bytes` lines with a header.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("k,scalars,bytes\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.k, p.scalars, p.bytes));
    }
    out
}

// -- FLOPs ------------------------------------------------------------------

/// How a multiply-accumulate is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// A multiply and an add: `2·m·k·n` per matmul.
    MultiplyAdd,
    /// One per multiply-accumulate: `m·k·n` per matmul. Most published
    /// "GFLOPs" figures for vision transformers use this.
    Mac,
}

/// Per-element costs of the non-matmul operations.
pub mod elementwise {
    pub const LAYERNORM: u64 = 5;
    pub const SOFTMAX: u64 = 5;
    pub const GELU: u64 = 8;
    pub const SIGMOID: u64 = 4;
    /// Adds, bias adds, scalings, residuals.
    pub const ADD: u64 = 1;
}

struct Flops {
    convention: FlopConvention,
    ledger: Ledger,
}

impl Flops {
    fn new(convention: FlopConvention) -> Self {
        Flops {
            convention,
            ledger: Ledger::new(),
        }
    }

    fn mm(&self, m: u64, k: u64, n: u64) -> u64 {
        match self.convention {
            FlopConvention::MultiplyAdd => 2 * m * k * n,
            FlopConvention::Mac => m * k * n,
        }
    }

    fn linear(&self, rows: u64, inputs: u64, outputs: u64) -> u64 {
        self.mm(rows, inputs, outputs) + elementwise::ADD * rows * outputs
    }

    fn push(&mut self, name: impl Into<String>, count: u64) {
        self.ledger.push(name, Category::Flops, count);
    }

    /// Multi-head attention of `n` queries over `m` keys, width `d`.
    fn attention(&self, n: u64, m: u64, d: u64, heads: u64) -> u64 {
        let hd = d / heads;
        heads * (self.mm(n, hd, m) + self.mm(n, m, hd))
            + heads * n * m * (elementwise::ADD + elementwise::SOFTMAX)
    }

    fn bottleneck(&self, rows: u64, d: u64, hidden: u64, activation: bool) -> u64 {
        let act = if activation {
            elementwise::GELU * rows * hidden
        } else {
            0
        };
        self.linear(rows, d, hidden) + act + self.linear(rows, hidden, d)
    }
}

/// Matmul cost under a convention; `(2×3)·(3×4)` is 48 multiply-add FLOPs.
pub fn matmul_flops(m: usize, k: usize, n: usize, convention: FlopConvention) -> u64 {
    Flops::new(convention).mm(u(m), u(k), u(n))
}

fn backbone_flops(fl: &mut Flops, a: &BackboneConfig) {
    let (m, d, h, f) = (u(a.tokens()), u(a.width), u(a.heads), u(a.mlp_hidden()));
    let p = u(a.num_patches());
    let embed = fl.linear(p, u(a.patch_dim()), d) + elementwise::ADD * m * d;
    fl.push("patch_embed", embed);
    for i in 1..=a.depth {
        let block = 2 * elementwise::LAYERNORM * m * d
            + 3 * fl.linear(m, d, d)
            + fl.attention(m, m, d, h)
            + fl.linear(m, d, d)
            + fl.linear(m, d, f)
            + elementwise::GELU * m * f
            + fl.linear(m, f, d)
            + 2 * elementwise::ADD * m * d;
        fl.push(format!("block{i}"), block);
    }
}

/// Per-image inference FLOPs. The frozen forward always runs; SynQT adds
/// query synthesis, query-side extraction (keys and values come from the
/// frozen forward) and its head. Other schemes add the token classifier.
pub fn flop_count(scheme: &Scheme, convention: FlopConvention) -> Result<Ledger> {
    scheme.validate()?;
    let a = &scheme.arch;
    let mut fl = Flops::new(convention);
    backbone_flops(&mut fl, a);
    let (m, d, h, f, c) = (
        u(a.tokens()),
        u(a.width),
        u(a.heads),
        u(a.mlp_hidden()),
        u(scheme.num_classes),
    );
    let l = a.depth;
    match scheme.kind {
        SchemeKind::Synqt { config, variant } => {
            let (n, dh, q) = (u(config.n), u(config.hidden), u(config.qkv_hidden));
            let ln = elementwise::LAYERNORM * n * d;
            let add = elementwise::ADD * n * d;
            for i in 1..=l {
                if variant.queries == QueryMode::Synthesized {
                    let prompt = if variant.prompt { add } else { 0 };
                    let qsm = prompt
                        + fl.bottleneck(n, d, dh, false)
                        + ln
                        + 3 * fl.bottleneck(n, d, q, true)
                        + fl.attention(n, n, d, 1)
                        + 2 * add
                        + ln
                        + fl.bottleneck(n, d, dh, true)
                        + 2 * add;
                    fl.push(format!("qsm{i}"), qsm);
                }
                let kem = ln
                    + fl.linear(n, d, d)
                    + fl.attention(n, m, d, h)
                    + fl.linear(n, d, d)
                    + add
                    + ln
                    + fl.linear(n, d, f)
                    + elementwise::GELU * n * f
                    + fl.linear(n, f, d)
                    + add;
                fl.push(format!("kem{i}"), kem);
            }
            let layout = FeatureLayout::new(l, &variant.head_options());
            let count = u(layout.len());
            let gates = count - 1;
            fl.push("head.pool", elementwise::ADD * count * n * d);
            let proj = match variant.projection {
                Projection::None => 0,
                _ => count * fl.bottleneck(1, d, dh, false),
            };
            if proj > 0 {
                fl.push("head.projection", proj);
            }
            match variant.aggregation {
                Aggregation::Conditional => fl.push(
                    "head.generator",
                    fl.linear(1, d, gates) + elementwise::SIGMOID * gates,
                ),
                Aggregation::Fixed => fl.push("head.fixed_weights", elementwise::SIGMOID * gates),
                Aggregation::Mean => {}
            }
            fl.push("head.aggregate", fl.mm(1, count, d));
            let classifier = elementwise::LAYERNORM * d
                + fl.linear(1, d, dh)
                + elementwise::GELU * dh
                + fl.linear(1, dh, c);
            fl.push("head.classifier", classifier);
        }
        _ => {
            fl.push("head", elementwise::LAYERNORM * d + fl.linear(1, d, c));
        }
    }
    Ok(fl.ledger)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_flops_conventions() {
        assert_eq!(matmul_flops(2, 3, 4, FlopConvention::MultiplyAdd), 48);
        assert_eq!(matmul_flops(2, 3, 4, FlopConvention::Mac), 24);
    }

    #[test]
    fn ledgers_are_additive() {
        let arch = BackboneConfig::vit_b16();
        let kinds = [
            SchemeKind::FullFinetune,
            SchemeKind::LinearProbe,
            SchemeKind::Bitfit,
            SchemeKind::VptDeep { tokens: 10 },
            SchemeKind::Lora {
                rank: 8,
                placement: LoraPlacement::All,
            },
            SchemeKind::Adapter { hidden: 8 },
            SchemeKind::Synqt {
                config: SynqtConfig::default(),
                variant: Variant::default(),
            },
        ];
        for kind in kinds {
            let s = Scheme::new(kind, arch, 100);
            assert!(count_params(&s).unwrap().is_consistent());
            assert!(activation_ledger(&s, 3).unwrap().is_consistent());
            assert!(flop_count(&s, FlopConvention::Mac).unwrap().is_consistent());
        }
    }

    #[test]
    fn invalid_schemes_are_rejected() {
        let arch = BackboneConfig::toy();
        let bad = [
            SchemeKind::VptDeep { tokens: 0 },
            SchemeKind::Lora {
                rank: 0,
                placement: LoraPlacement::All,
            },
            SchemeKind::Lora {
                rank: 2,
                placement: LoraPlacement::Layer(5),
            },
            SchemeKind::Lora {
                rank: 2,
                placement: LoraPlacement::Layer(0),
            },
        ];
        for kind in bad {
            assert!(count_params(&Scheme::new(kind, arch, 8)).is_err());
        }
    }

    #[test]
    fn linear_probe_has_no_backbone_side_cost() {
        let s = Scheme::new(SchemeKind::LinearProbe, BackboneConfig::vit_b16(), 100);
        assert_eq!(count_params(&s).unwrap().trainable_params, 0);
        let act = activation_ledger(&s, 1).unwrap();
        assert!(act.items.iter().all(|i| i.name == "head"));
    }
}

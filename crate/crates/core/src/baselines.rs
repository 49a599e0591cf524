//! Instantiable comparison schemes: linear probing, full fine-tuning and
//! LoRA on a single block. They exist to train the linear baseline and to
//! measure activation storage on a real tape.

use crate::backbone::{block_forward, embed, FrozenBackbone, LN_EPS};
use crate::error::{Error, Result};
use crate::params::{init_weight, visit_prefixed, zeros, Linear, Params};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Low-rank updates `h·A·B·(alpha/rank)` on a block's query and value
/// projections. `B` starts at zero.
#[derive(Debug, Clone)]
pub struct Lora {
    pub a_q: Tensor,
    pub b_q: Tensor,
    pub a_v: Tensor,
    pub b_v: Tensor,
    pub alpha: f64,
}

impl Lora {
    pub fn init(width: usize, rank: usize, rng: &mut Rng) -> Self {
        Lora {
            a_q: init_weight(&[width, rank], 0.02, rng),
            b_q: zeros(&[rank, width]),
            a_v: init_weight(&[width, rank], 0.02, rng),
            b_v: zeros(&[rank, width]),
            alpha: rank as f64,
        }
    }

    pub fn rank(&self) -> usize {
        self.a_q.shape()[1]
    }

    fn delta(&self, tape: &Tape, h: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let ha = tape.matmul(h, a)?;
        let hab = tape.matmul(&ha, b)?;
        tape.scale(&hab, self.alpha / self.rank() as f64)
    }

    pub fn delta_q(&self, tape: &Tape, h: &Tensor) -> Result<Tensor> {
        self.delta(tape, h, &self.a_q, &self.b_q)
    }

    pub fn delta_v(&self, tape: &Tape, h: &Tensor) -> Result<Tensor> {
        self.delta(tape, h, &self.a_v, &self.b_v)
    }
}

impl Params for Lora {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("a_q".into(), &self.a_q);
        f("b_q".into(), &self.b_q);
        f("a_v".into(), &self.a_v);
        f("b_v".into(), &self.b_v);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.a_q);
        f(&mut self.b_q);
        f(&mut self.a_v);
        f(&mut self.b_v);
    }
}

/// Linear classifier on the first register token after the backbone's
/// final LayerNorm.
#[derive(Debug, Clone)]
pub struct TokenClassifier {
    pub linear: Linear,
}

impl TokenClassifier {
    pub fn init(width: usize, num_classes: usize, rng: &mut Rng) -> Self {
        TokenClassifier {
            linear: Linear::init(width, num_classes, 0.02, rng),
        }
    }

    pub fn logits(
        &self,
        tape: &Tape,
        norm_gamma: &Tensor,
        norm_beta: &Tensor,
        tokens: &Tensor,
    ) -> Result<Tensor> {
        let cls = tape.slice_rows(tokens, 0, 1)?;
        let h = tape.layernorm(&cls, norm_gamma, norm_beta, LN_EPS)?;
        self.linear.forward(tape, &h)
    }
}

impl Params for TokenClassifier {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        visit_prefixed("linear", &self.linear, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.linear.visit_mut(f);
    }
}

/// Loss of a linear probe given the backbone's final tokens.
pub fn linear_probe_loss(
    tape: &Tape,
    backbone: &FrozenBackbone,
    classifier: &TokenClassifier,
    final_tokens: &Tensor,
    label: usize,
) -> Result<Tensor> {
    let w = backbone.weights();
    let logits = classifier.logits(tape, &w.norm_gamma, &w.norm_beta, final_tokens)?;
    tape.cross_entropy(&logits, label)
}

/// Loss with every backbone weight trainable.
pub fn full_finetune_loss(
    tape: &Tape,
    backbone: &FrozenBackbone,
    classifier: &TokenClassifier,
    image: &Tensor,
    label: usize,
) -> Result<Tensor> {
    let cfg = backbone.config();
    let w = backbone.weights().watch(tape);
    let mut x = embed(tape, cfg, &w, image)?;
    for block in &w.blocks {
        x = block_forward(tape, block, &x, cfg.heads, None)?.output;
    }
    let logits = classifier.logits(tape, &w.norm_gamma, &w.norm_beta, &x)?;
    tape.cross_entropy(&logits, label)
}

/// Loss with LoRA on block `layer` (zero-based) only; every other backbone
/// weight stays frozen.
pub fn lora_at_layer_loss(
    tape: &Tape,
    backbone: &FrozenBackbone,
    layer: usize,
    lora: &Lora,
    classifier: &TokenClassifier,
    image: &Tensor,
    label: usize,
) -> Result<Tensor> {
    let cfg = backbone.config();
    if layer >= cfg.depth {
        return Err(Error::Index {
            what: "LoRA layer",
            index: layer,
            len: cfg.depth,
        });
    }
    let w = backbone.weights();
    let mut x = embed(tape, cfg, w, image)?;
    for (i, block) in w.blocks.iter().enumerate() {
        let adapter = (i == layer).then_some(lora);
        x = block_forward(tape, block, &x, cfg.heads, adapter)?.output;
    }
    let logits = classifier.logits(tape, &w.norm_gamma, &w.norm_beta, &x)?;
    tape.cross_entropy(&logits, label)
}

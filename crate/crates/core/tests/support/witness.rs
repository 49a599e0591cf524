//! A randomized SynQT model on the toy backbone, and a way to move one
//! block's input features without touching anything else.

use synqt::backbone::{BackboneConfig, FeatureStack, FrozenBackbone, LN_EPS};
use synqt::blocks::{stack_forward_features, FeatureBundle, SynqtConfig};
use synqt::model::{SynqtModel, Variant};
use synqt::params::randomize;
use synqt::{Rng, Tape, Tensor};

pub struct Setup {
    pub backbone: FrozenBackbone,
    pub image: Tensor,
    pub model: SynqtModel,
}

pub fn setup(variant: Variant) -> Setup {
    let cfg = BackboneConfig::toy();
    let mut rng = Rng::new(7);
    let backbone = FrozenBackbone::build(cfg, &mut rng).unwrap();
    let image = Tensor::randn(&cfg.image_shape(), 1.0, &mut rng);
    let mut model = SynqtModel::init(&cfg, SynqtConfig::toy(), variant, 8, &mut rng).unwrap();
    randomize(&mut model, 0.2, &mut rng);
    Setup {
        backbone,
        image,
        model,
    }
}

pub fn stacks_bit_equal(a: &FeatureStack, b: &FeatureStack) -> bool {
    let pairs = a
        .inputs
        .iter()
        .zip(&b.inputs)
        .chain(a.keys.iter().zip(&b.keys))
        .chain(a.values.iter().zip(&b.values))
        .chain(std::iter::once((&a.output, &b.output)));
    a.depth() == b.depth() && pairs.into_iter().all(|(x, y)| x.bit_eq(y))
}

/// Copy of `stack` with `X_j` shifted and block `j`'s keys and values
/// recomputed from it.
pub fn perturb(backbone: &FrozenBackbone, stack: &FeatureStack, j: usize) -> FeatureStack {
    let tape = Tape::new();
    let w = &backbone.weights().blocks[j];
    let x = stack.inputs[j].map(|v| v + 0.5 * v.sin());
    let xn = tape
        .layernorm(&x, &w.ln1_gamma, &w.ln1_beta, LN_EPS)
        .unwrap();
    let mut out = stack.clone();
    out.keys[j] = tape.linear(&xn, &w.wk, &w.bk).unwrap();
    out.values[j] = tape.linear(&xn, &w.wv, &w.bv).unwrap();
    out.inputs[j] = x;
    out
}

pub fn bundle(s: &Setup, stack: &FeatureStack) -> FeatureBundle {
    stack_forward_features(
        &Tape::new(),
        &s.backbone,
        &s.model.queries,
        stack,
        &s.model.config,
    )
    .unwrap()
}

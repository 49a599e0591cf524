//! A complete tunable model: per-block query synthesis plus the head, over a
//! frozen backbone.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FeatureStack, FrozenBackbone, INIT_STD};
use crate::blocks::{stack_forward_features, FeatureBundle, QsmParams, QuerySource, SynqtConfig};
use crate::error::{Error, Result};
use crate::head::{
    dropfeat, head_forward, Aggregation, DropMask, HeadOptions, HeadParams, Projection,
};
use crate::params::{randomize, visit_prefixed, Params};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Synthesized,
    /// Fixed random queries; nothing before the head is trained.
    RandomFrozen,
}

/// Structural switches covering the ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Variant {
    pub queries: QueryMode,
    /// Learnable prompt added before each query synthesis.
    pub prompt: bool,
    /// Feed block `i-1`'s output into block `i`'s synthesis.
    pub last_output: bool,
    pub aggregation: Aggregation,
    pub projection: Projection,
    pub use_h: bool,
    pub use_att: bool,
    pub use_ffn: bool,
    pub dropfeat: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Variant {
            queries: QueryMode::Synthesized,
            prompt: true,
            last_output: true,
            aggregation: Aggregation::Conditional,
            projection: Projection::Shared,
            use_h: true,
            use_att: true,
            use_ffn: true,
            dropfeat: true,
        }
    }
}

impl Variant {
    /// Names accepted by [`Variant::arm`].
    pub const ARMS: [&'static str; 12] = [
        "synqt",
        "kem",
        "no_prompt",
        "no_last_output",
        "no_h",
        "no_att",
        "no_ffn",
        "fixed_weights",
        "simple_avg",
        "no_projection",
        "independent_projection",
        "no_dropfeat",
    ];

    /// A named arm. `kem` is random frozen queries read through the frozen
    /// blocks, averaged without projection, then the MLP classifier.
    pub fn arm(name: &str) -> Option<Variant> {
        let base = Variant::default();
        Some(match name {
            "synqt" => base,
            "kem" => Variant {
                queries: QueryMode::RandomFrozen,
                aggregation: Aggregation::Mean,
                projection: Projection::None,
                dropfeat: false,
                ..base
            },
            "no_prompt" => Variant {
                prompt: false,
                ..base
            },
            "no_last_output" => Variant {
                last_output: false,
                ..base
            },
            "no_h" => Variant {
                use_h: false,
                ..base
            },
            "no_att" => Variant {
                use_att: false,
                ..base
            },
            "no_ffn" => Variant {
                use_ffn: false,
                ..base
            },
            "fixed_weights" => Variant {
                aggregation: Aggregation::Fixed,
                ..base
            },
            "simple_avg" => Variant {
                aggregation: Aggregation::Mean,
                ..base
            },
            "no_projection" => Variant {
                projection: Projection::None,
                ..base
            },
            "independent_projection" => Variant {
                projection: Projection::Independent,
                ..base
            },
            "no_dropfeat" => Variant {
                dropfeat: false,
                ..base
            },
            _ => return None,
        })
    }

    pub fn head_options(&self) -> HeadOptions {
        HeadOptions {
            aggregation: self.aggregation,
            projection: self.projection,
            use_h: self.use_h,
            use_att: self.use_att,
            use_ffn: self.use_ffn,
            dropfeat: self.dropfeat,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynqtModel {
    pub config: SynqtConfig,
    pub variant: Variant,
    pub queries: QuerySource,
    pub head: HeadParams,
}

impl SynqtModel {
    pub fn init(
        backbone: &BackboneConfig,
        config: SynqtConfig,
        variant: Variant,
        num_classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate(backbone.width)?;
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let d = backbone.width;
        let queries = match variant.queries {
            QueryMode::Synthesized => QuerySource::Synthesized {
                qsm: (0..backbone.depth)
                    .map(|_| QsmParams::init(&config, d, variant.prompt, INIT_STD, rng))
                    .collect(),
                chain: variant.last_output,
            },
            QueryMode::RandomFrozen => QuerySource::RandomFrozen(
                (0..backbone.depth)
                    .map(|_| Tensor::trunc_normal(&[config.n, d], INIT_STD, rng))
                    .collect(),
            ),
        };
        let head = HeadParams::init(
            d,
            config.hidden,
            backbone.depth,
            num_classes,
            variant.head_options(),
            INIT_STD,
            rng,
        );
        Ok(SynqtModel {
            config,
            variant,
            queries,
            head,
        })
    }

    /// Like [`SynqtModel::init`] but every trainable tensor, biases and
    /// LayerNorm affines included, drawn with `std`.
    pub fn init_dense(
        backbone: &BackboneConfig,
        config: SynqtConfig,
        variant: Variant,
        num_classes: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut model = Self::init(backbone, config, variant, num_classes, rng)?;
        randomize(&mut model, std, rng);
        Ok(model)
    }

    /// DropFeat mask for one sample; `rng` is `None` in eval mode.
    pub fn mask(&self, depth: usize, rng: Option<&mut Rng>) -> Result<DropMask> {
        match rng {
            Some(rng) if self.variant.dropfeat => {
                dropfeat(rng, self.config.dropfeat_p, depth, true)
            }
            _ => Ok(DropMask::keep_all(depth)),
        }
    }

    pub fn bundle(
        &self,
        tape: &Tape,
        backbone: &FrozenBackbone,
        features: &FeatureStack,
    ) -> Result<FeatureBundle> {
        stack_forward_features(tape, backbone, &self.queries, features, &self.config)
    }

    pub fn logits(
        &self,
        tape: &Tape,
        backbone: &FrozenBackbone,
        features: &FeatureStack,
        mask: &DropMask,
    ) -> Result<Tensor> {
        let bundle = self.bundle(tape, backbone, features)?;
        head_forward(tape, &self.head, &bundle, mask)
    }

    pub fn loss(
        &self,
        tape: &Tape,
        backbone: &FrozenBackbone,
        features: &FeatureStack,
        label: usize,
        mask: &DropMask,
    ) -> Result<Tensor> {
        let logits = self.logits(tape, backbone, features, mask)?;
        tape.cross_entropy(&logits, label)
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }
}

impl Params for SynqtModel {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let QuerySource::Synthesized { qsm, .. } = &self.queries {
            visit_prefixed("qsm", qsm, f);
        }
        visit_prefixed("head", &self.head, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        if let QuerySource::Synthesized { qsm, .. } = &mut self.queries {
            qsm.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

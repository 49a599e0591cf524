//! Stored-activation counts measured on the tape, next to the closed-form
//! ledger.

use synqt::accounting::{activation_ledger, LoraPlacement, Scheme, SchemeKind};
use synqt::backbone::{BackboneConfig, FrozenBackbone};
use synqt::baselines::{
    full_finetune_loss, linear_probe_loss, lora_at_layer_loss, Lora, TokenClassifier,
};
use synqt::blocks::SynqtConfig;
use synqt::head::dropfeat;
use synqt::model::{SynqtModel, Variant};
use synqt::params::Params;
use synqt::{Rng, Tape, Tensor};

pub const CLASSES: usize = 8;

pub struct Fixture {
    pub arch: BackboneConfig,
    pub backbone: FrozenBackbone,
    pub image: Tensor,
}

pub fn fixture(arch: BackboneConfig) -> Fixture {
    let mut rng = Rng::new(11);
    let backbone = FrozenBackbone::build(arch, &mut rng).unwrap();
    let image = Tensor::randn(&arch.image_shape(), 1.0, &mut rng);
    Fixture {
        arch,
        backbone,
        image,
    }
}

pub fn analytic(kind: SchemeKind, arch: BackboneConfig) -> u64 {
    let ledger = activation_ledger(&Scheme::new(kind, arch, CLASSES), 1).unwrap();
    assert!(ledger.is_consistent());
    ledger.stored_activation_scalars
}

pub fn synqt_tape_count(
    f: &Fixture,
    variant: Variant,
    cfg: SynqtConfig,
    train_mask: bool,
) -> usize {
    let mut rng = Rng::new(5);
    let model = SynqtModel::init(&f.arch, cfg, variant, CLASSES, &mut rng).unwrap();
    let features = f.backbone.forward_collect(&Tape::new(), &f.image).unwrap();
    let depth = f.arch.depth;
    let mask = if train_mask {
        dropfeat(&mut rng, 0.5, depth, true).unwrap()
    } else {
        model.mask(depth, None).unwrap()
    };
    let tape = Tape::new();
    let watched = model.watched(&tape);
    let loss = watched
        .loss(&tape, &f.backbone, &features, 2, &mask)
        .unwrap();
    tape.backward(&loss).unwrap();
    tape.saved_scalar_count()
}

/// The toy backbone and two smaller variations of it.
pub fn small_arches() -> Vec<BackboneConfig> {
    let toy = BackboneConfig::toy();
    vec![
        toy,
        BackboneConfig {
            depth: 2,
            heads: 2,
            num_register_tokens: 2,
            ..toy
        },
        BackboneConfig {
            image_size: 12,
            patch_size: 3,
            depth: 3,
            width: 24,
            heads: 3,
            mlp_ratio: 2,
            ..toy
        },
    ]
}

/// One comparison of tape and ledger.
pub struct Census {
    pub what: String,
    pub measured: u64,
    pub expected: u64,
}

/// Every SynQT arm under eval and train masks.
pub fn synqt_census(arch: BackboneConfig) -> Vec<Census> {
    let f = fixture(arch);
    let cfg = SynqtConfig {
        hidden: 8,
        qkv_hidden: 3,
        n: 3,
        ..SynqtConfig::toy()
    };
    let mut out = Vec::new();
    for name in Variant::ARMS {
        let variant = Variant::arm(name).unwrap();
        let expected = analytic(
            SchemeKind::Synqt {
                config: cfg,
                variant,
            },
            arch,
        );
        for train_mask in [false, true] {
            out.push(Census {
                what: format!("{name} (train mask {train_mask}) on depth {}", arch.depth),
                measured: synqt_tape_count(&f, variant, cfg, train_mask) as u64,
                expected,
            });
        }
    }
    out
}

/// Full fine-tuning, linear probing and LoRA in each single block at
/// ranks 1 and 4.
pub fn baseline_census(arch: BackboneConfig) -> Vec<Census> {
    let f = fixture(arch);
    let mut rng = Rng::new(9);
    let classifier = TokenClassifier::init(arch.width, CLASSES, &mut rng);
    let mut out = Vec::new();

    let tape = Tape::new();
    let c = classifier.watched(&tape);
    let loss = full_finetune_loss(&tape, &f.backbone, &c, &f.image, 1).unwrap();
    tape.backward(&loss).unwrap();
    out.push(Census {
        what: format!("full fine-tuning on depth {}", arch.depth),
        measured: tape.saved_scalar_count() as u64,
        expected: analytic(SchemeKind::FullFinetune, arch),
    });

    let features = f.backbone.forward_collect(&Tape::new(), &f.image).unwrap();
    let tape = Tape::new();
    let c = classifier.watched(&tape);
    let loss = linear_probe_loss(&tape, &f.backbone, &c, &features.output, 1).unwrap();
    tape.backward(&loss).unwrap();
    out.push(Census {
        what: format!("linear probe on depth {}", arch.depth),
        measured: tape.saved_scalar_count() as u64,
        expected: analytic(SchemeKind::LinearProbe, arch),
    });

    for rank in [1, 4] {
        let lora = Lora::init(arch.width, rank, &mut rng);
        for k in 1..=arch.depth {
            let tape = Tape::new();
            let (l, c) = (lora.watched(&tape), classifier.watched(&tape));
            let loss = lora_at_layer_loss(&tape, &f.backbone, k - 1, &l, &c, &f.image, 1).unwrap();
            tape.backward(&loss).unwrap();
            let kind = SchemeKind::Lora {
                rank,
                placement: LoraPlacement::Layer(k),
            };
            out.push(Census {
                what: format!("LoRA rank {rank} in block {k} on depth {}", arch.depth),
                measured: tape.saved_scalar_count() as u64,
                expected: analytic(kind, arch),
            });
        }
    }
    out
}

//! A randomized SynQT head over real toy-backbone features.

use synqt::backbone::{BackboneConfig, FrozenBackbone};
use synqt::blocks::{FeatureBundle, SynqtConfig};
use synqt::head::{aggregate, dropfeat, DropMask};
use synqt::model::{SynqtModel, Variant};
use synqt::params::randomize;
use synqt::{Rng, Tape, Tensor};

pub const DEPTH: usize = 4;

pub fn model_and_bundle(variant: Variant, p: f64) -> (SynqtModel, FeatureBundle) {
    let arch = BackboneConfig::toy();
    let mut rng = Rng::new(21);
    let backbone = FrozenBackbone::build(arch, &mut rng).unwrap();
    let image = Tensor::randn(&arch.image_shape(), 1.0, &mut rng);
    let cfg = SynqtConfig {
        dropfeat_p: p,
        ..SynqtConfig::toy()
    };
    let mut model = SynqtModel::init(&arch, cfg, variant, 8, &mut rng).unwrap();
    randomize(&mut model, 0.3, &mut rng);
    let features = backbone.forward_collect(&Tape::new(), &image).unwrap();
    let bundle = model.bundle(&Tape::new(), &backbone, &features).unwrap();
    (model, bundle)
}

/// Distance, in standard errors, between the Monte-Carlo mean of two
/// scalar statistics of the masked aggregate and their no-drop values.
/// The statistics project the aggregate onto the no-drop aggregate and onto
/// a fixed random direction.
pub fn masked_aggregate_z(model: &SynqtModel, bundle: &FeatureBundle, samples: usize) -> [f64; 2] {
    let tape = Tape::new();
    let base = aggregate(&tape, &model.head, bundle, &DropMask::keep_all(DEPTH)).unwrap();
    let direction = Tensor::randn(&[base.numel()], 1.0, &mut Rng::new(8));
    let stats = |a: &Tensor| -> [f64; 2] {
        let dot = |u: &[f64]| a.data().iter().zip(u).map(|(x, y)| x * y).sum::<f64>();
        [dot(base.data()), dot(direction.data())]
    };
    let target = stats(&base);

    let mut rng = Rng::new(99);
    let mut sum = [0.0; 2];
    let mut sq = [0.0; 2];
    for _ in 0..samples {
        let mask = dropfeat(&mut rng, model.config.dropfeat_p, DEPTH, true).unwrap();
        let s = stats(&aggregate(&tape, &model.head, bundle, &mask).unwrap());
        for i in 0..2 {
            sum[i] += s[i];
            sq[i] += s[i] * s[i];
        }
    }
    let n = samples as f64;
    let mut z = [0.0; 2];
    for i in 0..2 {
        let mean = sum[i] / n;
        let var = (sq[i] / n - mean * mean) * n / (n - 1.0);
        let stderr = (var / n).sqrt();
        assert!(stderr > 0.0);
        z[i] = (mean - target[i]).abs() / stderr;
    }
    z
}

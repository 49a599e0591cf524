//! Training loop, evaluation, and multi-arm comparisons on the synthetic
//! dataset.
//!
//! Every sample gets its own tape; a batch's gradients are summed in sample
//! order, so results do not depend on how samples are spread over threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accounting::{
    activation_ledger, count_params, flop_count, FlopConvention, Ledger, Scheme, SchemeKind,
};
use crate::backbone::{FeatureStack, FrozenBackbone};
use crate::baselines::{linear_probe_loss, TokenClassifier};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::head::{dump_feature_weights, FeatureWeightDump};
use crate::model::{SynqtModel, Variant};
use crate::optim::{adamw_step, cosine_lr, AdamState};
use crate::params::{assign, Params};
use crate::rng::Rng;
use crate::tensor::{grad_check_floored, Tape, Tensor};

pub const REPORT_SCHEMA: &str = "synqt-run-v1";
pub const COMPARE_SCHEMA: &str = "synqt-compare-v1";

/// A trainable configuration: the linear baseline or a SynQT variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Arm {
    LinearProbe,
    Synqt(Variant),
}

impl Arm {
    pub fn parse(name: &str) -> Result<Arm> {
        if name == "linear" {
            return Ok(Arm::LinearProbe);
        }
        Variant::arm(name)
            .map(Arm::Synqt)
            .ok_or_else(|| Error::Config(format!("unknown arm {name:?}")))
    }
}

/// Trained parameters of one arm.
#[derive(Debug, Clone)]
pub enum Trained {
    LinearProbe(TokenClassifier),
    Synqt(SynqtModel),
}

impl Trained {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let named = match self {
            Trained::LinearProbe(c) => c.named(),
            Trained::Synqt(m) => m.named(),
        };
        for (name, t) in named {
            ck.push(name, t);
        }
        ck
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub lr: f64,
    pub s_attn: f64,
    pub s_ffn: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Mean training loss per step.
    pub loss_curve: Vec<f64>,
    pub trainable_params: u64,
    pub params_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_relative_error: f64,
    /// Elements whose analytic and numeric gradients were both below the
    /// floor, and the largest absolute gap among them.
    pub floored: usize,
    pub max_floored_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub eps: f64,
    pub floor: f64,
    pub max_relative_error: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckSummary {
    /// Relative error under `tolerance` everywhere above the floor, and
    /// absolute error under `tolerance * floor` below it.
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
            && self
                .tensors
                .iter()
                .all(|t| t.max_floored_abs_error < tolerance * self.floor)
    }
}

/// Relative tolerance the floor of [`grad_check_model`] is sized for.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

/// Smallest gradient that central differences of a loss of magnitude
/// `loss` resolve to `GRAD_CHECK_TOLERANCE` relative. Each evaluation
/// carries a few ulps of round-off, so the numeric gradient is off by up to
/// about `4 * EPSILON * |loss| / eps`.
pub fn grad_check_floor(loss: f64, eps: f64) -> f64 {
    4.0 * f64::EPSILON * loss.abs().max(1.0) / (eps * GRAD_CHECK_TOLERANCE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ledgers {
    pub params: Ledger,
    pub activations: Ledger,
    pub flops: Ledger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hashes {
    pub config_sha256: String,
    pub backbone_sha256: String,
    pub dataset_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub config: TrainConfig,
    pub arms: Vec<ArmResult>,
    /// SynQT scheme on the configured architecture, per batch.
    pub ledgers: Ledgers,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_check: Option<GradCheckSummary>,
    pub hashes: Hashes,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn checkpoint_sha(ck: &Checkpoint) -> String {
    let (manifest, blob) = ck.to_bytes();
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&manifest).expect("manifest serializes"));
    h.update(&blob);
    hex::encode(h.finalize())
}

/// Frozen backbone, dataset and precomputed backbone features for one seed.
pub struct Experiment {
    pub config: TrainConfig,
    pub seed: u64,
    pub backbone: FrozenBackbone,
    pub dataset: SyntheticDataset,
    pub train_features: Vec<FeatureStack>,
    pub test_features: Vec<FeatureStack>,
}

impl Experiment {
    /// The backbone and dataset depend only on `seed`; arms draw their own
    /// streams from it.
    pub fn new(config: &TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(seed);
        let backbone = match &config.train.backbone_checkpoint {
            Some(stem) => {
                FrozenBackbone::from_checkpoint(config.backbone, &Checkpoint::load(stem.as_ref())?)?
            }
            None => FrozenBackbone::build(config.backbone, &mut root.fork("backbone"))?,
        };
        let dataset = SyntheticDataset::generate(
            &config.data,
            config.backbone.image_shape(),
            &mut root.fork("data"),
        )?;
        let collect = |samples: &[crate::data::Sample]| -> Result<Vec<FeatureStack>> {
            samples
                .par_iter()
                .map(|s| backbone.forward_collect(&Tape::new(), &s.image))
                .collect()
        };
        let train_features = collect(&dataset.train)?;
        let test_features = collect(&dataset.test)?;
        Ok(Experiment {
            config: config.clone(),
            seed,
            backbone,
            dataset,
            train_features,
            test_features,
        })
    }

    pub fn dataset_sha256(&self) -> String {
        let mut h = Sha256::new();
        for s in self.dataset.train.iter().chain(&self.dataset.test) {
            for v in s.image.data() {
                h.update(v.to_le_bytes());
            }
            h.update((s.label as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Trains one arm at learning rate `lr`, with `s_attn = s_ffn = scale`
    /// when given.
    pub fn run_arm(&self, name: &str, lr: f64, scale: Option<f64>) -> Result<(ArmResult, Trained)> {
        let arm = Arm::parse(name)?;
        let mut synqt = self.config.synqt;
        if let Some(s) = scale {
            synqt.s_attn = s;
            synqt.s_ffn = s;
        }
        synqt.validate(self.config.backbone.width)?;
        let rng = Rng::new(self.seed).fork(&format!("arm/{name}"));
        let classes = self.dataset.num_classes;
        let labels: Vec<usize> = self.dataset.train.iter().map(|s| s.label).collect();
        let test_labels: Vec<usize> = self.dataset.test.iter().map(|s| s.label).collect();
        let bb = &self.backbone;

        let (trained, curve, train_acc, test_acc) = match arm {
            Arm::LinearProbe => {
                let init = TokenClassifier::init(
                    self.config.backbone.width,
                    classes,
                    &mut rng.fork("init"),
                );
                let (c, curve) = self.fit(init, lr, &rng, |tape, c, i, _| {
                    linear_probe_loss(tape, bb, c, &self.train_features[i].output, labels[i])
                })?;
                let w = bb.weights();
                let predict = |f: &FeatureStack| {
                    c.logits(&Tape::new(), &w.norm_gamma, &w.norm_beta, &f.output)
                };
                let train_acc = accuracy(&self.train_features, &labels, predict)?;
                let test_acc = accuracy(&self.test_features, &test_labels, predict)?;
                (Trained::LinearProbe(c), curve, train_acc, test_acc)
            }
            Arm::Synqt(variant) => {
                let init = SynqtModel::init(
                    &self.config.backbone,
                    synqt,
                    variant,
                    classes,
                    &mut rng.fork("init"),
                )?;
                let depth = self.config.backbone.depth;
                let (m, curve) = self.fit(init, lr, &rng, |tape, m, i, mask_rng| {
                    let mask = m.mask(depth, Some(mask_rng))?;
                    m.loss(tape, bb, &self.train_features[i], labels[i], &mask)
                })?;
                let eval_mask = m.mask(depth, None)?;
                let predict = |f: &FeatureStack| m.logits(&Tape::new(), bb, f, &eval_mask);
                let train_acc = accuracy(&self.train_features, &labels, predict)?;
                let test_acc = accuracy(&self.test_features, &test_labels, predict)?;
                (Trained::Synqt(m), curve, train_acc, test_acc)
            }
        };
        let ck = trained.to_checkpoint();
        let result = ArmResult {
            arm: name.to_string(),
            seed: self.seed,
            lr,
            s_attn: synqt.s_attn,
            s_ffn: synqt.s_ffn,
            train_accuracy: train_acc,
            test_accuracy: test_acc,
            loss_curve: curve,
            trainable_params: ck.tensors.iter().map(|(_, t)| t.numel() as u64).sum(),
            params_sha256: checkpoint_sha(&ck),
        };
        Ok((result, trained))
    }

    /// Mini-batch AdamW over the training split.
    fn fit<P, F>(&self, init: P, lr: f64, rng: &Rng, loss: F) -> Result<(P, Vec<f64>)>
    where
        P: Params + Sync,
        F: Fn(&Tape, &P, usize, &mut Rng) -> Result<Tensor> + Sync,
    {
        let t = &self.config.train;
        let n = self.train_features.len();
        let per_epoch = n.div_ceil(t.batch_size);
        let total = per_epoch * t.epochs;
        let warmup = (t.warmup_fraction * total as f64).round() as usize;
        let mut params = init;
        let mut state = AdamState::new(&params);
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle = rng.fork("shuffle");
        let mut curve = Vec::with_capacity(total);
        let mut step = 0;
        for _ in 0..t.epochs {
            shuffle.shuffle(&mut order);
            for batch in order.chunks(t.batch_size) {
                let results: Vec<(f64, Vec<Tensor>)> = batch
                    .par_iter()
                    .map(|&i| {
                        let tape = Tape::new();
                        let watched = params.watched(&tape);
                        let mut mask_rng = rng.fork(&format!("dropfeat/{step}/{i}"));
                        let l = loss(&tape, &watched, i, &mut mask_rng)?;
                        let grads = tape.backward(&l)?;
                        Ok((l.item(), watched.collect_grads(&grads)))
                    })
                    .collect::<Result<_>>()?;
                let scale = 1.0 / batch.len() as f64;
                let mean_loss = results.iter().map(|(l, _)| l).sum::<f64>() * scale;
                if !mean_loss.is_finite() {
                    return Err(Error::Divergence {
                        step,
                        loss: mean_loss,
                    });
                }
                let mut sums: Vec<Vec<f64>> =
                    results[0].1.iter().map(|g| vec![0.0; g.numel()]).collect();
                for (_, grads) in &results {
                    for (acc, g) in sums.iter_mut().zip(grads) {
                        for (a, v) in acc.iter_mut().zip(g.data()) {
                            *a += v;
                        }
                    }
                }
                let grads: Vec<Tensor> = sums
                    .into_iter()
                    .zip(&results[0].1)
                    .map(|(s, g)| {
                        Tensor::new(g.shape(), s.into_iter().map(|v| v * scale).collect())
                    })
                    .collect::<Result<_>>()?;
                let lr_t = cosine_lr(step, total, lr, warmup);
                adamw_step(&mut params, &grads, &mut state, lr_t, t.weight_decay)?;
                curve.push(mean_loss);
                step += 1;
            }
        }
        Ok((params, curve))
    }
}

fn accuracy<F>(features: &[FeatureStack], labels: &[usize], predict: F) -> Result<f64>
where
    F: Fn(&FeatureStack) -> Result<Tensor> + Sync,
{
    let hits: Vec<bool> = features
        .par_iter()
        .zip(labels)
        .map(|(f, &y)| Ok(argmax(predict(f)?.data()) == y))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Ledgers of the configured SynQT variant on the configured architecture.
pub fn synqt_ledgers(config: &TrainConfig) -> Result<Ledgers> {
    let scheme = Scheme::new(
        SchemeKind::Synqt {
            config: config.synqt,
            variant: config.variant,
        },
        config.backbone,
        config.data.num_classes,
    );
    Ok(Ledgers {
        params: count_params(&scheme)?,
        activations: activation_ledger(&scheme, config.train.batch_size)?,
        flops: flop_count(&scheme, FlopConvention::MultiplyAdd)?,
    })
}

/// Finite-difference check of the full training loss with respect to every
/// trainable tensor of the configured variant.
///
/// Uses dense random parameters (std `0.3`, LayerNorm gains `1 ± 0.3`) and a
/// fixed train-mode DropFeat mask, over two samples.
pub fn grad_check_model(config: &TrainConfig, eps: f64) -> Result<GradCheckSummary> {
    config.validate()?;
    let root = Rng::new(config.train.seed).fork("gradcheck");
    let backbone = FrozenBackbone::build(config.backbone, &mut root.fork("backbone"))?;
    let classes = config.data.num_classes;
    let model = SynqtModel::init_dense(
        &config.backbone,
        config.synqt,
        config.variant,
        classes,
        0.3,
        &mut root.fork("init"),
    )?;
    let mut rng = root.fork("inputs");
    let samples: Vec<(FeatureStack, usize)> = (0..2)
        .map(|i| {
            let image = Tensor::randn(&config.backbone.image_shape(), 1.0, &mut rng);
            Ok((backbone.forward_collect(&Tape::new(), &image)?, i % classes))
        })
        .collect::<Result<_>>()?;
    let depth = config.backbone.depth;
    let mask = model.mask(depth, Some(&mut rng.fork("mask")))?;
    let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();
    let inputs: Vec<Tensor> = model.named().into_iter().map(|(_, t)| t.clone()).collect();
    let objective = |tape: &Tape, xs: &[Tensor]| -> Result<Tensor> {
        let mut m = model.clone();
        assign(&mut m, xs);
        let mut total: Option<Tensor> = None;
        for (f, y) in &samples {
            let l = m.loss(tape, &backbone, f, *y, &mask)?;
            total = Some(match total {
                Some(t) => tape.add(&t, &l)?,
                None => l,
            });
        }
        Ok(total.expect("two samples"))
    };
    let floor = grad_check_floor(objective(&Tape::new(), &inputs)?.item(), eps);
    let errors = grad_check_floored(objective, &inputs, eps, floor)?;
    let max = errors
        .iter()
        .map(|c| c.max_relative_error)
        .fold(0.0, f64::max);
    Ok(GradCheckSummary {
        eps,
        floor,
        max_relative_error: max,
        tensors: names
            .into_iter()
            .zip(errors)
            .map(|(name, c)| TensorCheck {
                name,
                max_relative_error: c.max_relative_error,
                floored: c.floored,
                max_floored_abs_error: c.max_floored_abs_error,
            })
            .collect(),
    })
}

/// Trains every arm in `config.train.arms` with the configured seed.
pub fn train(config: &TrainConfig) -> Result<RunReport> {
    Ok(train_with_models(config)?.0)
}

/// [`train`], also returning the trained parameters of every arm.
pub fn train_with_models(config: &TrainConfig) -> Result<(RunReport, Vec<Trained>)> {
    let grad_check = if config.train.grad_check {
        Some(grad_check_model(config, 1e-5)?)
    } else {
        None
    };
    let exp = Experiment::new(config, config.train.seed)?;
    let mut arms = Vec::new();
    let mut models = Vec::new();
    for name in &config.train.arms {
        let (result, trained) = exp.run_arm(name, config.train.base_lr, None)?;
        arms.push(result);
        models.push(trained);
    }
    let report = RunReport {
        schema: REPORT_SCHEMA.to_string(),
        config: config.clone(),
        arms,
        ledgers: synqt_ledgers(config)?,
        grad_check,
        hashes: Hashes {
            config_sha256: sha256_hex(config.to_toml().as_bytes()),
            backbone_sha256: checkpoint_sha(&exp.backbone.to_checkpoint()),
            dataset_sha256: exp.dataset_sha256(),
        },
    };
    Ok((report, models))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub lr: f64,
    pub scale: Option<f64>,
    pub mean_train_accuracy: f64,
    pub mean_test_accuracy: f64,
    pub test_accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub schema: String,
    pub config: TrainConfig,
    pub runs: Vec<ArmResult>,
    pub summary: Vec<ArmSummary>,
}

impl CompareReport {
    pub fn get(&self, arm: &str) -> Option<&ArmSummary> {
        self.summary.iter().find(|s| s.arm == arm)
    }

    /// Fixed-width table, one row per arm and grid point.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<24} {:>9} {:>6} {:>9} {:>9}\n",
            "arm", "lr", "scale", "train", "test"
        );
        for s in &self.summary {
            let scale = s.scale.map_or("-".to_string(), |v| format!("{v}"));
            out.push_str(&format!(
                "{:<24} {:>9.1e} {:>6} {:>8.2}% {:>8.2}%\n",
                s.arm,
                s.lr,
                scale,
                100.0 * s.mean_train_accuracy,
                100.0 * s.mean_test_accuracy
            ));
        }
        out
    }
}

/// Every arm in `config.compare.arms` over every seed and grid point.
pub fn compare(config: &TrainConfig) -> Result<CompareReport> {
    config.validate()?;
    let c = &config.compare;
    let lrs = if c.lrs.is_empty() {
        vec![config.train.base_lr]
    } else {
        c.lrs.clone()
    };
    let scales: Vec<Option<f64>> = if c.scales.is_empty() {
        vec![None]
    } else {
        c.scales.iter().map(|&s| Some(s)).collect()
    };
    let mut runs = Vec::new();
    for &seed in &c.seeds {
        let exp = Experiment::new(config, seed)?;
        for arm in &c.arms {
            for &lr in &lrs {
                for &scale in &scales {
                    runs.push((scale, exp.run_arm(arm, lr, scale)?.0));
                }
            }
        }
    }
    let mut summary = Vec::new();
    for arm in &c.arms {
        for &lr in &lrs {
            for &scale in &scales {
                let rows: Vec<&ArmResult> = runs
                    .iter()
                    .filter(|(s, r)| &r.arm == arm && r.lr == lr && *s == scale)
                    .map(|(_, r)| r)
                    .collect();
                let k = rows.len() as f64;
                summary.push(ArmSummary {
                    arm: arm.clone(),
                    lr,
                    scale,
                    mean_train_accuracy: rows.iter().map(|r| r.train_accuracy).sum::<f64>() / k,
                    mean_test_accuracy: rows.iter().map(|r| r.test_accuracy).sum::<f64>() / k,
                    test_accuracies: rows.iter().map(|r| r.test_accuracy).collect(),
                });
            }
        }
    }
    Ok(CompareReport {
        schema: COMPARE_SCHEMA.to_string(),
        config: config.clone(),
        runs: runs.into_iter().map(|(_, r)| r).collect(),
        summary,
    })
}

/// Eval-mode feature weights of a trained SynQT model for the first
/// `count` test samples.
pub fn feature_weights(
    exp: &Experiment,
    model: &SynqtModel,
    count: usize,
) -> Result<Vec<FeatureWeightDump>> {
    exp.test_features
        .iter()
        .take(count)
        .enumerate()
        .map(|(i, f)| {
            let bundle = model.bundle(&Tape::new(), &exp.backbone, f)?;
            Ok(FeatureWeightDump {
                sample_id: i,
                weights: dump_feature_weights(&model.head, &bundle)?,
            })
        })
        .collect()
}

//! The conditional classification head.
//!
//! Every extracted feature is mean-pooled over its query tokens and aligned
//! by one shared bottleneck projection. A generator reads the pooled output
//! of the last block, `H_l`, and emits a sigmoid weight for every other
//! feature; `H_l` itself always enters with weight 1. The weighted sum goes
//! through an MLP classifier. During training, DropFeat zeroes random
//! non-conditioning features and rescales the survivors by `1/(1-p)`.

use serde::{Deserialize, Serialize};

use crate::blocks::{FeatureBundle, FeatureKind};
use crate::error::{Error, Result};
use crate::params::{init_weight, visit_prefixed, Bottleneck, LayerNorm, Linear, Params};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Weights generated from `H_l` per sample.
    Conditional,
    /// Learnable weights shared by all samples.
    Fixed,
    /// Plain average of all features.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Shared,
    Independent,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadOptions {
    pub aggregation: Aggregation,
    pub projection: Projection,
    /// Include `H_i` for `i < l` (`H_l` is always used).
    pub use_h: bool,
    pub use_att: bool,
    pub use_ffn: bool,
    pub dropfeat: bool,
}

impl Default for HeadOptions {
    fn default() -> Self {
        HeadOptions {
            aggregation: Aggregation::Conditional,
            projection: Projection::Shared,
            use_h: true,
            use_att: true,
            use_ffn: true,
            dropfeat: true,
        }
    }
}

/// Which features the head reads, in a fixed order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    depth: usize,
    /// Non-conditioning features, layer-major.
    others: Vec<(usize, FeatureKind)>,
}

impl FeatureLayout {
    pub fn new(depth: usize, options: &HeadOptions) -> Self {
        let mut others = Vec::new();
        for layer in 0..depth {
            for kind in FeatureKind::ALL {
                let used = match kind {
                    FeatureKind::H => options.use_h && layer + 1 < depth,
                    FeatureKind::Att => options.use_att,
                    FeatureKind::Ffn => options.use_ffn,
                };
                if used {
                    others.push((layer, kind));
                }
            }
        }
        FeatureLayout { depth, others }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn condition(&self) -> (usize, FeatureKind) {
        (self.depth - 1, FeatureKind::H)
    }

    pub fn others(&self) -> &[(usize, FeatureKind)] {
        &self.others
    }

    /// Features summed by the head, conditioning feature last.
    pub fn all(&self) -> impl Iterator<Item = (usize, FeatureKind)> + '_ {
        self.others
            .iter()
            .copied()
            .chain(std::iter::once(self.condition()))
    }

    pub fn len(&self) -> usize {
        self.others.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `LN → Linear(d, d̂) → GELU → Linear(d̂, classes)`.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub ln: LayerNorm,
    pub hidden: Linear,
    pub out: Linear,
}

impl Classifier {
    /// Fan-in scaled weights.
    pub fn init(width: usize, hidden: usize, num_classes: usize, rng: &mut Rng) -> Self {
        Classifier {
            ln: LayerNorm::new(width),
            hidden: Linear::init_fan_in(width, hidden, rng),
            out: Linear::init_fan_in(hidden, num_classes, rng),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let h = self.ln.forward(tape, x)?;
        let h = tape.gelu(&self.hidden.forward(tape, &h)?)?;
        self.out.forward(tape, &h)
    }

    pub fn num_classes(&self) -> usize {
        self.out.w.shape()[1]
    }
}

impl Params for Classifier {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        visit_prefixed("ln", &self.ln, f);
        visit_prefixed("hidden", &self.hidden, f);
        visit_prefixed("out", &self.out, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.ln.visit_mut(f);
        self.hidden.visit_mut(f);
        self.out.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub options: HeadOptions,
    pub layout: FeatureLayout,
    /// One bottleneck when shared, one per feature when independent.
    pub projections: Vec<Bottleneck>,
    /// Conditional aggregation: `d → (#features − 1)`.
    pub generator: Option<Linear>,
    /// Fixed aggregation: `1 × (#features − 1)` logits.
    pub fixed: Option<Tensor>,
    pub classifier: Classifier,
}

impl HeadParams {
    /// Projections and classifier get fan-in scaled weights; the gate
    /// generator (or fixed gate logits) uses `std`, so gates start near 1/2.
    pub fn init(
        width: usize,
        hidden: usize,
        depth: usize,
        num_classes: usize,
        options: HeadOptions,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        let layout = FeatureLayout::new(depth, &options);
        let gates = layout.len() - 1;
        let projections = match options.projection {
            Projection::Shared => vec![Bottleneck::init_fan_in(width, hidden, rng)],
            Projection::Independent => (0..layout.len())
                .map(|_| Bottleneck::init_fan_in(width, hidden, rng))
                .collect(),
            Projection::None => Vec::new(),
        };
        let generator = (options.aggregation == Aggregation::Conditional)
            .then(|| Linear::init(width, gates, std, rng));
        let fixed =
            (options.aggregation == Aggregation::Fixed).then(|| init_weight(&[1, gates], std, rng));
        HeadParams {
            options,
            layout,
            projections,
            generator,
            fixed,
            classifier: Classifier::init(width, hidden, num_classes, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }
}

impl Params for HeadParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, p) in self.projections.iter().enumerate() {
            visit_prefixed(&format!("proj.{i}"), p, f);
        }
        if let Some(g) = &self.generator {
            visit_prefixed("generator", g, f);
        }
        if let Some(w) = &self.fixed {
            f("fixed_logits".into(), w);
        }
        visit_prefixed("classifier", &self.classifier, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.projections.visit_mut(f);
        self.generator.visit_mut(f);
        if let Some(w) = &mut self.fixed {
            f(w);
        }
        self.classifier.visit_mut(f);
    }
}

/// Which features survive DropFeat for one sample, layer-major over all
/// `3·l` features.
#[derive(Debug, Clone, PartialEq)]
pub struct DropMask {
    pub keep: Vec<bool>,
    pub p: f64,
    pub train_mode: bool,
}

impl DropMask {
    pub fn keep_all(depth: usize) -> Self {
        DropMask {
            keep: vec![true; 3 * depth],
            p: 0.0,
            train_mode: false,
        }
    }

    pub fn kept(&self, layer: usize, kind: FeatureKind) -> bool {
        self.keep[3 * layer + kind_index(kind)]
    }

    /// Multiplier applied to kept features.
    pub fn rescale(&self) -> f64 {
        if self.train_mode {
            1.0 / (1.0 - self.p)
        } else {
            1.0
        }
    }
}

fn kind_index(kind: FeatureKind) -> usize {
    match kind {
        FeatureKind::H => 0,
        FeatureKind::Att => 1,
        FeatureKind::Ffn => 2,
    }
}

/// Samples a DropFeat mask. In train mode one uniform draw is consumed per
/// non-conditioning feature, layer-major (`H_1, F_att_1, F_ffn_1, H_2, ...`,
/// skipping `H_l`); eval mode keeps everything and draws nothing.
pub fn dropfeat(rng: &mut Rng, p: f64, depth: usize, train_mode: bool) -> Result<DropMask> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!(
            "DropFeat probability must be in [0, 1), got {p}"
        )));
    }
    if !train_mode {
        return Ok(DropMask {
            p,
            ..DropMask::keep_all(depth)
        });
    }
    let mut keep = Vec::with_capacity(3 * depth);
    for layer in 0..depth {
        for kind in FeatureKind::ALL {
            let is_condition = layer + 1 == depth && kind == FeatureKind::H;
            keep.push(is_condition || rng.uniform() >= p);
        }
    }
    Ok(DropMask {
        keep,
        p,
        train_mode,
    })
}

/// Mean over query tokens.
pub fn condition_vector(tape: &Tape, h_last: &Tensor) -> Result<Tensor> {
    tape.mean_rows(h_last)
}

/// `sigmoid(c·W + b)`, one weight per non-conditioning feature.
pub fn conditional_weights(tape: &Tape, generator: &Linear, condition: &Tensor) -> Result<Tensor> {
    tape.sigmoid(&generator.forward(tape, condition)?)
}

/// Pre-classifier aggregate `Σ_f w_f·mask_f·proj(f) + w_l·proj(H_l)` (1×d).
pub fn aggregate(
    tape: &Tape,
    params: &HeadParams,
    bundle: &FeatureBundle,
    mask: &DropMask,
) -> Result<Tensor> {
    let layout = &params.layout;
    if bundle.depth() != layout.depth() {
        return Err(Error::dim(
            "head_forward",
            &[bundle.depth()],
            &[layout.depth()],
        ));
    }
    if mask.keep.len() != 3 * layout.depth() {
        return Err(Error::dim(
            "head_forward",
            &[mask.keep.len()],
            &[3 * layout.depth()],
        ));
    }
    let count = layout.len();
    let pooled: Vec<Tensor> = layout
        .all()
        .map(|(l, k)| tape.mean_rows(bundle.get(l, k)))
        .collect::<Result<_>>()?;
    let projected: Vec<Tensor> = pooled
        .iter()
        .enumerate()
        .map(|(i, p)| match params.options.projection {
            Projection::Shared => params.projections[0].forward(tape, p, false),
            Projection::Independent => params.projections[i].forward(tape, p, false),
            Projection::None => Ok(p.clone()),
        })
        .collect::<Result<_>>()?;

    let gates = count - 1;
    let (weights, condition_weight) = match params.options.aggregation {
        Aggregation::Conditional => {
            let generator = params
                .generator
                .as_ref()
                .ok_or_else(|| Error::Contract("conditional head without a generator".into()))?;
            (conditional_weights(tape, generator, &pooled[gates])?, 1.0)
        }
        Aggregation::Fixed => {
            let logits = params
                .fixed
                .as_ref()
                .ok_or_else(|| Error::Contract("fixed-weight head without weights".into()))?;
            (tape.sigmoid(logits)?, 1.0)
        }
        Aggregation::Mean => {
            let w = 1.0 / count as f64;
            (Tensor::full(&[1, gates], w), w)
        }
    };
    let scale = mask.rescale();
    let mask_row: Vec<f64> = layout
        .others()
        .iter()
        .map(|&(l, k)| if mask.kept(l, k) { scale } else { 0.0 })
        .collect();
    let weights = tape.mul(&weights, &Tensor::new(&[1, gates], mask_row)?)?;
    let row = tape.concat(&[&weights, &Tensor::full(&[1, 1], condition_weight)], 1)?;
    let refs: Vec<&Tensor> = projected.iter().collect();
    let stacked = tape.concat(&refs, 0)?;
    tape.matmul(&row, &stacked)
}

/// Class logits (1×classes).
pub fn head_forward(
    tape: &Tape,
    params: &HeadParams,
    bundle: &FeatureBundle,
    mask: &DropMask,
) -> Result<Tensor> {
    let agg = aggregate(tape, params, bundle, mask)?;
    params.classifier.forward(tape, &agg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeight {
    pub name: String,
    pub group: String,
    /// One-based block index.
    pub layer: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeightDump {
    pub sample_id: usize,
    pub weights: Vec<FeatureWeight>,
}

/// Eval-mode aggregation weight of every feature the head reads, grouped
/// `H`, `F_att`, `F_ffn` and ordered by layer within each group. `H_l`
/// reports its pinned weight.
pub fn dump_feature_weights(
    params: &HeadParams,
    bundle: &FeatureBundle,
) -> Result<Vec<FeatureWeight>> {
    let tape = Tape::new();
    let layout = &params.layout;
    let gates: Vec<f64> = match params.options.aggregation {
        Aggregation::Conditional => {
            let (l, k) = layout.condition();
            let c = condition_vector(&tape, bundle.get(l, k))?;
            let g = params
                .generator
                .as_ref()
                .expect("conditional head has a generator");
            conditional_weights(&tape, g, &c)?.data().to_vec()
        }
        Aggregation::Fixed => tape
            .sigmoid(params.fixed.as_ref().expect("fixed weights"))?
            .data()
            .to_vec(),
        Aggregation::Mean => vec![1.0 / layout.len() as f64; layout.len() - 1],
    };
    let pinned = match params.options.aggregation {
        Aggregation::Mean => 1.0 / layout.len() as f64,
        _ => 1.0,
    };
    let mut entries: Vec<(usize, usize, FeatureKind, f64)> = layout
        .others()
        .iter()
        .zip(&gates)
        .map(|(&(l, k), &w)| (kind_index(k), l, k, w))
        .collect();
    let (cl, ck) = layout.condition();
    entries.push((kind_index(ck), cl, ck, pinned));
    entries.sort_by_key(|&(g, l, _, _)| (g, l));
    Ok(entries
        .into_iter()
        .map(|(_, l, k, w)| FeatureWeight {
            name: format!("{}_{}", k.label(), l + 1),
            group: k.label().to_string(),
            layer: l + 1,
            value: w,
        })
        .collect())
}

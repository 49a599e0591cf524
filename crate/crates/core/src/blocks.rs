//! Query synthesis (trainable) and knowledge extraction (frozen) blocks.
//!
//! Block `i` turns the previous block's output into synthesized query tokens
//! `Ĥ_i` using only its own parameters, then lets those queries attend over
//! the backbone features `X_i` through block `i`'s frozen attention and FFN.
//! Backbone features never flow into the query synthesis, so gradients reach
//! the trainable parameters only through the `n` query tokens.

use serde::{Deserialize, Serialize};

use crate::backbone::{ffn, FeatureStack, FrozenBackbone, KemView, LN_EPS};
use crate::error::{Error, Result};
use crate::params::{init_weight, visit_prefixed, Bottleneck, LayerNorm, Params};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynqtConfig {
    /// Query tokens per block.
    pub n: usize,
    /// Bottleneck width of the input projection and FFN.
    pub hidden: usize,
    /// Bottleneck width of the query/key/value projections.
    pub qkv_hidden: usize,
    /// Scale `s'` on the attention branch.
    pub s_attn: f64,
    /// Scale `s''` on the FFN branch.
    pub s_ffn: f64,
    pub dropfeat_p: f64,
}

impl Default for SynqtConfig {
    fn default() -> Self {
        SynqtConfig {
            n: 4,
            hidden: 48,
            qkv_hidden: 8,
            s_attn: 1.0,
            s_ffn: 1.0,
            dropfeat_p: 0.1,
        }
    }
}

impl SynqtConfig {
    /// Widths scaled for the 32-wide toy backbone.
    /// Widths for the toy backbone, with residual scales picked on the
    /// synthetic task.
    pub fn toy() -> Self {
        SynqtConfig {
            hidden: 16,
            qkv_hidden: 4,
            s_attn: 0.1,
            s_ffn: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if self.hidden == 0 || self.hidden >= width {
            return Err(Error::Config(format!(
                "hidden must be in [1, {width}), got {}",
                self.hidden
            )));
        }
        if self.qkv_hidden == 0 || self.qkv_hidden >= width {
            return Err(Error::Config(format!(
                "qkv_hidden must be in [1, {width}), got {}",
                self.qkv_hidden
            )));
        }
        if !(self.s_attn > 0.0 && self.s_ffn > 0.0) {
            return Err(Error::Config(
                "scales s_attn and s_ffn must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropfeat_p) {
            return Err(Error::Config(format!(
                "dropfeat_p must be in [0, 1), got {}",
                self.dropfeat_p
            )));
        }
        Ok(())
    }
}

/// Trainable parameters of one query synthesis block.
#[derive(Debug, Clone)]
pub struct QsmParams {
    /// `n×d`; absent in the "no prompt" ablation.
    pub prompt: Option<Tensor>,
    pub input: Bottleneck,
    pub ln_attn: LayerNorm,
    pub q: Bottleneck,
    pub k: Bottleneck,
    pub v: Bottleneck,
    pub ln_ffn: LayerNorm,
    pub ffn: Bottleneck,
}

impl QsmParams {
    pub fn init(
        cfg: &SynqtConfig,
        width: usize,
        use_prompt: bool,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        QsmParams {
            prompt: use_prompt.then(|| init_weight(&[cfg.n, width], std, rng)),
            input: Bottleneck::init(width, cfg.hidden, std, rng),
            ln_attn: LayerNorm::new(width),
            q: Bottleneck::init(width, cfg.qkv_hidden, std, rng),
            k: Bottleneck::init(width, cfg.qkv_hidden, std, rng),
            v: Bottleneck::init(width, cfg.qkv_hidden, std, rng),
            ln_ffn: LayerNorm::new(width),
            ffn: Bottleneck::init(width, cfg.hidden, std, rng),
        }
    }

    /// Every tensor random, including biases and LayerNorm affines.
    pub fn init_dense(cfg: &SynqtConfig, width: usize, std: f64, rng: &mut Rng) -> Self {
        let ln = |rng: &mut Rng| {
            LayerNorm {
                gamma: LayerNorm::new(width).gamma,
                beta: init_weight(&[width], std, rng),
            }
            .perturbed(std, rng)
        };
        QsmParams {
            prompt: Some(init_weight(&[cfg.n, width], std, rng)),
            input: Bottleneck::init_dense(width, cfg.hidden, std, rng),
            ln_attn: ln(rng),
            q: Bottleneck::init_dense(width, cfg.qkv_hidden, std, rng),
            k: Bottleneck::init_dense(width, cfg.qkv_hidden, std, rng),
            v: Bottleneck::init_dense(width, cfg.qkv_hidden, std, rng),
            ln_ffn: ln(rng),
            ffn: Bottleneck::init_dense(width, cfg.hidden, std, rng),
        }
    }
}

impl LayerNorm {
    pub(crate) fn perturbed(mut self, std: f64, rng: &mut Rng) -> Self {
        let noise = Tensor::trunc_normal(self.gamma.shape(), std, rng);
        let g: Vec<f64> = self
            .gamma
            .data()
            .iter()
            .zip(noise.data())
            .map(|(a, b)| a + b)
            .collect();
        self.gamma = Tensor::new(self.gamma.shape(), g)
            .expect("same shape")
            .into_parameter();
        self
    }
}

impl Params for QsmParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(p) = &self.prompt {
            f("prompt".into(), p);
        }
        visit_prefixed("input", &self.input, f);
        visit_prefixed("ln_attn", &self.ln_attn, f);
        visit_prefixed("q", &self.q, f);
        visit_prefixed("k", &self.k, f);
        visit_prefixed("v", &self.v, f);
        visit_prefixed("ln_ffn", &self.ln_ffn, f);
        visit_prefixed("ffn", &self.ffn, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        if let Some(p) = &mut self.prompt {
            f(p);
        }
        self.input.visit_mut(f);
        self.ln_attn.visit_mut(f);
        self.q.visit_mut(f);
        self.k.visit_mut(f);
        self.v.visit_mut(f);
        self.ln_ffn.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

/// Synthesizes `Ĥ_i` (n×d) from the previous block's output.
///
/// `Z' = up(down(H_prev + P))`, single-head attention over bottlenecked,
/// GELU-activated Q/K/V of `LN(Z')`, `Z'' = s'·Attn + Z'`, and finally
/// `Ĥ = s''·FFN(LN(Z'')) + Z''`.
pub fn qsm_forward(
    tape: &Tape,
    params: &QsmParams,
    prev: &Tensor,
    cfg: &SynqtConfig,
) -> Result<Tensor> {
    let width = params.input.down.shape()[0];
    if prev.shape() != [cfg.n, width] {
        return Err(Error::dim("qsm_forward", prev.shape(), &[cfg.n, width]));
    }
    let u = match &params.prompt {
        Some(p) => tape.add(prev, p)?,
        None => prev.clone(),
    };
    let z1 = params.input.forward(tape, &u, false)?;
    let normed = params.ln_attn.forward(tape, &z1)?;
    let q = params.q.forward(tape, &normed, true)?;
    let k = params.k.forward(tape, &normed, true)?;
    let v = params.v.forward(tape, &normed, true)?;
    let attn = tape.attention(&q, &k, &v, 1)?;
    let z2 = tape.add(&tape.scale(&attn, cfg.s_attn)?, &z1)?;
    let f = params
        .ffn
        .forward(tape, &params.ln_ffn.forward(tape, &z2)?, true)?;
    tape.add(&tape.scale(&f, cfg.s_ffn)?, &z2)
}

/// Features extracted by one knowledge extraction block.
#[derive(Debug, Clone)]
pub struct KemOutput {
    pub h: Tensor,
    pub f_att: Tensor,
    pub f_ffn: Tensor,
}

/// Frozen extraction: `Ĥ` queries attend over `X_i` with block `i`'s own
/// LayerNorm, projections and FFN.
///
/// `F_att = W_o·Attn(LN1(Ĥ)W_q, LN1(X)W_k, LN1(X)W_v)`, `E = F_att + Ĥ`,
/// `F_ffn = FFN(LN2(E))`, `H = F_ffn + E`.
pub fn kem_forward(
    tape: &Tape,
    view: KemView<'_>,
    queries: &Tensor,
    features: &Tensor,
) -> Result<KemOutput> {
    let w = view.weights();
    if features.shape().len() != 2 || features.shape()[1] != w.wk.shape()[0] {
        return Err(Error::dim("kem_forward", queries.shape(), features.shape()));
    }
    let x = tape.layernorm(features, &w.ln1_gamma, &w.ln1_beta, LN_EPS)?;
    let keys = tape.linear(&x, &w.wk, &w.bk)?;
    let values = tape.linear(&x, &w.wv, &w.bv)?;
    kem_forward_cached(tape, view, queries, &keys, &values)
}

/// [`kem_forward`] with keys and values taken from the backbone's own
/// forward pass of block `i`, which computes exactly `LN1(X_i)W_k + b_k`
/// and `LN1(X_i)W_v + b_v`.
pub fn kem_forward_cached(
    tape: &Tape,
    view: KemView<'_>,
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
) -> Result<KemOutput> {
    let w = view.weights();
    let width = w.wq.shape()[0];
    if queries.shape().len() != 2 || queries.shape()[1] != width {
        return Err(Error::dim("kem_forward", queries.shape(), keys.shape()));
    }
    let hq = tape.layernorm(queries, &w.ln1_gamma, &w.ln1_beta, LN_EPS)?;
    let q = tape.linear(&hq, &w.wq, &w.bq)?;
    let a = tape.attention(&q, keys, values, view.heads())?;
    let f_att = tape.linear(&a, &w.wo, &w.bo)?;
    let e = tape.add(&f_att, queries)?;
    let f_ffn = ffn(tape, w, &e)?;
    let h = tape.add(&f_ffn, &e)?;
    Ok(KemOutput { h, f_att, f_ffn })
}

/// Where each block's queries come from.
#[derive(Debug, Clone)]
pub enum QuerySource {
    /// Trainable query synthesis; `chain` feeds each block's output into the
    /// next block's synthesis (off = the "no last output" ablation).
    Synthesized { qsm: Vec<QsmParams>, chain: bool },
    /// Fixed random queries per block, never trained.
    RandomFrozen(Vec<Tensor>),
}

/// The `3·l` features of one sample plus the queries that produced them.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub blocks: Vec<KemOutput>,
    pub queries: Vec<Tensor>,
}

/// Feature kinds extracted per block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    H,
    Att,
    Ffn,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [FeatureKind::H, FeatureKind::Att, FeatureKind::Ffn];

    pub fn label(self) -> &'static str {
        match self {
            FeatureKind::H => "H",
            FeatureKind::Att => "F_att",
            FeatureKind::Ffn => "F_ffn",
        }
    }
}

impl FeatureBundle {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn get(&self, layer: usize, kind: FeatureKind) -> &Tensor {
        let b = &self.blocks[layer];
        match kind {
            FeatureKind::H => &b.h,
            FeatureKind::Att => &b.f_att,
            FeatureKind::Ffn => &b.f_ffn,
        }
    }

    /// Layer-major: `H_1, F_att_1, F_ffn_1, H_2, ...`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, FeatureKind, &Tensor)> {
        (0..self.depth()).flat_map(move |l| {
            FeatureKind::ALL
                .into_iter()
                .map(move |k| (l, k, self.get(l, k)))
        })
    }

    pub fn len(&self) -> usize {
        3 * self.depth()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Runs every block over precomputed backbone features.
///
/// The first block's previous output is the `n×d` zero tensor.
pub fn stack_forward_features(
    tape: &Tape,
    backbone: &FrozenBackbone,
    source: &QuerySource,
    features: &FeatureStack,
    cfg: &SynqtConfig,
) -> Result<FeatureBundle> {
    let l = backbone.config().depth;
    let width = backbone.config().width;
    if features.depth() != l {
        return Err(Error::dim("stack_forward", &[features.depth()], &[l]));
    }
    let zeros = Tensor::zeros(&[cfg.n, width]);
    let mut prev = zeros.clone();
    let mut blocks = Vec::with_capacity(l);
    let mut queries = Vec::with_capacity(l);
    for i in 0..l {
        let q = match source {
            QuerySource::Synthesized { qsm, chain } => {
                let params = qsm.get(i).ok_or(Error::Index {
                    what: "query synthesis block",
                    index: i,
                    len: qsm.len(),
                })?;
                let input = if *chain { &prev } else { &zeros };
                qsm_forward(tape, params, input, cfg)?
            }
            QuerySource::RandomFrozen(qs) => qs
                .get(i)
                .ok_or(Error::Index {
                    what: "random query",
                    index: i,
                    len: qs.len(),
                })?
                .clone(),
        };
        let out = kem_forward_cached(
            tape,
            backbone.kem_view(i)?,
            &q,
            &features.keys[i],
            &features.values[i],
        )?;
        prev = out.h.clone();
        queries.push(q);
        blocks.push(out);
    }
    Ok(FeatureBundle { blocks, queries })
}

/// Collects backbone features for `image`, then runs every block.
pub fn stack_forward(
    tape: &Tape,
    backbone: &FrozenBackbone,
    source: &QuerySource,
    image: &Tensor,
    cfg: &SynqtConfig,
) -> Result<FeatureBundle> {
    let features = backbone.forward_collect(tape, image)?;
    stack_forward_features(tape, backbone, source, &features, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn zero_params(cfg: &SynqtConfig, d: usize) -> QsmParams {
        let mut p = QsmParams::init(cfg, d, true, 0.02, &mut Rng::new(0));
        p.visit_mut(&mut |t| *t = Tensor::zeros(t.shape()).into_parameter());
        p
    }

    #[test]
    fn all_zero_qsm_gives_zero_queries() {
        let cfg = SynqtConfig::toy();
        let p = zero_params(&cfg, 32);
        let out = qsm_forward(&Tape::new(), &p, &Tensor::zeros(&[4, 32]), &cfg).unwrap();
        assert_eq!(out.shape(), &[4, 32]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn qsm_rejects_wrong_shapes() {
        let cfg = SynqtConfig::toy();
        let p = QsmParams::init(&cfg, 32, true, 0.02, &mut Rng::new(0));
        assert!(matches!(
            qsm_forward(&Tape::new(), &p, &Tensor::zeros(&[3, 32]), &cfg),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(SynqtConfig::default().validate(768).is_ok());
        assert!(SynqtConfig::toy().validate(32).is_ok());
        assert!(SynqtConfig::default().validate(32).is_err());
        let bad = SynqtConfig {
            dropfeat_p: 1.0,
            ..SynqtConfig::toy()
        };
        assert!(bad.validate(32).is_err());
        let bad = SynqtConfig {
            n: 0,
            ..SynqtConfig::toy()
        };
        assert!(bad.validate(32).is_err());
    }

    #[test]
    fn kem_with_single_key_copies_the_value_path() {
        let cfg = BackboneConfig::toy();
        let bb = FrozenBackbone::build(cfg, &mut Rng::new(2)).unwrap();
        let view = bb.kem_view(1).unwrap();
        let w = view.weights();
        let tape = Tape::new();
        let mut rng = Rng::new(3);
        let x = Tensor::randn(&[1, 32], 1.0, &mut rng);
        let q = Tensor::randn(&[4, 32], 1.0, &mut rng);
        let out = kem_forward(&tape, view, &q, &x).unwrap();
        let xn = tape
            .layernorm(&x, &w.ln1_gamma, &w.ln1_beta, LN_EPS)
            .unwrap();
        let v = tape.linear(&xn, &w.wv, &w.bv).unwrap();
        let expect = tape.linear(&v, &w.wo, &w.bo).unwrap();
        for r in 0..4 {
            for c in 0..32 {
                assert!((out.f_att.at(r, c) - expect.at(0, c)).abs() < 1e-15);
            }
        }
    }
}

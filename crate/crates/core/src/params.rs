//! Trainable parameter groups and the small layers they are built from.

use crate::backbone::LN_EPS;
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Gradients, Tape, Tensor};

/// A named, ordered collection of parameter tensors.
///
/// Visiting order is fixed for a given value; optimizers and checkpoints
/// rely on it.
pub trait Params: Clone {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor));

    /// Copy whose every tensor is a watched leaf on `tape`.
    fn watched(&self, tape: &Tape) -> Self {
        let mut c = self.clone();
        c.visit_mut(&mut |t| *t = tape.watch(t));
        c
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Gradients of a watched copy, in visiting order. Tensors the loss did
    /// not reach get zeros.
    fn collect_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| {
            out.push(
                grads
                    .get(t)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape())),
            );
        });
        out
    }
}

impl<T: Params> Params for Vec<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&mut |n, t| f(format!("{i}.{n}"), t));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for p in self.iter_mut() {
            p.visit_mut(f);
        }
    }
}

impl<T: Params> Params for Option<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(p) = self {
            p.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        if let Some(p) = self {
            p.visit_mut(f);
        }
    }
}

pub(crate) fn init_weight(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    Tensor::trunc_normal(shape, std, rng).into_parameter()
}

pub(crate) fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

pub(crate) fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).into_parameter()
}

/// Down-projection to a narrow width followed by an up-projection, both
/// with biases; optionally GELU between them.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub down: Tensor,
    pub down_b: Tensor,
    pub up: Tensor,
    pub up_b: Tensor,
}

impl Bottleneck {
    pub fn init(width: usize, hidden: usize, std: f64, rng: &mut Rng) -> Self {
        Bottleneck {
            down: init_weight(&[width, hidden], std, rng),
            down_b: zeros(&[hidden]),
            up: init_weight(&[hidden, width], std, rng),
            up_b: zeros(&[width]),
        }
    }

    /// Weights with std `1/sqrt(fan_in)`, zero biases.
    pub fn init_fan_in(width: usize, hidden: usize, rng: &mut Rng) -> Self {
        Bottleneck {
            down: init_weight(&[width, hidden], fan_in_std(width), rng),
            down_b: zeros(&[hidden]),
            up: init_weight(&[hidden, width], fan_in_std(hidden), rng),
            up_b: zeros(&[width]),
        }
    }

    /// Random biases too; used where every gradient must be non-trivial.
    pub fn init_dense(width: usize, hidden: usize, std: f64, rng: &mut Rng) -> Self {
        Bottleneck {
            down: init_weight(&[width, hidden], std, rng),
            down_b: init_weight(&[hidden], std, rng),
            up: init_weight(&[hidden, width], std, rng),
            up_b: init_weight(&[width], std, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.down.shape()[1]
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, activation: bool) -> Result<Tensor> {
        let mut h = tape.linear(x, &self.down, &self.down_b)?;
        if activation {
            h = tape.gelu(&h)?;
        }
        tape.linear(&h, &self.up, &self.up_b)
    }
}

impl Params for Bottleneck {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("down.w".into(), &self.down);
        f("down.b".into(), &self.down_b);
        f("up.w".into(), &self.up);
        f("up.b".into(), &self.up_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.down);
        f(&mut self.down_b);
        f(&mut self.up);
        f(&mut self.up_b);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        LayerNorm {
            gamma: Tensor::ones(&[width]).into_parameter(),
            beta: zeros(&[width]),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.layernorm(x, &self.gamma, &self.beta, LN_EPS)
    }
}

impl Params for LayerNorm {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("gamma".into(), &self.gamma);
        f("beta".into(), &self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn init(inputs: usize, outputs: usize, std: f64, rng: &mut Rng) -> Self {
        Linear {
            w: init_weight(&[inputs, outputs], std, rng),
            b: zeros(&[outputs]),
        }
    }

    /// Weights with std `1/sqrt(inputs)`, zero bias.
    pub fn init_fan_in(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        Self::init(inputs, outputs, fan_in_std(inputs), rng)
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.linear(x, &self.w, &self.b)
    }
}

impl Params for Linear {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("w".into(), &self.w);
        f("b".into(), &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Prefixes every name visited through `inner`.
pub(crate) fn visit_prefixed<'a, P: Params>(
    prefix: &str,
    inner: &'a P,
    f: &mut dyn FnMut(String, &'a Tensor),
) {
    inner.visit(&mut |n, t| f(format!("{prefix}.{n}"), t));
}

/// Overwrites every tensor with truncated-normal noise; LayerNorm gains
/// become `1 + noise`. Gives every parameter a non-trivial gradient.
pub fn randomize<P: Params>(params: &mut P, std: f64, rng: &mut Rng) {
    let gains: Vec<bool> = params
        .named()
        .iter()
        .map(|(n, _)| n.ends_with("gamma"))
        .collect();
    let mut i = 0;
    params.visit_mut(&mut |t| {
        let noise = Tensor::trunc_normal(t.shape(), std, rng);
        *t = if gains[i] {
            noise.map(|v| 1.0 + v)
        } else {
            noise
        }
        .into_parameter();
        i += 1;
    });
}

/// Replaces the tensors of `params`, in visiting order, by `values`.
pub fn assign<P: Params>(params: &mut P, values: &[Tensor]) {
    let mut it = values.iter();
    params.visit_mut(&mut |t| {
        let v = it.next().expect("one value per parameter tensor");
        debug_assert_eq!(t.shape(), v.shape());
        *t = v.clone();
    });
}

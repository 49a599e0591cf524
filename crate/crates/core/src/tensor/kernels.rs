// Plain slice kernels shared by the tape's forward and backward passes.

use statrs::function::erf::erf;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// `a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `g[m×n] · bᵀ` where `b` is `k×n`; result `m×k`.
pub fn matmul_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` where `a` is `m×k` and `g` is `m×n`; result `k×n`.
pub fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub struct LayerNormOut {
    pub y: Vec<f64>,
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layernorm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    rows: usize,
    d: usize,
    eps: f64,
) -> LayerNormOut {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + eps).sqrt();
        rstd[r] = s;
        for c in 0..d {
            let h = (xr[c] - mean) * s;
            xhat[r * d + c] = h;
            y[r * d + c] = gamma[c] * h + beta[c];
        }
    }
    LayerNormOut { y, xhat, rstd }
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Multi-head scaled dot-product attention.
///
/// `q` is `n×d`, `k` and `v` are `m×d`; heads split the width into
/// contiguous blocks of `d / heads`. Returns the `n×d` output and the
/// attention probabilities laid out as `[heads][n][m]`.
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    m: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; heads * n * m];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let p = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
            let qi = &q[i * d + off..i * d + off + dh];
            for j in 0..m {
                let kj = &k[j * d + off..j * d + off + dh];
                p[j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
            }
            softmax_in_place(p);
            let orow = &mut out[i * d + off..i * d + off + dh];
            for j in 0..m {
                let pj = p[j];
                let vj = &v[j * d + off..j * d + off + dh];
                for (o, &vv) in orow.iter_mut().zip(vj) {
                    *o += pj * vv;
                }
            }
        }
    }
    (out, probs)
}

//! Scalar re-implementations of the query synthesis block, the knowledge
//! extraction block and the head, written with plain loops over
//! `Vec<Vec<f64>>`. Each `*_gap` returns the largest absolute difference
//! from the tape forward pass over a few micro configurations.

use statrs::function::erf::erf;
use synqt::backbone::{BlockWeights, KemView};
use synqt::blocks::{kem_forward, qsm_forward, FeatureBundle, KemOutput, QsmParams, SynqtConfig};
use synqt::head::{head_forward, Aggregation, DropMask, HeadOptions, HeadParams, Projection};
use synqt::params::{randomize, Bottleneck, LayerNorm, Linear};
use synqt::{Rng, Tape, Tensor};

const EPS: f64 = 1e-6;

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    let (r, _) = t.dims2();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

fn affine(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let (k, n) = w.dims2();
    x.iter()
        .map(|row| {
            (0..n)
                .map(|j| {
                    let mut s = b.data()[j];
                    for p in 0..k {
                        s += row[p] * w.at(p, j);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn gelu(x: &Mat) -> Mat {
    x.iter()
        .map(|r| {
            r.iter()
                .map(|&v| 0.5 * v * (1.0 + erf(v / 2f64.sqrt())))
                .collect()
        })
        .collect()
}

fn layernorm(x: &Mat, gamma: &Tensor, beta: &Tensor) -> Mat {
    x.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mean = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + EPS).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gamma.data()[j] + beta.data()[j])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat, sb: f64) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + sb * v).collect())
        .collect()
}

fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, vj) in v.iter().enumerate() {
                for c in cols.clone() {
                    out[i][c] += e[j] / z * vj[c];
                }
            }
        }
    }
    out
}

fn bottleneck(x: &Mat, b: &Bottleneck, act: bool) -> Mat {
    let h = affine(x, &b.down, &b.down_b);
    let h = if act { gelu(&h) } else { h };
    affine(&h, &b.up, &b.up_b)
}

fn qsm_oracle(p: &QsmParams, prev: &Mat, cfg: &SynqtConfig) -> Mat {
    let u = match &p.prompt {
        Some(pr) => add(prev, &mat(pr), 1.0),
        None => prev.clone(),
    };
    let z1 = bottleneck(&u, &p.input, false);
    let n = layernorm(&z1, &p.ln_attn.gamma, &p.ln_attn.beta);
    let a = attention(
        &bottleneck(&n, &p.q, true),
        &bottleneck(&n, &p.k, true),
        &bottleneck(&n, &p.v, true),
        1,
    );
    let z2 = add(&z1, &a, cfg.s_attn);
    let f = bottleneck(
        &layernorm(&z2, &p.ln_ffn.gamma, &p.ln_ffn.beta),
        &p.ffn,
        true,
    );
    add(&z2, &f, cfg.s_ffn)
}

fn kem_oracle(w: &BlockWeights, heads: usize, q: &Mat, x: &Mat) -> (Mat, Mat, Mat) {
    let xn = layernorm(x, &w.ln1_gamma, &w.ln1_beta);
    let k = affine(&xn, &w.wk, &w.bk);
    let v = affine(&xn, &w.wv, &w.bv);
    let qq = affine(&layernorm(q, &w.ln1_gamma, &w.ln1_beta), &w.wq, &w.bq);
    let f_att = affine(&attention(&qq, &k, &v, heads), &w.wo, &w.bo);
    let e = add(&f_att, q, 1.0);
    let hidden = gelu(&affine(
        &layernorm(&e, &w.ln2_gamma, &w.ln2_beta),
        &w.w1,
        &w.b1,
    ));
    let f_ffn = affine(&hidden, &w.w2, &w.b2);
    let h = add(&e, &f_ffn, 1.0);
    (h, f_att, f_ffn)
}

fn gap(t: &Tensor, m: &Mat) -> f64 {
    let got = mat(t);
    assert_eq!(got.len(), m.len());
    got.iter()
        .zip(m)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

fn random_block(d: usize, hidden: usize, rng: &mut Rng) -> BlockWeights {
    let mut t = |shape: &[usize]| Tensor::randn(shape, 0.5, rng).into_parameter();
    let gain = |t: Tensor| t.map(|v| 1.0 + v).into_parameter();
    BlockWeights {
        ln1_gamma: gain(t(&[d])),
        ln1_beta: t(&[d]),
        wq: t(&[d, d]),
        bq: t(&[d]),
        wk: t(&[d, d]),
        bk: t(&[d]),
        wv: t(&[d, d]),
        bv: t(&[d]),
        wo: t(&[d, d]),
        bo: t(&[d]),
        ln2_gamma: gain(t(&[d])),
        ln2_beta: t(&[d]),
        w1: t(&[d, hidden]),
        b1: t(&[hidden]),
        w2: t(&[hidden, d]),
        b2: t(&[d]),
    }
}

fn micro(n: usize) -> SynqtConfig {
    SynqtConfig {
        n,
        hidden: 3,
        qkv_hidden: 2,
        s_attn: 0.7,
        s_ffn: 1.3,
        dropfeat_p: 0.1,
    }
}

fn random_bundle(depth: usize, n: usize, d: usize, rng: &mut Rng) -> FeatureBundle {
    let blocks = (0..depth)
        .map(|_| KemOutput {
            h: Tensor::randn(&[n, d], 1.0, rng),
            f_att: Tensor::randn(&[n, d], 1.0, rng),
            f_ffn: Tensor::randn(&[n, d], 1.0, rng),
        })
        .collect();
    FeatureBundle {
        blocks,
        queries: (0..depth).map(|_| Tensor::zeros(&[n, d])).collect(),
    }
}

fn classifier_oracle(x: &Mat, ln: &LayerNorm, hidden: &Linear, out: &Linear) -> Mat {
    let h = gelu(&affine(
        &layernorm(x, &ln.gamma, &ln.beta),
        &hidden.w,
        &hidden.b,
    ));
    affine(&h, &out.w, &out.b)
}

/// `n ∈ {1, 3}`, with and without the prompt.
pub fn qsm_gap() -> f64 {
    let d = 6;
    let mut worst: f64 = 0.0;
    for n in [1, 3] {
        for prompt in [true, false] {
            let cfg = micro(n);
            let mut rng = Rng::new(10 + n as u64);
            let mut p = QsmParams::init(&cfg, d, prompt, 0.02, &mut rng);
            randomize(&mut p, 0.5, &mut rng);
            let prev = Tensor::randn(&[n, d], 1.0, &mut rng);
            let got = qsm_forward(&Tape::new(), &p, &prev, &cfg).unwrap();
            worst = worst.max(gap(&got, &qsm_oracle(&p, &mat(&prev), &cfg)));
        }
    }
    worst
}

/// Queries × key tokens in `{(1, 1), (1, 3), (2, 5)}`, two heads.
pub fn kem_gap() -> f64 {
    let (d, heads) = (4, 2);
    let mut rng = Rng::new(20);
    let block = random_block(d, 8, &mut rng);
    let mut worst: f64 = 0.0;
    for (n, m) in [(1, 1), (1, 3), (2, 5)] {
        let q = Tensor::randn(&[n, d], 1.0, &mut rng);
        let x = Tensor::randn(&[m, d], 1.0, &mut rng);
        let out = kem_forward(&Tape::new(), KemView::new(&block, heads), &q, &x).unwrap();
        let (h, f_att, f_ffn) = kem_oracle(&block, heads, &mat(&q), &mat(&x));
        worst = worst
            .max(gap(&out.h, &h))
            .max(gap(&out.f_att, &f_att))
            .max(gap(&out.f_ffn, &f_ffn));
    }
    worst
}

/// Uniform weights: mean over every feature, optional shared projection,
/// then the MLP classifier.
pub fn uniform_head_gap() -> f64 {
    let (depth, n, d, hidden, classes) = (3, 2, 6, 4, 5);
    let mut worst: f64 = 0.0;
    for projection in [Projection::None, Projection::Shared] {
        let options = HeadOptions {
            aggregation: Aggregation::Mean,
            projection,
            ..HeadOptions::default()
        };
        let mut rng = Rng::new(30);
        let mut head = HeadParams::init(d, hidden, depth, classes, options, 0.02, &mut rng);
        randomize(&mut head, 0.5, &mut rng);
        let bundle = random_bundle(depth, n, d, &mut rng);

        let mut mean = vec![0.0; d];
        for (_, _, f) in bundle.iter() {
            for r in 0..n {
                for (c, m) in mean.iter_mut().enumerate() {
                    *m += f.at(r, c) / (n * 3 * depth) as f64;
                }
            }
        }
        let mut x = vec![mean];
        if projection == Projection::Shared {
            x = bottleneck(&x, &head.projections[0], false);
        }
        let c = &head.classifier;
        let expect = classifier_oracle(&x, &c.ln, &c.hidden, &c.out);
        let got = head_forward(&Tape::new(), &head, &bundle, &DropMask::keep_all(depth)).unwrap();
        worst = worst.max(gap(&got, &expect));
    }
    worst
}

pub fn conditional_head_gap() -> f64 {
    let (depth, n, d, hidden, classes) = (2, 3, 6, 4, 3);
    let mut rng = Rng::new(40);
    let mut head = HeadParams::init(
        d,
        hidden,
        depth,
        classes,
        HeadOptions::default(),
        0.02,
        &mut rng,
    );
    randomize(&mut head, 0.5, &mut rng);
    let bundle = random_bundle(depth, n, d, &mut rng);
    let pool = |t: &Tensor| -> Mat {
        let mut m = vec![0.0; d];
        for r in 0..n {
            for (c, v) in m.iter_mut().enumerate() {
                *v += t.at(r, c) / n as f64;
            }
        }
        vec![m]
    };
    let proj = &head.projections[0];
    let condition = pool(&bundle.blocks[depth - 1].h);
    let g = head.generator.as_ref().unwrap();
    let gates: Vec<f64> = affine(&condition, &g.w, &g.b)[0]
        .iter()
        .map(|v| 1.0 / (1.0 + (-v).exp()))
        .collect();
    // H_1, F_att_1, F_ffn_1, F_att_2, F_ffn_2 carry gates; H_2 carries 1.
    let b = &bundle.blocks;
    let others = [&b[0].h, &b[0].f_att, &b[0].f_ffn, &b[1].f_att, &b[1].f_ffn];
    let mut agg = bottleneck(&condition, proj, false);
    for (w, f) in gates.iter().zip(others) {
        agg = add(&agg, &bottleneck(&pool(f), proj, false), *w);
    }
    let c = &head.classifier;
    let expect = classifier_oracle(&agg, &c.ln, &c.hidden, &c.out);
    let got = head_forward(&Tape::new(), &head, &bundle, &DropMask::keep_all(depth)).unwrap();
    gap(&got, &expect)
}

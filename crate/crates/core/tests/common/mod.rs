//! Independent reference implementations shared by the integration tests
//! and the acceptance runner. Plain loops over `Vec<f64>`, no tape.
#![allow(dead_code)]

use ictsp::model::{Model, ModelConfig, Variant};
use ictsp::numerics::Tensor;
use ictsp::retrieval::RetrievalConfig;
use ictsp::tokenizer::{build_tokens, TokenKind, TokenMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_window(c: usize, li: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..c * li).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::matrix(c, li, data).unwrap()
}

/// A random token set of at most 50 tokens plus a random projection.
pub fn retrieval_instance(seed: u64) -> (TokenMatrix<f64>, RetrievalConfig, Tensor<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let c = r.random_range(1..=3);
    let lb = r.random_range(1..=6);
    let lp = r.random_range(1..=4);
    let m = r.random_range(1..=3);
    let max_ctx = 50 / c - 1;
    let n = r.random_range(1..=max_ctx * m);
    let li = lb + lp + n;
    let window = random_window(c, li, &mut r);
    let tm = build_tokens(&window, lb, lp, m, r.random_range(0..m)).unwrap();
    let cfg = RetrievalConfig {
        latent_dim: r.random_range(1..=6),
        keep_fraction: r.random_range(0.05..1.0),
        merged: r.random_range(0..=6),
        enabled: true,
    };
    let w = Tensor::normal(&[cfg.latent_dim, lb + lp], 1.0, &mut r);
    let b = Tensor::normal(&[cfg.latent_dim], 0.5, &mut r);
    (tm, cfg, w, b)
}

/// What retrieval should output, computed by sorting.
pub struct RetrievalOracle {
    /// Rows of the input kept verbatim, in original order.
    pub kept_rows: Vec<usize>,
    /// Merged tokens in group order.
    pub merged: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

pub fn retrieval_oracle(tm: &TokenMatrix<f64>, cfg: &RetrievalConfig, w: &Tensor<f64>, b: &Tensor<f64>) -> RetrievalOracle {
    let n = tm.len();
    let latent: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..w.rows())
                .map(|r| dot(w.row(r), tm.tokens.row(i)) + b.data()[r])
                .collect()
        })
        .collect();
    let targets: Vec<usize> = (0..n).filter(|&i| tm.meta[i].kind == TokenKind::Target).collect();
    let contexts: Vec<usize> = (0..n).filter(|&i| tm.meta[i].kind == TokenKind::Context).collect();
    if contexts.is_empty() || !cfg.enabled {
        return RetrievalOracle {
            kept_rows: (0..n).collect(),
            merged: Vec::new(),
        };
    }
    let score: Vec<f64> = contexts
        .iter()
        .map(|&i| targets.iter().map(|&t| cosine(&latent[i], &latent[t])).sum::<f64>() / targets.len() as f64)
        .collect();
    let c = targets.len();
    let per = contexts.len() / c;
    let k = ((cfg.keep_fraction * per as f64 + 1e-9).floor() as usize).min(per) * c;
    let mut order: Vec<usize> = (0..contexts.len()).collect();
    // Stable sort on descending score keeps the lower row first on ties.
    order.sort_by(|&a, &b| score[b].partial_cmp(&score[a]).unwrap());
    let mut keep = vec![true; n];
    for &o in &order[k..] {
        keep[contexts[o]] = false;
    }
    let rest = &order[k..];
    let groups = cfg.merged.min(rest.len());
    let mut merged = Vec::new();
    let mut at = 0;
    for g in 0..groups {
        let size = rest.len() / groups + usize::from(g < rest.len() % groups);
        let members = &rest[at..at + size];
        at += size;
        let mx = members.iter().map(|&o| score[o]).fold(f64::NEG_INFINITY, f64::max);
        let wts: Vec<f64> = members.iter().map(|&o| (score[o] - mx).exp()).collect();
        let total: f64 = wts.iter().sum();
        let mut tok = vec![0.0; tm.tokens.cols()];
        for (&o, &wt) in members.iter().zip(&wts) {
            for (t, &v) in tok.iter_mut().zip(tm.tokens.row(contexts[o])) {
                *t += wt / total * v;
            }
        }
        merged.push(tok);
    }
    RetrievalOracle {
        kept_rows: (0..n).filter(|&i| keep[i]).collect(),
        merged,
    }
}

/// Plain-loop version of one pre-norm layer on rows of `z`.
pub fn tf_layer_oracle(z: &[Vec<f64>], model: &Model<f64>, layer: usize) -> Vec<Vec<f64>> {
    let p = |name: &str| model.param(&format!("layer{layer}.{name}")).unwrap();
    let heads = model.config().heads;
    let d = z[0].len();
    let dh = d / heads;
    let linear = |x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
        (0..w.rows()).map(|r| dot(w.row(r), x) + b.data()[r]).collect()
    };
    let ln = |x: &[f64], g: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g.data()[j] + b.data()[j])
            .collect()
    };
    let h: Vec<Vec<f64>> = z.iter().map(|x| ln(x, p("ln1.gamma"), p("ln1.beta"))).collect();
    let q: Vec<Vec<f64>> = h.iter().map(|x| linear(x, p("attn.wq"), p("attn.bq"))).collect();
    let k: Vec<Vec<f64>> = h.iter().map(|x| linear(x, p("attn.wk"), p("attn.bk"))).collect();
    let v: Vec<Vec<f64>> = h.iter().map(|x| linear(x, p("attn.wv"), p("attn.bv"))).collect();
    let n = z.len();
    let mut concat = vec![vec![0.0; d]; n];
    for hd in 0..heads {
        let r = hd * dh..(hd + 1) * dh;
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| dot(&q[i][r.clone()], &k[j][r.clone()]) / (dh as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let tot: f64 = e.iter().sum();
            for j in 0..n {
                for c in r.clone() {
                    concat[i][c] += e[j] / tot * v[j][c];
                }
            }
        }
    }
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    (0..n)
        .map(|i| {
            let attn = linear(&concat[i], p("attn.wo"), p("attn.bo"));
            let y: Vec<f64> = z[i].iter().zip(&attn).map(|(a, b)| a + b).collect();
            let hid: Vec<f64> = linear(&y, p("ffn.w1"), p("ffn.b1")).into_iter().map(gelu).collect();
            let f = ln(&linear(&hid, p("ffn.w2"), p("ffn.b2")), p("ln2.gamma"), p("ln2.beta"));
            y.iter().zip(&f).map(|(a, b)| a + b).collect()
        })
        .collect()
}

/// Tiny ICTSP configuration: `C=2`, `L_I=8`, `L_b=3`, `L_P=2`, `m=1` gives
/// 6 context tokens and 2 targets before retrieval.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        variant: Variant::Ictsp,
        layers: 1,
        d_model: 8,
        heads: 2,
        dropout: 0.0,
        input_len: 8,
        lookback: 3,
        horizon: 2,
        step: 1,
        retrieval: RetrievalConfig {
            latent_dim: 4,
            keep_fraction: 0.34,
            merged: 2,
            enabled: true,
        },
        max_channels: 4,
        channels: 2,
        ..ModelConfig::default()
    }
}

/// Small but non-trivial configuration for identity checks.
pub fn small_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        layers: 2,
        d_model: 16,
        heads: 4,
        dropout: 0.0,
        input_len: 48,
        lookback: 12,
        horizon: 6,
        step: 4,
        retrieval: RetrievalConfig {
            latent_dim: 8,
            keep_fraction: 0.25,
            merged: 3,
            enabled: true,
        },
        max_channels: 8,
        channels: 3,
        ..ModelConfig::default()
    }
}

/// Gives every parameter a random nonzero value so identities are not
/// satisfied by accident (zero biases, unit gains).
pub fn randomize(model: &mut Model<f64>, seed: u64) {
    let mut r = rng(seed);
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v = r.random_range(-0.5..0.5);
        }
    }
}

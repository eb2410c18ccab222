use rand::Rng;

use super::config::ModelConfig;
use crate::numerics::{Real, Tensor};

/// Slot of every tensor belonging to one transformer layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSlots {
    pub ln1_gamma: usize,
    pub ln1_beta: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ff1_w: usize,
    pub ff1_b: usize,
    pub ff2_w: usize,
    pub ff2_b: usize,
    pub ln2_gamma: usize,
    pub ln2_beta: usize,
}

impl LayerSlots {
    pub fn all(&self) -> [usize; 16] {
        [
            self.ln1_gamma,
            self.ln1_beta,
            self.wq,
            self.bq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ff1_w,
            self.ff1_b,
            self.ff2_w,
            self.ff2_b,
            self.ln2_gamma,
            self.ln2_beta,
        ]
    }
}

/// Where each named tensor lives in the flat parameter list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
    pub w_in: usize,
    pub b_in: usize,
    pub w_out: usize,
    pub b_out: usize,
    pub series_emb: Option<usize>,
    pub pos_emb: Option<usize>,
    pub retrieval_w: Option<usize>,
    pub retrieval_b: Option<usize>,
    pub layers: Vec<LayerSlots>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Zeros,
    Ones,
    /// `U(±1/√fan_in)`
    Uniform,
    /// `N(0, 0.02²)`
    Embedding,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        self.names.push(name.into());
        self.shapes.push(shape.to_vec());
        self.inits.push(init);
        self.names.len() - 1
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let w = cfg.token_width();
        let mut b = Builder {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
        };
        let w_in = b.add("w_in", &[d, w], Init::Uniform);
        let b_in = b.add("b_in", &[d], Init::Zeros);
        let w_out = b.add("w_out", &[w, d], Init::Uniform);
        let b_out = b.add("b_out", &[w], Init::Zeros);
        let series_emb = (cfg.series_rows() > 0).then(|| b.add("series_emb", &[cfg.series_rows(), d], Init::Embedding));
        let pos_emb = (cfg.position_rows() > 0).then(|| b.add("pos_emb", &[cfg.position_rows(), d], Init::Embedding));
        let layers = (0..cfg.layers)
            .map(|k| {
                let mut p = |n: &str, shape: &[usize], init| b.add(format!("layer{k}.{n}"), shape, init);
                LayerSlots {
                    ln1_gamma: p("ln1.gamma", &[d], Init::Ones),
                    ln1_beta: p("ln1.beta", &[d], Init::Zeros),
                    wq: p("attn.wq", &[d, d], Init::Uniform),
                    bq: p("attn.bq", &[d], Init::Zeros),
                    wk: p("attn.wk", &[d, d], Init::Uniform),
                    bk: p("attn.bk", &[d], Init::Zeros),
                    wv: p("attn.wv", &[d, d], Init::Uniform),
                    bv: p("attn.bv", &[d], Init::Zeros),
                    wo: p("attn.wo", &[d, d], Init::Uniform),
                    bo: p("attn.bo", &[d], Init::Zeros),
                    ff1_w: p("ffn.w1", &[4 * d, d], Init::Uniform),
                    ff1_b: p("ffn.b1", &[4 * d], Init::Zeros),
                    ff2_w: p("ffn.w2", &[d, 4 * d], Init::Uniform),
                    ff2_b: p("ffn.b2", &[d], Init::Zeros),
                    ln2_gamma: p("ln2.gamma", &[d], Init::Ones),
                    ln2_beta: p("ln2.beta", &[d], Init::Zeros),
                }
            })
            .collect();
        let (retrieval_w, retrieval_b) = if cfg.uses_retrieval() {
            let dl = cfg.retrieval.latent_dim;
            (
                Some(b.add("retrieval.w", &[dl, w], Init::Uniform)),
                Some(b.add("retrieval.b", &[dl], Init::Zeros)),
            )
        } else {
            (None, None)
        };
        Layout {
            names: b.names,
            shapes: b.shapes,
            inits: b.inits,
            w_in,
            b_in,
            w_out,
            b_out,
            series_emb,
            pos_emb,
            retrieval_w,
            retrieval_b,
            layers,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Input and output projections: the only tensors trained during warm-up.
    pub fn projection_slots(&self) -> [usize; 4] {
        [self.w_in, self.b_in, self.w_out, self.b_out]
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor<T>> {
        self.shapes
            .iter()
            .zip(&self.inits)
            .map(|(shape, init)| match init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, T::one()),
                Init::Uniform => Tensor::uniform(shape, 1.0 / (shape[1] as f64).sqrt(), rng),
                Init::Embedding => Tensor::normal(shape, 0.02, rng),
            })
            .collect()
    }
}

/// Trainable scalars of a configuration, in closed form.
///
/// With token width `w`, latent `d`, `K` layers, `E_s` series-embedding rows,
/// `E_p` position rows and retrieval latent `δ`:
/// `2wd + w + d + (E_s + E_p)·d + K·(12d² + 13d) + [δw + δ]`.
pub fn parameter_formula(cfg: &ModelConfig) -> usize {
    let w = cfg.token_width();
    let d = cfg.d_model;
    let layer = 12 * d * d + 13 * d;
    let retrieval = if cfg.uses_retrieval() {
        cfg.retrieval.latent_dim * (w + 1)
    } else {
        0
    };
    2 * w * d + w + d + (cfg.series_rows() + cfg.position_rows()) * d + cfg.layers * layer + retrieval
}

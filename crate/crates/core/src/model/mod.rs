//! The ICTSP network and its two reference architectures.
//!
//! All three variants share the projection contract
//! `W_out · TF(W_in · Z + b_in + embeddings) + b_out` and the same stack of
//! pre-norm layers. They differ only in how a `C × L_I` input window becomes
//! tokens:
//!
//! * `Ictsp`: one row per forecasting task, context examples plus a target
//!   per series, optionally reduced by retrieval.
//! * `SeriesWise`: one row per series, `[x_j, 0…0]`.
//! * `TemporalWise`: one row per time step holding all channels, zero rows
//!   over the horizon.
//!
//! Tokens are rows throughout, so a latent token matrix is `[n × d]`.

mod checkpoint;
mod config;
mod layer;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Variant};
pub use layer::{tf_layer, AttentionRecord, Dropout};
pub use params::{parameter_formula, LayerSlots, Layout};

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::retrieval::retrieve_on_tape;
use crate::tokenizer::{build_target_tokens, build_tokens, rationalize_tokens, TokenKind, TokenMatrix, TokenMeta};

/// Per-call switches for a forward pass.
#[derive(Default)]
pub struct ForwardOptions<'r> {
    /// Sampling shift `r` for context examples.
    pub shift: usize,
    /// Series-embedding row of each channel; identity when absent.
    pub series_ids: Option<Vec<usize>>,
    /// Active only while training.
    pub dropout: Option<Dropout<'r>>,
    pub record_attention: bool,
    /// Skip embeddings and the transformer stack and read targets straight
    /// through the two projections (linear warm-up).
    pub bypass_transformer: bool,
}

/// Result of a forward pass recorded on a tape.
pub struct Forward {
    /// `[C × L_P]`, before the per-channel offsets are added back.
    pub forecast: Var,
    /// Per-channel value subtracted by rationalisation.
    pub offsets: Vec<f64>,
    pub attention: Vec<AttentionRecord>,
    /// Error on the known futures of context tokens, when enabled.
    pub context_loss: Option<Var>,
    /// Token meta after retrieval.
    pub meta: Vec<TokenMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor<T>>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout.init(&mut rng);
        Ok(Self { config, layout, params })
    }

    /// Builds a model from explicit tensors, checking every shape.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.names.iter().zip(&layout.shapes).zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter {name}: expected shape {shape:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.layout.index_of(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.layout.index_of(name).map(|i| &mut self.params[i])
    }

    /// Exact number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Zeroes every layer tensor and both embedding tables, leaving only the
    /// projections (and retrieval) active.
    pub fn zero_transformer(&mut self) {
        let mut slots: Vec<usize> = self.layout.layers.iter().flat_map(|l| l.all()).collect();
        slots.extend(self.layout.series_emb);
        slots.extend(self.layout.pos_emb);
        for i in slots {
            self.params[i].fill(T::zero());
        }
    }

    /// Pushes every parameter onto `tape`, differentiable or not.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.param(p) } else { tape.constant_ref(p) })
            .collect()
    }

    /// Checks that a `C`-channel window is acceptable for this model.
    pub fn check_channels(&self, channels: usize) -> Result<()> {
        if channels == 0 {
            return Err(Error::Shape("window has no channels".into()));
        }
        match self.config.variant {
            Variant::TemporalWise if channels != self.config.channels => Err(Error::ChannelMismatch {
                expected: self.config.channels,
                got: channels,
            }),
            Variant::TemporalWise => Ok(()),
            _ if channels > self.config.max_channels => Err(Error::Capacity(format!(
                "{channels} channels exceed the series-embedding capacity {}",
                self.config.max_channels
            ))),
            _ => Ok(()),
        }
    }

    fn check_window(&self, window: &Tensor<f64>) -> Result<usize> {
        if window.shape().len() != 2 || window.cols() != self.config.input_len {
            return Err(Error::Shape(format!(
                "window must be C × {}, got {:?}",
                self.config.input_len,
                window.shape()
            )));
        }
        self.check_channels(window.rows())?;
        Ok(window.rows())
    }

    fn series_ids(&self, channels: usize, ids: Option<Vec<usize>>) -> Result<Vec<usize>> {
        let ids = ids.unwrap_or_else(|| (0..channels).collect());
        if ids.len() != channels || ids.iter().any(|&i| i >= self.config.max_channels) {
            return Err(Error::Capacity(format!(
                "series ids {ids:?} do not fit {channels} channels and capacity {}",
                self.config.max_channels
            )));
        }
        Ok(ids)
    }

    /// Tokens the ICTSP variant feeds to the network for `window`.
    pub fn tokenize(&self, window: &Tensor<f64>, shift: usize) -> Result<TokenMatrix<f64>> {
        let cfg = &self.config;
        if cfg.variant != Variant::Ictsp {
            return Err(Error::Config("only the ictsp variant builds task tokens".into()));
        }
        let tm = if cfg.context {
            build_tokens(window, cfg.lookback, cfg.horizon, cfg.step, shift)?
        } else {
            build_target_tokens(window, cfg.lookback, cfg.horizon)?
        };
        Ok(if cfg.rationalize { rationalize_tokens(&tm) } else { tm })
    }

    /// Records a forward pass on `tape`.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        vars: &[Var],
        window: &Tensor<f64>,
        opts: ForwardOptions<'_>,
    ) -> Result<Forward> {
        let c = self.check_window(window)?;
        match self.config.variant {
            Variant::Ictsp => {
                let tm = self.tokenize(window, opts.shift)?;
                self.forward_tokens(tape, vars, &tm, opts)
            }
            Variant::SeriesWise => self.forward_series(tape, vars, window, c, opts),
            Variant::TemporalWise => self.forward_temporal(tape, vars, window, opts),
        }
    }

    /// ICTSP forward pass from already built (and rationalised) tokens.
    pub fn forward_tokens<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        vars: &[Var],
        tm: &TokenMatrix<f64>,
        mut opts: ForwardOptions<'_>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let lay = &self.layout;
        if tm.dims.lookback != cfg.lookback || tm.dims.horizon != cfg.horizon {
            return Err(Error::Shape(format!(
                "tokens are built for L_b={}, L_P={}, model expects {}, {}",
                tm.dims.lookback, tm.dims.horizon, cfg.lookback, cfg.horizon
            )));
        }
        let target_rows = tm.rows_of(TokenKind::Target);
        let c = target_rows.len();
        self.check_channels(c)?;
        let ids = self.series_ids(c, opts.series_ids.take())?;
        let offsets: Vec<f64> = target_rows.iter().map(|&r| tm.meta[r].offset).collect();
        let tokens = tape.constant(tm.tokens.cast());
        let (lb, lp) = (cfg.lookback, cfg.horizon);

        if opts.bypass_transformer {
            let z = tape.gather_rows(tokens, &target_rows);
            let forecast = self.read_out(tape, vars, z, lb, lp, true);
            return Ok(Forward {
                forecast,
                offsets,
                attention: Vec::new(),
                context_loss: None,
                meta: target_rows.iter().map(|&r| tm.meta[r].clone()).collect(),
            });
        }

        let (tokens, meta) = if cfg.uses_retrieval() {
            let w = vars[lay.retrieval_w.expect("retrieval weight")];
            let b = vars[lay.retrieval_b.expect("retrieval bias")];
            let out = retrieve_on_tape(tape, tokens, &tm.meta, c, &cfg.retrieval, w, b)?;
            (out.tokens, out.meta)
        } else {
            (tokens, tm.meta.clone())
        };

        let mut x = tape.linear(tokens, vars[lay.w_in], vars[lay.b_in]);
        if let Some(slot) = lay.series_emb {
            let rows: Vec<Option<usize>> = meta.iter().map(|m| m.series.map(|j| ids[j])).collect();
            x = self.add_embedding(tape, x, vars[slot], &rows);
        }
        if let Some(slot) = lay.pos_emb {
            let max_ctx = cfg.max_contexts();
            let rows: Vec<Option<usize>> = meta
                .iter()
                .map(|m| {
                    Some(match m.kind {
                        TokenKind::Target => 0,
                        TokenKind::Context if cfg.tie_context_positions => 1,
                        TokenKind::Context => m.recency.min(max_ctx),
                        TokenKind::Merged => 1 + max_ctx + m.recency,
                    })
                })
                .collect();
            x = self.add_embedding(tape, x, vars[slot], &rows);
        }
        let (x, attention) = self.run_layers(tape, vars, x, &meta, &mut opts);
        let out = tape.linear(x, vars[lay.w_out], vars[lay.b_out]);
        let rows_after: Vec<usize> = (0..meta.len()).filter(|&r| meta[r].kind == TokenKind::Target).collect();
        let tgt = tape.gather_rows(out, &rows_after);
        let forecast = tape.slice_cols(tgt, lb, lp);

        let context_loss = if cfg.context_loss {
            let ctx_rows: Vec<usize> = (0..meta.len()).filter(|&r| meta[r].kind == TokenKind::Context).collect();
            (!ctx_rows.is_empty()).then(|| {
                let pred = tape.gather_rows(out, &ctx_rows);
                let pred = tape.slice_cols(pred, lb, lp);
                let truth = tape.gather_rows(tokens, &ctx_rows);
                let truth = tape.slice_cols(truth, lb, lp);
                let truth = tape.constant(tape.value(truth).clone());
                tape.mse(pred, truth)
            })
        } else {
            None
        };
        Ok(Forward {
            forecast,
            offsets,
            attention,
            context_loss,
            meta,
        })
    }

    fn forward_series<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        vars: &[Var],
        window: &Tensor<f64>,
        c: usize,
        mut opts: ForwardOptions<'_>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let lay = &self.layout;
        let ids = self.series_ids(c, opts.series_ids.take())?;
        let (li, lp) = (cfg.input_len, cfg.horizon);
        let width = li + lp;
        let mut data = vec![T::zero(); c * width];
        let mut offsets = Vec::with_capacity(c);
        for j in 0..c {
            let x = window.row(j);
            let off = if cfg.rationalize { x[li - 1] } else { 0.0 };
            offsets.push(off);
            for (dst, &v) in data[j * width..j * width + li].iter_mut().zip(x) {
                *dst = T::lit(v - off);
            }
        }
        let meta: Vec<TokenMeta> = (0..c)
            .map(|j| TokenMeta {
                series: Some(j),
                sample: None,
                recency: 0,
                kind: TokenKind::Target,
                offset: offsets[j],
            })
            .collect();
        let tokens = tape.constant(Tensor::matrix(c, width, data)?);
        if opts.bypass_transformer {
            let forecast = self.read_out(tape, vars, tokens, li, lp, true);
            return Ok(Forward {
                forecast,
                offsets,
                attention: Vec::new(),
                context_loss: None,
                meta,
            });
        }
        let mut x = tape.linear(tokens, vars[lay.w_in], vars[lay.b_in]);
        if let Some(slot) = lay.series_emb {
            let rows: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
            x = self.add_embedding(tape, x, vars[slot], &rows);
        }
        let (x, attention) = self.run_layers(tape, vars, x, &meta, &mut opts);
        let forecast = self.read_out(tape, vars, x, li, lp, false);
        Ok(Forward {
            forecast,
            offsets,
            attention,
            context_loss: None,
            meta,
        })
    }

    fn forward_temporal<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        vars: &[Var],
        window: &Tensor<f64>,
        mut opts: ForwardOptions<'_>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let lay = &self.layout;
        let c = window.rows();
        let (li, lp) = (cfg.input_len, cfg.horizon);
        let offsets: Vec<f64> = (0..c)
            .map(|j| if cfg.rationalize { window.get(j, li - 1) } else { 0.0 })
            .collect();
        let mut data = vec![T::zero(); (li + lp) * c];
        for t in 0..li {
            for j in 0..c {
                data[t * c + j] = T::lit(window.get(j, t) - offsets[j]);
            }
        }
        let meta: Vec<TokenMeta> = (0..li + lp)
            .map(|t| TokenMeta {
                series: None,
                sample: Some(t),
                recency: 0,
                kind: if t < li { TokenKind::Context } else { TokenKind::Target },
                offset: 0.0,
            })
            .collect();
        let tokens = tape.constant(Tensor::matrix(li + lp, c, data)?);
        let future: Vec<usize> = (li..li + lp).collect();
        let project_out = |tape: &mut Tape<'a, T>, x: Var| {
            let out = tape.linear(x, vars[lay.w_out], vars[lay.b_out]);
            let rows = tape.gather_rows(out, &future);
            tape.transpose(rows)
        };
        if opts.bypass_transformer {
            let x = tape.linear(tokens, vars[lay.w_in], vars[lay.b_in]);
            let forecast = project_out(tape, x);
            return Ok(Forward {
                forecast,
                offsets,
                attention: Vec::new(),
                context_loss: None,
                meta,
            });
        }
        let mut x = tape.linear(tokens, vars[lay.w_in], vars[lay.b_in]);
        if let Some(slot) = lay.pos_emb {
            x = tape.add(x, vars[slot]);
        }
        let (x, attention) = self.run_layers(tape, vars, x, &meta, &mut opts);
        let forecast = project_out(tape, x);
        Ok(Forward {
            forecast,
            offsets,
            attention,
            context_loss: None,
            meta,
        })
    }

    /// `W_out(W_in z + b_in) + b_out` on rows of `z` (or on latent rows when
    /// `project_in` is false), keeping columns `start..start+len`.
    fn read_out(&self, tape: &mut Tape<'_, T>, vars: &[Var], z: Var, start: usize, len: usize, project_in: bool) -> Var {
        let lay = &self.layout;
        let x = if project_in {
            tape.linear(z, vars[lay.w_in], vars[lay.b_in])
        } else {
            z
        };
        let out = tape.linear(x, vars[lay.w_out], vars[lay.b_out]);
        tape.slice_cols(out, start, len)
    }

    /// Adds `table[rows[i]]` to row `i` of `x`; `None` adds nothing.
    fn add_embedding(&self, tape: &mut Tape<'_, T>, x: Var, table: Var, rows: &[Option<usize>]) -> Var {
        let n = rows.len();
        let k = tape.value(table).rows();
        let mut select = Tensor::<T>::zeros(&[n, k]);
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = *r {
                select.set(i, r, T::one());
            }
        }
        let select = tape.constant(select);
        let emb = tape.matmul(select, table);
        tape.add(x, emb)
    }

    fn run_layers(
        &self,
        tape: &mut Tape<'_, T>,
        vars: &[Var],
        mut x: Var,
        meta: &[TokenMeta],
        opts: &mut ForwardOptions<'_>,
    ) -> (Var, Vec<AttentionRecord>) {
        let mut records = Vec::new();
        for (k, slots) in self.layout.layers.iter().enumerate() {
            let (y, avg) = tf_layer(
                tape,
                x,
                vars,
                slots,
                self.config.heads,
                opts.dropout.as_mut(),
                opts.record_attention,
            );
            if let Some(weights) = avg {
                records.push(AttentionRecord {
                    layer: k,
                    weights,
                    meta: meta.to_vec(),
                });
            }
            x = y;
        }
        (x, records)
    }

    /// Inference forecast `[C × L_P]` on the scale of `window`.
    pub fn predict(&self, window: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self.predict_with(window, ForwardOptions::default())?.0)
    }

    /// Inference forecast plus per-layer attention.
    pub fn predict_with_attention(&self, window: &Tensor<f64>) -> Result<(Tensor<f64>, Vec<AttentionRecord>)> {
        self.predict_with(
            window,
            ForwardOptions {
                record_attention: true,
                ..Default::default()
            },
        )
    }

    /// Inference from prebuilt ICTSP tokens.
    pub fn predict_tokens(&self, tm: &TokenMatrix<f64>) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let fwd = self.forward_tokens(&mut tape, &vars, tm, ForwardOptions::default())?;
        Ok(finish(&tape, &fwd))
    }

    /// `W_out(W_in z_target + b_in) + b_out` per target token, no embeddings
    /// and no transformer layers.
    pub fn linear_reduction_forecast(&self, window: &Tensor<f64>) -> Result<Tensor<f64>> {
        if self.config.variant == Variant::Ictsp {
            self.check_window(window)?;
            let cfg = &self.config;
            let tm = build_target_tokens(window, cfg.lookback, cfg.horizon)?;
            let tm = if cfg.rationalize { rationalize_tokens(&tm) } else { tm };
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false);
            let opts = ForwardOptions {
                bypass_transformer: true,
                ..Default::default()
            };
            let fwd = self.forward_tokens(&mut tape, &vars, &tm, opts)?;
            return Ok(finish(&tape, &fwd));
        }
        self.predict_with(
            window,
            ForwardOptions {
                bypass_transformer: true,
                ..Default::default()
            },
        )
        .map(|(f, _)| f)
    }

    fn predict_with(&self, window: &Tensor<f64>, opts: ForwardOptions<'_>) -> Result<(Tensor<f64>, Vec<AttentionRecord>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let fwd = self.forward(&mut tape, &vars, window, opts)?;
        let out = finish(&tape, &fwd);
        Ok((out, fwd.attention))
    }
}

/// Adds the offsets back to a recorded forecast.
pub fn finish<T: Real>(tape: &Tape<'_, T>, fwd: &Forward) -> Tensor<f64> {
    let mut out: Tensor<f64> = tape.value(fwd.forecast).cast();
    for (j, &off) in fwd.offsets.iter().enumerate() {
        out.row_mut(j).iter_mut().for_each(|v| *v += off);
    }
    out
}

/// Writes one CSV per layer into `dir`: the querying token's meta followed
/// by its head-averaged attention row. Returns the written paths.
pub fn export_attention(records: &[AttentionRecord], dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if records
        .iter()
        .any(|r| r.meta.iter().any(|m| m.kind == TokenKind::Merged))
    {
        log::warn!("attention export with retrieval enabled: merged tokens have no source index");
    }
    let mut paths = Vec::with_capacity(records.len());
    for rec in records {
        let n = rec.weights.rows();
        let mut out = String::from("row,series,sample,kind,recency");
        for j in 0..n {
            out += &format!(",t{j}");
        }
        out.push('\n');
        for (i, m) in rec.meta.iter().enumerate() {
            out += &format!(
                "{i},{},{},{},{}",
                m.series.map(|v| v.to_string()).unwrap_or_default(),
                m.sample.map(|v| v.to_string()).unwrap_or_default(),
                m.kind.as_str(),
                m.recency
            );
            for &w in rec.weights.row(i) {
                out += &format!(",{w}");
            }
            out.push('\n');
        }
        let path = dir.join(format!("attention_layer{}.csv", rec.layer));
        std::fs::File::create(&path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

//! Forecasting-task tokens.
//!
//! For each series of an input window `X_I` (`C × L_I`) the tokenizer emits
//! ground-truth context examples, each a contiguous `(lookback, future)`
//! slice of length `L_b + L_P`, followed by one target token whose lookback is
//! the newest `L_b` steps and whose future slots are zero.
//!
//! With `N = L_I − L_b − L_P`, context windows are identified by an offset
//! `o ∈ {0..N−1}`; offset `o` covers steps `o+1 ..= o+L_b+L_P` (0-based) of
//! `X_I`, so `o = N−1` is the newest complete example ending on the last
//! input step. Sampling with stride `m` and shift `r` keeps offsets
//! `N−1−r, N−1−r−m, …` down to 0. Over all `r ∈ {0..m−1}` these tile
//! `{0..N−1}` exactly once.
//!
//! Tokens are stored one per row: `tokens` is `[n_tokens × (L_b + L_P)]`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::retrieval::{retrieval_count, RetrievalConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Context,
    Target,
    Merged,
}

impl TokenKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenKind::Context => "context",
            TokenKind::Target => "target",
            TokenKind::Merged => "merged",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenMeta {
    /// Channel of the window the token came from; `None` for merged tokens.
    pub series: Option<usize>,
    /// Window offset `o` for context tokens.
    pub sample: Option<usize>,
    /// 0 for targets, 1 for the newest context example of a series, 2 for the
    /// next older one, and so on. Merged tokens store their group index.
    pub recency: usize,
    pub kind: TokenKind,
    /// Value subtracted by rationalisation (0 when not rationalised).
    pub offset: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenDims {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub step: usize,
}

impl TokenDims {
    pub fn width(&self) -> usize {
        self.lookback + self.horizon
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix<T: Real = f64> {
    pub tokens: Tensor<T>,
    pub meta: Vec<TokenMeta>,
    pub dims: TokenDims,
}

impl<T: Real> TokenMatrix<T> {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn rows_of(&self, kind: TokenKind) -> Vec<usize> {
        self.meta
            .iter()
            .enumerate()
            .filter(|(_, m)| m.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn context_count(&self) -> usize {
        self.meta.iter().filter(|m| m.kind != TokenKind::Target).count()
    }

    /// Keeps the listed rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            tokens: self.tokens.gather_rows(rows),
            meta: rows.iter().map(|&i| self.meta[i].clone()).collect(),
            dims: self.dims,
        }
    }

    pub fn cast<U: Real>(&self) -> TokenMatrix<U> {
        TokenMatrix {
            tokens: self.tokens.cast(),
            meta: self.meta.clone(),
            dims: self.dims,
        }
    }

    /// One token per row, meta columns first.
    pub fn write_debug_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = String::from("row,series,sample,kind,recency,offset");
        for i in 0..self.dims.width() {
            out += &format!(",v{i}");
        }
        out.push('\n');
        for (r, m) in self.meta.iter().enumerate() {
            out += &format!(
                "{r},{},{},{},{},{}",
                opt(m.series),
                opt(m.sample),
                m.kind.as_str(),
                m.recency,
                m.offset
            );
            for v in self.tokens.row(r) {
                out += &format!(",{v}");
            }
            out.push('\n');
        }
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn opt(x: Option<usize>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Context offsets sampled for one series, oldest first.
pub fn context_offsets(input_len: usize, lookback: usize, horizon: usize, step: usize, shift: usize) -> Vec<usize> {
    let span = lookback + horizon;
    if span > input_len || step == 0 {
        return Vec::new();
    }
    let n = input_len - span;
    if n == 0 || shift >= n {
        return Vec::new();
    }
    let mut out: Vec<usize> = (0..=(n - 1 - shift)).rev().step_by(step).collect();
    out.reverse();
    out
}

/// Number of context tokens per series.
pub fn contexts_per_series(input_len: usize, lookback: usize, horizon: usize, step: usize, shift: usize) -> usize {
    let span = lookback + horizon;
    if span > input_len || step == 0 {
        return 0;
    }
    let n = input_len - span;
    if n == 0 || shift >= n {
        0
    } else {
        (n - 1 - shift) / step + 1
    }
}

fn check_window(window: &Tensor<f64>) -> Result<(usize, usize)> {
    if window.shape().len() != 2 || window.is_empty() {
        return Err(Error::Shape(format!("window must be C × L_I, got {:?}", window.shape())));
    }
    Ok((window.rows(), window.cols()))
}

/// Builds context and target tokens for every series of `window`.
pub fn build_tokens(
    window: &Tensor<f64>,
    lookback: usize,
    horizon: usize,
    step: usize,
    shift: usize,
) -> Result<TokenMatrix<f64>> {
    let (c, li) = check_window(window)?;
    if lookback == 0 || horizon == 0 || lookback + horizon > li {
        return Err(Error::Config(format!(
            "need 1 <= L_b, 1 <= L_P and L_b + L_P <= L_I; got L_b={lookback}, L_P={horizon}, L_I={li}"
        )));
    }
    if step == 0 || shift >= step {
        return Err(Error::Config(format!("need m >= 1 and 0 <= r < m; got m={step}, r={shift}")));
    }
    let offsets = context_offsets(li, lookback, horizon, step, shift);
    let width = lookback + horizon;
    let n_tokens = c * (offsets.len() + 1);
    let mut data = Vec::with_capacity(n_tokens * width);
    let mut meta = Vec::with_capacity(n_tokens);
    for j in 0..c {
        let x = window.row(j);
        for (k, &o) in offsets.iter().enumerate() {
            data.extend_from_slice(&x[o + 1..o + 1 + width]);
            meta.push(TokenMeta {
                series: Some(j),
                sample: Some(o),
                recency: offsets.len() - k,
                kind: TokenKind::Context,
                offset: 0.0,
            });
        }
        push_target(&mut data, &mut meta, x, j, lookback, horizon);
    }
    Ok(TokenMatrix {
        tokens: Tensor::matrix(n_tokens, width, data)?,
        meta,
        dims: TokenDims {
            lookback,
            horizon,
            channels: c,
            step,
        },
    })
}

/// Target tokens only (no context examples). Allows `L_b` up to `L_I`.
pub fn build_target_tokens(window: &Tensor<f64>, lookback: usize, horizon: usize) -> Result<TokenMatrix<f64>> {
    let (c, li) = check_window(window)?;
    if lookback == 0 || horizon == 0 || lookback > li {
        return Err(Error::Config(format!(
            "need 1 <= L_b <= L_I and L_P >= 1; got L_b={lookback}, L_P={horizon}, L_I={li}"
        )));
    }
    let width = lookback + horizon;
    let mut data = Vec::with_capacity(c * width);
    let mut meta = Vec::with_capacity(c);
    for j in 0..c {
        push_target(&mut data, &mut meta, window.row(j), j, lookback, horizon);
    }
    Ok(TokenMatrix {
        tokens: Tensor::matrix(c, width, data)?,
        meta,
        dims: TokenDims {
            lookback,
            horizon,
            channels: c,
            step: 1,
        },
    })
}

fn push_target(data: &mut Vec<f64>, meta: &mut Vec<TokenMeta>, x: &[f64], j: usize, lookback: usize, horizon: usize) {
    let li = x.len();
    data.extend_from_slice(&x[li - lookback..]);
    data.extend(std::iter::repeat_n(0.0, horizon));
    meta.push(TokenMeta {
        series: Some(j),
        sample: None,
        recency: 0,
        kind: TokenKind::Target,
        offset: 0.0,
    });
}

/// Subtracts each token's last lookback value from the token. Target
/// placeholders stay zero. The subtracted value is recorded in the meta.
pub fn rationalize_tokens<T: Real>(tm: &TokenMatrix<T>) -> TokenMatrix<T> {
    let mut out = tm.clone();
    let lb = tm.dims.lookback;
    for (r, meta) in out.meta.iter_mut().enumerate() {
        if meta.kind == TokenKind::Merged {
            continue;
        }
        let row = out.tokens.row_mut(r);
        let off = row[lb - 1];
        let end = if meta.kind == TokenKind::Target { lb } else { row.len() };
        for v in &mut row[..end] {
            *v -= off;
        }
        meta.offset += off.as_f64();
    }
    out
}

/// Inverse of [`rationalize_tokens`].
pub fn derationalize_tokens<T: Real>(tm: &TokenMatrix<T>) -> TokenMatrix<T> {
    let mut out = tm.clone();
    let lb = tm.dims.lookback;
    for (r, meta) in out.meta.iter_mut().enumerate() {
        if meta.kind == TokenKind::Merged {
            continue;
        }
        let row = out.tokens.row_mut(r);
        let off = T::lit(meta.offset);
        let end = if meta.kind == TokenKind::Target { lb } else { row.len() };
        for v in &mut row[..end] {
            *v += off;
        }
        meta.offset = 0.0;
    }
    out
}

/// Zeroes every step older than the newest `visible` steps.
pub fn mask_history(window: &Tensor<f64>, visible: usize) -> Result<Tensor<f64>> {
    let (_, li) = check_window(window)?;
    if visible == 0 {
        return Err(Error::Config("mask_history needs visible >= 1".into()));
    }
    let mut out = window.clone();
    if visible >= li {
        return Ok(out);
    }
    let hidden = li - visible;
    for r in 0..out.rows() {
        out.row_mut(r)[..hidden].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}

/// Context-token totals before and after retrieval for an unshifted window.
///
/// `pre` is the per-series count times `C`. `post` is what retrieval emits:
/// `⌊q·n⌋·C` kept tokens plus `min(r, remaining)` merged tokens, where `n`
/// is the per-series count. When `m` divides `N` and at least `r` tokens are
/// left to merge, `post` equals [`count_formula`].
pub fn count_context_tokens(
    input_len: usize,
    lookback: usize,
    horizon: usize,
    step: usize,
    channels: usize,
    keep_fraction: f64,
    merged: usize,
) -> (usize, usize) {
    let n = contexts_per_series(input_len, lookback, horizon, step, 0);
    let pre = n * channels;
    let cfg = RetrievalConfig {
        keep_fraction,
        merged,
        ..RetrievalConfig::default()
    };
    (pre, retrieval_count(&cfg, n, channels))
}

/// `⌊q·(L_I − L_b − L_P)/m⌋·C + r`, the closed-form count.
pub fn count_formula(
    input_len: usize,
    lookback: usize,
    horizon: usize,
    step: usize,
    channels: usize,
    keep_fraction: f64,
    merged: usize,
) -> usize {
    let n = input_len.saturating_sub(lookback + horizon) as f64;
    floor_eps(keep_fraction * n / step as f64) * channels + merged
}

/// Floor that tolerates representation error just below an integer.
pub(crate) fn floor_eps(x: f64) -> usize {
    (x + 1e-9).floor().max(0.0) as usize
}

//! Token retrieval: keep the context tokens most similar to the targets and
//! fold the rest into a few merged tokens.
//!
//! Every token is projected to a small latent space (`W·z + b`). Each context
//! token is scored by its cosine similarity to every target token, averaged
//! over the targets. The top `⌊q·n⌋·C` tokens by score are kept verbatim
//! (`n` context tokens per series, `C` series). The remaining tokens, in rank
//! order, are cut into `r` contiguous groups whose sizes differ by at most
//! one, and each group becomes one token: the softmax-weighted average of its
//! members, with the members' scores as logits.
//!
//! Output order: kept context tokens and target tokens in their original
//! order, then the merged tokens. Ranking is not differentiable; gradients
//! reach `W` and `b` through the merge weights.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::tokenizer::{floor_eps, TokenKind, TokenMatrix, TokenMeta};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Latent dimension of the scoring projection.
    pub latent_dim: usize,
    /// Fraction `q` of context tokens kept per series.
    pub keep_fraction: f64,
    /// Number `r` of merged tokens.
    pub merged: usize,
    pub enabled: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            keep_fraction: 0.10,
            merged: 30,
            enabled: true,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) || self.latent_dim == 0 {
            return Err(Error::Config(format!(
                "retrieval needs 0 < q <= 1 and latent_dim >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn kept_per_series(&self, per_series: usize) -> usize {
        floor_eps(self.keep_fraction * per_series as f64).min(per_series)
    }
}

/// Number of context tokens retrieval emits for `per_series` context tokens
/// in each of `channels` series.
pub fn retrieval_count(cfg: &RetrievalConfig, per_series: usize, channels: usize) -> usize {
    let total = per_series * channels;
    if !cfg.enabled {
        return total;
    }
    let kept = cfg.kept_per_series(per_series) * channels;
    kept + cfg.merged.min(total - kept)
}

/// Which context rows survive and how the rest are grouped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalPlan {
    /// Kept context rows and all non-context rows, in original order.
    pub keep_rows: Vec<usize>,
    /// Context rows of each merge group, in rank order.
    pub groups: Vec<Vec<usize>>,
}

/// Ranks context rows by score (descending, lower row first on ties) and
/// splits them into kept rows and merge groups.
pub fn plan_retrieval(
    meta: &[TokenMeta],
    scores: &[f64],
    context_rows: &[usize],
    channels: usize,
    cfg: &RetrievalConfig,
) -> RetrievalPlan {
    let n_ctx = context_rows.len();
    let per_series = n_ctx.checked_div(channels).unwrap_or(0);
    let k = (cfg.kept_per_series(per_series) * channels).min(n_ctx);

    let mut order: Vec<usize> = (0..n_ctx).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(context_rows[a].cmp(&context_rows[b]))
    });
    let mut kept = vec![false; meta.len()];
    for &i in &order[..k] {
        kept[context_rows[i]] = true;
    }
    let is_ctx: Vec<bool> = meta.iter().map(|m| m.kind == TokenKind::Context).collect();
    let keep_rows = (0..meta.len()).filter(|&r| !is_ctx[r] || kept[r]).collect();

    let rest: Vec<usize> = order[k..].iter().map(|&i| context_rows[i]).collect();
    let p = rest.len();
    let groups_n = cfg.merged.min(p);
    let mut groups = Vec::with_capacity(groups_n);
    if let Some(base) = p.checked_div(groups_n) {
        let extra = p % groups_n;
        let mut at = 0;
        for g in 0..groups_n {
            let size = base + usize::from(g < extra);
            groups.push(rest[at..at + size].to_vec());
            at += size;
        }
    }
    RetrievalPlan { keep_rows, groups }
}

/// Result of running retrieval on a tape.
pub struct TapeRetrieval {
    pub tokens: Var,
    pub meta: Vec<TokenMeta>,
    /// Average similarity of every context row (indexed like `context_rows`).
    pub scores: Vec<f64>,
    pub context_rows: Vec<usize>,
}

/// Retrieval recorded on `tape`. `tokens` holds one token per row; `weight`
/// is `[δ × width]` and `bias` `[δ]`.
pub fn retrieve_on_tape<T: Real>(
    tape: &mut Tape<'_, T>,
    tokens: Var,
    meta: &[TokenMeta],
    channels: usize,
    cfg: &RetrievalConfig,
    weight: Var,
    bias: Var,
) -> Result<TapeRetrieval> {
    let context_rows: Vec<usize> = meta
        .iter()
        .enumerate()
        .filter(|(_, m)| m.kind == TokenKind::Context)
        .map(|(i, _)| i)
        .collect();
    let target_rows: Vec<usize> = meta
        .iter()
        .enumerate()
        .filter(|(_, m)| m.kind == TokenKind::Target)
        .map(|(i, _)| i)
        .collect();
    if target_rows.is_empty() {
        return Err(Error::Config("retrieval needs at least one target token".into()));
    }
    if !cfg.enabled || context_rows.is_empty() {
        return Ok(TapeRetrieval {
            tokens,
            meta: meta.to_vec(),
            scores: Vec::new(),
            context_rows,
        });
    }

    let latent = tape.linear(tokens, weight, bias);
    let unit = tape.row_normalize(latent);
    let ctx = tape.gather_rows(unit, &context_rows);
    let tgt = tape.gather_rows(unit, &target_rows);
    let sims = tape.matmul_nt(ctx, tgt);
    let c = target_rows.len();
    let avg_w = tape.constant(Tensor::full(&[c, 1], T::lit(1.0 / c as f64)));
    let avg = tape.matmul(sims, avg_w);
    let scores: Vec<f64> = tape.value(avg).data().iter().map(|v| v.as_f64()).collect();

    let plan = plan_retrieval(meta, &scores, &context_rows, channels, cfg);
    let kept = tape.gather_rows(tokens, &plan.keep_rows);
    let mut parts = vec![kept];
    let mut out_meta: Vec<TokenMeta> = plan.keep_rows.iter().map(|&r| meta[r].clone()).collect();

    let pos_of: std::collections::HashMap<usize, usize> =
        context_rows.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    for (g, rows) in plan.groups.iter().enumerate() {
        let idx: Vec<usize> = rows.iter().map(|r| pos_of[r]).collect();
        let logits = tape.gather_rows(avg, &idx);
        let logits = tape.transpose(logits);
        let weights = tape.softmax_rows(logits);
        let members = tape.gather_rows(tokens, rows);
        parts.push(tape.matmul(weights, members));
        out_meta.push(TokenMeta {
            series: None,
            sample: None,
            recency: g,
            kind: TokenKind::Merged,
            offset: 0.0,
        });
    }
    let tokens = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)
    };
    Ok(TapeRetrieval {
        tokens,
        meta: out_meta,
        scores,
        context_rows,
    })
}

/// Retrieval outside any training tape.
pub fn retrieve_tokens<T: Real>(
    tm: &TokenMatrix<T>,
    cfg: &RetrievalConfig,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<TokenMatrix<T>> {
    check_projection(tm, cfg, weight, bias)?;
    let mut tape = Tape::new();
    let tokens = tape.constant_ref(&tm.tokens);
    let w = tape.constant_ref(weight);
    let b = tape.constant_ref(bias);
    let channels = tm.rows_of(TokenKind::Target).len();
    let out = retrieve_on_tape(&mut tape, tokens, &tm.meta, channels, cfg, w, b)?;
    Ok(TokenMatrix {
        tokens: tape.value(out.tokens).clone(),
        meta: out.meta,
        dims: tm.dims,
    })
}

fn check_projection<T: Real>(
    tm: &TokenMatrix<T>,
    cfg: &RetrievalConfig,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<()> {
    cfg.validate()?;
    if weight.rows() != cfg.latent_dim || weight.cols() != tm.dims.width() || bias.len() != cfg.latent_dim {
        return Err(Error::Shape(format!(
            "retrieval projection {:?}/{:?} does not match δ={} and token width {}",
            weight.shape(),
            bias.shape(),
            cfg.latent_dim,
            tm.dims.width()
        )));
    }
    Ok(())
}

/// Average target similarity of every context token, as `(row, score)`.
pub fn similarity_scores<T: Real>(
    tm: &TokenMatrix<T>,
    cfg: &RetrievalConfig,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Vec<(usize, f64)>> {
    check_projection(tm, cfg, weight, bias)?;
    let mut tape = Tape::new();
    let tokens = tape.constant_ref(&tm.tokens);
    let w = tape.constant_ref(weight);
    let b = tape.constant_ref(bias);
    let channels = tm.rows_of(TokenKind::Target).len();
    let on = RetrievalConfig { enabled: true, ..*cfg };
    let out = retrieve_on_tape(&mut tape, tokens, &tm.meta, channels, &on, w, b)?;
    Ok(out.context_rows.into_iter().zip(out.scores).collect())
}

/// Context-token meta plus score, one row per context token.
pub fn write_scores_csv<T: Real>(tm: &TokenMatrix<T>, scores: &[(usize, f64)], path: &Path) -> Result<()> {
    let mut out = String::from("row,series,sample,recency,score\n");
    for &(r, s) in scores {
        let m = &tm.meta[r];
        out += &format!(
            "{r},{},{},{},{s}\n",
            m.series.map(|v| v.to_string()).unwrap_or_default(),
            m.sample.map(|v| v.to_string()).unwrap_or_default(),
            m.recency
        );
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{build_tokens, TokenDims};

    fn meta(kind: TokenKind, series: usize) -> TokenMeta {
        TokenMeta {
            series: Some(series),
            sample: None,
            recency: 0,
            kind,
            offset: 0.0,
        }
    }

    #[test]
    fn keep_all_is_identity() {
        let w = Tensor::matrix(2, 30, (0..60).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let tm = build_tokens(&w, 6, 3, 2, 0).unwrap();
        let cfg = RetrievalConfig {
            latent_dim: 4,
            keep_fraction: 1.0,
            merged: 5,
            enabled: true,
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let wt = Tensor::normal(&[4, 9], 1.0, &mut rng);
        let b = Tensor::normal(&[4], 1.0, &mut rng);
        assert_eq!(retrieve_tokens(&tm, &cfg, &wt, &b).unwrap(), tm);
        let off = RetrievalConfig { enabled: false, ..cfg };
        assert_eq!(retrieve_tokens(&tm, &off, &wt, &b).unwrap(), tm);
    }

    #[test]
    fn singleton_group_is_the_token_itself() {
        // Identity projection on 2-d tokens; target points along x.
        let tokens = Tensor::from_rows(&[vec![1.0, 0.1], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let tm = TokenMatrix {
            tokens,
            meta: vec![
                meta(TokenKind::Context, 0),
                meta(TokenKind::Context, 0),
                meta(TokenKind::Target, 0),
            ],
            dims: TokenDims {
                lookback: 1,
                horizon: 1,
                channels: 1,
                step: 1,
            },
        };
        let cfg = RetrievalConfig {
            latent_dim: 2,
            keep_fraction: 0.5,
            merged: 1,
            enabled: true,
        };
        let out = retrieve_tokens(&tm, &cfg, &Tensor::identity(2), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.tokens.row(0), &[1.0, 0.1]);
        assert_eq!(out.tokens.row(1), &[1.0, 0.0]);
        assert_eq!(out.tokens.row(2), &[0.0, 1.0]);
        assert_eq!(out.meta[2].kind, TokenKind::Merged);
    }

    #[test]
    fn fewer_tokens_than_groups() {
        let cfg = RetrievalConfig {
            keep_fraction: 0.5,
            merged: 30,
            ..Default::default()
        };
        assert_eq!(retrieval_count(&cfg, 4, 2), 4 + 4);
        assert_eq!(retrieval_count(&cfg, 0, 2), 0);
    }

    #[test]
    fn count_examples() {
        let cfg = RetrievalConfig::default();
        assert_eq!(retrieval_count(&cfg, 104, 7), 100);
        let cfg = RetrievalConfig {
            merged: 0,
            ..Default::default()
        };
        assert_eq!(retrieval_count(&cfg, 104, 7), 70);
    }

    #[test]
    fn zero_latent_scores_zero() {
        let tm = TokenMatrix {
            tokens: Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            meta: vec![meta(TokenKind::Context, 0), meta(TokenKind::Target, 0)],
            dims: TokenDims {
                lookback: 1,
                horizon: 1,
                channels: 1,
                step: 1,
            },
        };
        let cfg = RetrievalConfig {
            latent_dim: 2,
            ..Default::default()
        };
        let s = similarity_scores(&tm, &cfg, &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(s, vec![(0, 0.0)]);
    }
}

mod common;

use common::{random_window, retrieval_instance, retrieval_oracle, rng};
use ictsp::numerics::Tensor;
use ictsp::retrieval::{retrieval_count, retrieve_tokens, similarity_scores, write_scores_csv, RetrievalConfig};
use ictsp::tokenizer::{build_tokens, contexts_per_series, count_context_tokens, count_formula, TokenKind};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn matches_sorting_oracle() {
    for seed in 0..100 {
        let (tm, cfg, w, b) = retrieval_instance(seed);
        assert!(tm.len() <= 50);
        let out = retrieve_tokens(&tm, &cfg, &w, &b).unwrap();
        let oracle = retrieval_oracle(&tm, &cfg, &w, &b);
        let k = oracle.kept_rows.len();
        assert_eq!(out.len(), k + oracle.merged.len(), "seed {seed}");
        for (i, &r) in oracle.kept_rows.iter().enumerate() {
            assert_eq!(out.tokens.row(i), tm.tokens.row(r), "seed {seed} kept row {i}");
            assert_eq!(out.meta[i], tm.meta[r]);
        }
        for (g, tok) in oracle.merged.iter().enumerate() {
            assert_eq!(out.meta[k + g].kind, TokenKind::Merged);
            for (a, b) in out.tokens.row(k + g).iter().zip(tok) {
                assert!((a - b).abs() < 1e-12, "seed {seed} group {g}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn counts_match_the_pipeline() {
    let mut r = rng(99);
    for _ in 0..200 {
        let c = r.random_range(1..=4);
        let lb = r.random_range(1..=8);
        let lp = r.random_range(1..=5);
        let m = r.random_range(1..=6);
        let li = lb + lp + r.random_range(1..=40);
        let q = r.random_range(0.01..=1.0);
        let merged = r.random_range(0..=10);
        let window = random_window(c, li, &mut r);
        let tm = build_tokens(&window, lb, lp, m, 0).unwrap();
        let (pre, post) = count_context_tokens(li, lb, lp, m, c, q, merged);
        assert_eq!(tm.context_count(), pre);
        let cfg = RetrievalConfig {
            latent_dim: 3,
            keep_fraction: q,
            merged,
            enabled: true,
        };
        let w = Tensor::normal(&[3, lb + lp], 1.0, &mut r);
        let out = retrieve_tokens(&tm, &cfg, &w, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(out.len() - c, post);
        let per = contexts_per_series(li, lb, lp, m, 0);
        assert_eq!(retrieval_count(&cfg, per, c), post);
        let kept = ((q * per as f64 + 1e-9).floor() as usize) * c;
        if (li - lb - lp) % m == 0 && per * c - kept >= merged {
            assert_eq!(post, count_formula(li, lb, lp, m, c, q, merged));
        }
    }
}

#[test]
fn reference_instance_counts() {
    assert_eq!(count_context_tokens(1440, 512, 96, 8, 7, 0.10, 30), (728, 100));
    assert_eq!(count_formula(1440, 512, 96, 8, 7, 0.10, 30), 100);
    let (pre, post) = count_context_tokens(1440, 512, 96, 1, 3, 1.0, 0);
    assert_eq!((pre, post), (832 * 3, 832 * 3));
}

#[test]
fn disabled_is_identity() {
    for seed in 0..10 {
        let (tm, cfg, w, b) = retrieval_instance(seed);
        let off = RetrievalConfig { enabled: false, ..cfg };
        assert_eq!(retrieve_tokens(&tm, &off, &w, &b).unwrap(), tm);
        let all = RetrievalConfig {
            keep_fraction: 1.0,
            ..cfg
        };
        assert_eq!(retrieve_tokens(&tm, &all, &w, &b).unwrap(), tm);
    }
}

#[test]
fn ranking_ignores_token_scale() {
    for seed in 0..20 {
        let (tm, cfg, w, _) = retrieval_instance(seed);
        let zero = Tensor::zeros(&[cfg.latent_dim]);
        let base = similarity_scores(&tm, &cfg, &w, &zero).unwrap();
        let mut scaled = tm.clone();
        let ctx = tm.rows_of(TokenKind::Context);
        let pick = ctx[seed as usize % ctx.len()];
        scaled.tokens.row_mut(pick).iter_mut().for_each(|v| *v *= 3.7);
        let after = similarity_scores(&scaled, &cfg, &w, &zero).unwrap();
        for ((r0, s0), (r1, s1)) in base.iter().zip(&after) {
            assert_eq!(r0, r1);
            assert!((s0 - s1).abs() < 1e-12);
        }
    }
}

#[test]
fn ties_prefer_lower_rows() {
    // Four identical context tokens: the kept one must be the first.
    let mut r = rng(5);
    let row: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
    let window = Tensor::matrix(1, 7, [row.clone(), row[..3].to_vec()].concat()).unwrap();
    let mut tm = build_tokens(&window, 2, 2, 1, 0).unwrap();
    for i in tm.rows_of(TokenKind::Context) {
        tm.tokens.row_mut(i).copy_from_slice(&row);
    }
    let cfg = RetrievalConfig {
        latent_dim: 2,
        keep_fraction: 0.34,
        merged: 1,
        enabled: true,
    };
    let w = Tensor::normal(&[2, 4], 1.0, &mut r);
    let out = retrieve_tokens(&tm, &cfg, &w, &Tensor::zeros(&[2])).unwrap();
    assert_eq!(out.meta[0], tm.meta[0]);
}

#[test]
fn scores_csv_has_one_row_per_context() {
    let (tm, cfg, w, b) = retrieval_instance(3);
    let scores = similarity_scores(&tm, &cfg, &w, &b).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.csv");
    write_scores_csv(&tm, &scores, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1 + tm.context_count());
    assert!(text.starts_with("row,series,sample,recency,score"));
}

proptest! {
    #[test]
    fn merged_tokens_stay_in_their_group_hull(seed in 0u64..10_000) {
        let (tm, cfg, w, b) = retrieval_instance(seed);
        let out = retrieve_tokens(&tm, &cfg, &w, &b).unwrap();
        let ctx = tm.rows_of(TokenKind::Context);
        let scores = similarity_scores(&tm, &cfg, &w, &b).unwrap();
        let mut order: Vec<usize> = (0..ctx.len()).collect();
        order.sort_by(|&a, &b| scores[b].1.partial_cmp(&scores[a].1).unwrap());
        let merged = out.rows_of(TokenKind::Merged);
        let kept = out.len() - merged.len() - tm.rows_of(TokenKind::Target).len();
        let rest = &order[kept..];
        let mut at = 0;
        for (g, &row) in merged.iter().enumerate() {
            let size = rest.len() / merged.len() + usize::from(g < rest.len() % merged.len());
            let members = &rest[at..at + size];
            at += size;
            for col in 0..tm.tokens.cols() {
                let vals: Vec<f64> = members.iter().map(|&o| tm.tokens.get(ctx[o], col)).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = out.tokens.get(row, col);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}

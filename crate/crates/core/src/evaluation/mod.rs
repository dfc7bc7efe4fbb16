//! Full-ranking HR@k and NDCG@k over the whole item vocabulary.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EvalCase;
use crate::encoder::{final_states, score_rows, EncoderParams};
use crate::error::{Error, Result};
use crate::numcore::Scalar;

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub n_users: usize,
}

impl EvalResult {
    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }
}

/// 1-based rank of `target` among items `1..=|V|`, where `scores[i]` is the
/// score of item `i` and `scores[0]` is ignored. Every other candidate
/// scoring at least as high as the target is ranked ahead of it. Items in
/// `skip` (sorted) other than the target are left out of the ranking.
pub fn rank_of_target<S: Scalar>(scores: &[S], target: u32, skip: &[u32]) -> Result<usize> {
    let t = target as usize;
    if t == 0 || t >= scores.len() {
        return Err(Error::Usage(format!("target {target} outside 1..={}", scores.len().saturating_sub(1))));
    }
    if let Some(bad) = scores[1..].iter().find(|s| !s.is_finite()) {
        return Err(Error::numeric("evaluate", format!("non-finite score {bad:?}")));
    }
    let st = scores[t];
    let ahead = scores
        .iter()
        .enumerate()
        .skip(1)
        .filter(|&(i, &s)| i != t && s >= st && skip.binary_search(&(i as u32)).is_err())
        .count();
    Ok(ahead + 1)
}

/// Aggregates per-user ranks into HR@k and NDCG@k for every `k` in `ks`.
pub fn metrics_from_ranks(ranks: &[usize], ks: &[usize]) -> Result<EvalResult> {
    if ranks.is_empty() {
        return Err(Error::Usage("empty evaluation set".into()));
    }
    let n = ranks.len() as f64;
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        let hits = ranks.iter().filter(|&&r| r <= k).count();
        let gain: f64 = ranks
            .iter()
            .filter(|&&r| r <= k)
            .map(|&r| 1.0 / ((r + 1) as f64).log2())
            .sum();
        hr.insert(k, hits as f64 / n);
        ndcg.insert(k, gain / n);
    }
    Ok(EvalResult {
        hr,
        ndcg,
        n_users: ranks.len(),
    })
}

/// Metrics for a precomputed score matrix `[users, |V| + 1]`.
pub fn evaluate_scores<S: Scalar>(scores: &[S], targets: &[u32], ks: &[usize]) -> Result<EvalResult> {
    if targets.is_empty() {
        return Err(Error::Usage("empty evaluation set".into()));
    }
    let width = scores.len() / targets.len();
    if width * targets.len() != scores.len() {
        return Err(Error::dim("evaluate", "score matrix does not split into one row per target"));
    }
    let ranks = targets
        .iter()
        .enumerate()
        .map(|(u, &t)| rank_of_target(&scores[u * width..(u + 1) * width], t, &[]))
        .collect::<Result<Vec<_>>>()?;
    metrics_from_ranks(&ranks, ks)
}

/// Ranks of each case's target under the model, in case order.
pub fn rank_cases<S: Scalar>(params: &EncoderParams<S>, cases: &[EvalCase], filter_seen: bool) -> Result<Vec<usize>> {
    let d = params.config.dim;
    let chunks: Vec<Result<Vec<usize>>> = cases
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let contexts: Vec<&[u32]> = chunk.iter().map(|c| c.context.as_slice()).collect();
            let last = final_states(params, &contexts)?;
            let scores = score_rows(params.item_embeddings.data(), d, &last);
            let width = params.config.n_items + 1;
            chunk
                .iter()
                .enumerate()
                .map(|(r, case)| {
                    let skip = if filter_seen {
                        let mut s = case.context.clone();
                        s.sort_unstable();
                        s.dedup();
                        s
                    } else {
                        Vec::new()
                    };
                    rank_of_target(&scores[r * width..(r + 1) * width], case.target, &skip)
                })
                .collect()
        })
        .collect();
    let mut ranks = Vec::with_capacity(cases.len());
    for c in chunks {
        ranks.extend(c?);
    }
    Ok(ranks)
}

/// Scores every item for each case's context and ranks its target.
pub fn evaluate<S: Scalar>(
    params: &EncoderParams<S>,
    cases: &[EvalCase],
    ks: &[usize],
    filter_seen: bool,
) -> Result<EvalResult> {
    if cases.is_empty() {
        return Err(Error::Usage("empty evaluation set".into()));
    }
    let ranks = rank_cases(params, cases, filter_seen)?;
    metrics_from_ranks(&ranks, ks)
}

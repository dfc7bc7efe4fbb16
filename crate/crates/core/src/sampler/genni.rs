use rand::distr::weighted::WeightedIndex;
use rand::seq::index;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use super::draw::{per_row, uniform_one, NegativeDraw, Targets};
use crate::error::{Error, Result};
use crate::numcore::{dot, gemm, Scalar, Tensor};
use crate::rng::Streams;

/// Size of the pre-selected candidate set, `max(1, round(β·|V|))`.
pub fn candidate_count(n_items: usize, beta: f64) -> usize {
    ((beta * n_items as f64).round() as usize).clamp(1, n_items.max(1))
}

/// Second-stage distribution over candidates: `softmax(α·score)` restricted
/// to the allowed entries, which equals the softmax raised to α and
/// renormalized. Disallowed entries get probability 0.
pub fn negative_distribution(scores: &[f64], alpha: f64, allowed: &[bool]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; scores.len()];
    fill_weights(scores, alpha, allowed, &mut out)?;
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|w| *w /= total);
    Ok(out)
}

/// Unnormalized weights `exp(α·(s - max))`; the largest allowed weight is 1.
fn fill_weights(scores: &[f64], alpha: f64, allowed: &[bool], out: &mut [f64]) -> Result<()> {
    if scores.len() != allowed.len() || scores.len() != out.len() {
        return Err(Error::dim("negative_distribution", "scores and mask differ in length"));
    }
    let mut max = f64::NEG_INFINITY;
    for (&s, &ok) in scores.iter().zip(allowed) {
        if !s.is_finite() {
            return Err(Error::numeric("negative_distribution", format!("non-finite score {s}")));
        }
        if ok {
            max = max.max(s);
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::Usage("no allowed candidate".into()));
    }
    for ((w, &s), &ok) in out.iter_mut().zip(scores).zip(allowed) {
        *w = if ok { (alpha * (s - max)).exp() } else { 0.0 };
    }
    Ok(())
}

/// Reusable buffers for [`genni_position`].
#[derive(Debug, Default, Clone)]
pub struct GenniScratch {
    candidates: Vec<u32>,
    scores: Vec<f64>,
    allowed: Vec<bool>,
    weights: Vec<f64>,
}

fn draw_from<R: Rng + ?Sized>(weights: &[f64], candidates: &[u32], out: &mut [u32], rng: &mut R) -> Result<()> {
    let dist = WeightedIndex::new(weights).map_err(|e| Error::numeric("genni", e.to_string()))?;
    for slot in out {
        *slot = candidates[dist.sample(rng)];
    }
    Ok(())
}

/// Appends a uniform `c`-subset of items `1..=n` to `out`. Dense subsets
/// use selection sampling, which yields them in index order.
fn preselect<R: Rng + ?Sized>(rng: &mut R, n: usize, c: usize, out: &mut Vec<u32>) {
    if c * 4 < n {
        out.extend(index::sample(rng, n, c).iter().map(|i| i as u32 + 1));
        return;
    }
    let mut needed = c;
    for i in 0..n {
        if needed == 0 {
            break;
        }
        if rng.random_range(0..n - i) < needed {
            out.push(i as u32 + 1);
            needed -= 1;
        }
    }
}

/// Two-stage draw for one position.
///
/// Stage 1 picks `max(1, round(β·|V|))` items uniformly without replacement
/// from the whole vocabulary; stage 2 scores every one of them against `h`
/// and draws `out.len()` negatives with replacement from
/// [`negative_distribution`], never returning an excluded item. If the
/// subset contains only excluded items it is redrawn before scoring.
///
/// `embeddings` is the `[|V| + 1, d]` table with the padding row first.
/// Returns the number of items scored.
#[allow(clippy::too_many_arguments)]
pub fn genni_position<S: Scalar, R: Rng + ?Sized>(
    h: &[S],
    embeddings: &[S],
    alpha: f64,
    beta: f64,
    excluded: &dyn Fn(u32) -> bool,
    out: &mut [u32],
    rng: &mut R,
    scratch: &mut GenniScratch,
) -> Result<usize> {
    let d = h.len();
    if d == 0 || !embeddings.len().is_multiple_of(d) || embeddings.len() / d < 3 {
        return Err(Error::dim("genni", "embedding table must be [|V| + 1, d] with |V| >= 2"));
    }
    let n = embeddings.len() / d - 1;
    let c = candidate_count(n, beta);
    let cand = &mut scratch.candidates;
    for attempt in 0.. {
        cand.clear();
        if c == n {
            cand.extend(1..=n as u32);
        } else {
            preselect(rng, n, c, cand);
        }
        if !cand.iter().all(|&i| excluded(i)) {
            break;
        }
        if c == n || attempt >= 10_000 {
            return Err(Error::Usage("every candidate item is excluded".into()));
        }
    }
    scratch.scores.clear();
    scratch
        .scores
        .extend(cand.iter().map(|&i| dot(h, &embeddings[i as usize * d..(i as usize + 1) * d]).as_f64()));
    scratch.allowed.clear();
    scratch.allowed.extend(cand.iter().map(|&i| !excluded(i)));
    scratch.weights.resize(c, 0.0);
    fill_weights(&scratch.scores, alpha, &scratch.allowed, &mut scratch.weights)?;
    draw_from(&scratch.weights, cand, out, rng)?;
    Ok(c)
}

/// GenNi negatives for a whole batch of hidden states `[B·T, d]`.
///
/// With `shared` set, or whenever the candidate set is the full vocabulary,
/// every position of the batch scores the same subset through one matrix
/// product per row. Padding positions receive uniform draws and score
/// nothing.
#[allow(clippy::too_many_arguments)]
pub fn genni_sample<S: Scalar>(
    hidden: &[S],
    embeddings: &Tensor<S>,
    targets: &Targets,
    alpha: f64,
    beta: f64,
    k: usize,
    shared: bool,
    streams: &Streams,
) -> Result<NegativeDraw> {
    if !(beta > 0.0 && beta <= 1.0) || !(alpha >= 0.0) || k == 0 {
        return Err(Error::Usage(format!(
            "genni needs alpha >= 0, beta in (0, 1], k >= 1; got {alpha}, {beta}, {k}"
        )));
    }
    let d = embeddings.last_dim();
    let n = embeddings.rows().saturating_sub(1);
    if n < 2 {
        return Err(Error::Usage(format!("genni sampling needs at least 2 items, got {n}")));
    }
    if hidden.len() != targets.positions() * d {
        return Err(Error::dim(
            "genni",
            format!("{} hidden values for {} positions of width {d}", hidden.len(), targets.positions()),
        ));
    }
    targets.check_drawable(n)?;
    let table = embeddings.data();
    let t = targets.max_len;
    let c = candidate_count(n, beta);

    if c < n && !shared {
        return per_row(targets, k, streams, |row, rng, idx, counts| {
            let mut scratch = GenniScratch::default();
            for i in 0..t {
                let pos = row * t + i;
                let out = &mut idx[i * k..(i + 1) * k];
                if targets.target(pos) == 0 {
                    out.iter_mut().for_each(|s| *s = uniform_one(targets, pos, n, rng));
                    continue;
                }
                let h = &hidden[pos * d..(pos + 1) * d];
                let excluded = |item: u32| targets.excluded(pos, item);
                counts[i] = genni_position(h, table, alpha, beta, &excluded, out, rng, &mut scratch)? as u32;
            }
            Ok(())
        });
    }

    let candidates: Vec<u32> = if c == n {
        (1..=n as u32).collect()
    } else {
        let mut rng = streams.stream(u64::MAX);
        let mut cand = Vec::with_capacity(c);
        preselect(&mut rng, n, c, &mut cand);
        cand
    };
    let gathered: Vec<S>;
    let cand_table: &[S] = if c == n {
        &table[d..]
    } else {
        gathered = candidates
            .iter()
            .flat_map(|&i| table[i as usize * d..(i as usize + 1) * d].iter().copied())
            .collect();
        &gathered
    };
    per_row(targets, k, streams, |row, rng, idx, counts| {
        let mut scores = vec![S::zero(); t * c];
        gemm(t, d, c, &hidden[row * t * d..(row + 1) * t * d], false, cand_table, true, &mut scores, false);
        let mut scratch = GenniScratch::default();
        let mut row_scores = vec![0.0; c];
        let mut allowed = vec![false; c];
        let mut weights = vec![0.0; c];
        for i in 0..t {
            let pos = row * t + i;
            let out = &mut idx[i * k..(i + 1) * k];
            if targets.target(pos) == 0 {
                out.iter_mut().for_each(|s| *s = uniform_one(targets, pos, n, rng));
                continue;
            }
            for (j, &item) in candidates.iter().enumerate() {
                row_scores[j] = scores[i * c + j].as_f64();
                allowed[j] = !targets.excluded(pos, item);
            }
            if allowed.iter().any(|&a| a) {
                fill_weights(&row_scores, alpha, &allowed, &mut weights)?;
                draw_from(&weights, &candidates, out, rng)?;
                counts[i] = c as u32;
            } else {
                let h = &hidden[pos * d..(pos + 1) * d];
                let excluded = |item: u32| targets.excluded(pos, item);
                counts[i] = genni_position(h, table, alpha, beta, &excluded, out, rng, &mut scratch)? as u32;
            }
        }
        Ok(())
    })
}

/// The `top_n` most probable negatives for hidden state `h` under the full
/// vocabulary distribution with exponent `alpha`, most probable first.
pub fn inspect_informative_negatives<S: Scalar>(
    h: &[S],
    embeddings: &Tensor<S>,
    alpha: f64,
    target: Option<u32>,
    top_n: usize,
) -> Result<Vec<(u32, f64)>> {
    let d = embeddings.last_dim();
    if h.len() != d {
        return Err(Error::dim("inspect", format!("hidden width {} vs embedding width {d}", h.len())));
    }
    let n = embeddings.rows().saturating_sub(1);
    let table = embeddings.data();
    let scores: Vec<f64> = (1..=n).map(|i| dot(h, &table[i * d..(i + 1) * d]).as_f64()).collect();
    let allowed: Vec<bool> = (1..=n as u32).map(|i| Some(i) != target).collect();
    let probs = negative_distribution(&scores, alpha, &allowed)?;
    let mut ranked: Vec<(u32, f64)> = (1..=n as u32)
        .zip(probs)
        .filter(|&(i, _)| Some(i) != target)
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_n);
    Ok(ranked)
}

/// One line of the negative-sample diagnostics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub step: u64,
    pub position: usize,
    pub topn: Vec<(u32, f64)>,
}

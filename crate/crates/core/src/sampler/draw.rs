use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use rayon::prelude::*;

use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::rng::Streams;

/// Positions to draw negatives for, with the items each must avoid.
///
/// A target of 0 marks a padding position: it still receives draws so the
/// output keeps its `[B, T, k]` shape, but nothing is excluded there beyond
/// the padding index itself.
#[derive(Debug, Clone)]
pub struct Targets<'a> {
    pub rows: usize,
    pub max_len: usize,
    pub items: &'a [u32],
    history: Vec<Vec<u32>>,
}

impl<'a> Targets<'a> {
    pub fn new(rows: usize, max_len: usize, items: &'a [u32]) -> Result<Self> {
        if items.len() != rows * max_len {
            return Err(Error::dim(
                "targets",
                format!("{} targets for {rows} x {max_len}", items.len()),
            ));
        }
        Ok(Targets {
            rows,
            max_len,
            items,
            history: Vec::new(),
        })
    }

    pub fn from_batch(batch: &'a SequenceBatch) -> Self {
        Targets {
            rows: batch.rows,
            max_len: batch.max_len,
            items: &batch.targets,
            history: Vec::new(),
        }
    }

    /// Additionally excludes every item of `histories[r]` from row `r`.
    pub fn with_history(mut self, histories: &[&[u32]]) -> Result<Self> {
        if histories.len() != self.rows {
            return Err(Error::dim(
                "targets",
                format!("{} histories for {} rows", histories.len(), self.rows),
            ));
        }
        self.history = histories
            .iter()
            .map(|h| {
                let mut v = h.to_vec();
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect();
        Ok(self)
    }

    pub fn positions(&self) -> usize {
        self.items.len()
    }

    pub fn target(&self, pos: usize) -> u32 {
        self.items[pos]
    }

    /// Whether `item` may not be drawn at flat position `pos`.
    pub fn excluded(&self, pos: usize, item: u32) -> bool {
        item == 0
            || item == self.items[pos]
            || self
                .history
                .get(pos / self.max_len)
                .is_some_and(|h| h.binary_search(&item).is_ok())
    }

    /// Number of drawable items at `pos` out of `1..=n_items`.
    pub fn allowed(&self, pos: usize, n_items: usize) -> usize {
        let target = self.items[pos];
        let mut banned = self
            .history
            .get(pos / self.max_len)
            .map_or(0, |h| h.iter().filter(|&&i| i != 0 && i as usize <= n_items).count());
        let target_in_history = self
            .history
            .get(pos / self.max_len)
            .is_some_and(|h| h.binary_search(&target).is_ok());
        if target != 0 && target as usize <= n_items && !target_in_history {
            banned += 1;
        }
        n_items - banned
    }

    pub(crate) fn check_drawable(&self, n_items: usize) -> Result<()> {
        for pos in 0..self.positions() {
            if self.allowed(pos, n_items) == 0 {
                return Err(Error::Usage(format!(
                    "no item left to draw at position {pos} of {n_items} items"
                )));
            }
        }
        Ok(())
    }
}

/// Sampled negatives, `indices[(b * T + t) * k + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeDraw {
    pub rows: usize,
    pub max_len: usize,
    pub k: usize,
    pub indices: Vec<u32>,
    /// Items scored in the second stage at each position; 0 for samplers
    /// that do not score.
    pub candidate_count: Vec<u32>,
}

impl NegativeDraw {
    pub(crate) fn empty(rows: usize, max_len: usize, k: usize) -> Self {
        NegativeDraw {
            rows,
            max_len,
            k,
            indices: vec![0; rows * max_len * k],
            candidate_count: vec![0; rows * max_len],
        }
    }

    pub fn at(&self, pos: usize) -> &[u32] {
        &self.indices[pos * self.k..(pos + 1) * self.k]
    }

    pub fn scored_total(&self) -> u64 {
        self.candidate_count.iter().map(|&c| c as u64).sum()
    }
}

pub(crate) fn uniform_one<R: Rng + ?Sized>(targets: &Targets, pos: usize, n_items: usize, rng: &mut R) -> u32 {
    loop {
        let item = rng.random_range(1..=n_items as u32);
        if !targets.excluded(pos, item) {
            return item;
        }
    }
}

/// Runs `fill(row, rng, indices, counts)` over rows in parallel, each row on
/// its own substream.
pub(crate) fn per_row<F>(targets: &Targets, k: usize, streams: &Streams, fill: F) -> Result<NegativeDraw>
where
    F: Fn(usize, &mut crate::rng::RunRng, &mut [u32], &mut [u32]) -> Result<()> + Sync,
{
    let mut out = NegativeDraw::empty(targets.rows, targets.max_len, k);
    let t = targets.max_len;
    if t == 0 {
        return Ok(out);
    }
    out.indices
        .par_chunks_mut(t * k)
        .zip(out.candidate_count.par_chunks_mut(t))
        .enumerate()
        .try_for_each(|(row, (idx, counts))| {
            let mut rng = streams.stream(row as u64);
            fill(row, &mut rng, idx, counts)
        })?;
    Ok(out)
}

/// Draws `k` negatives per position uniformly from `1..=n_items` minus the
/// excluded items, by rejection.
pub fn sample_uniform(targets: &Targets, n_items: usize, k: usize, streams: &Streams) -> Result<NegativeDraw> {
    if n_items < 2 {
        return Err(Error::Usage(format!("uniform sampling needs at least 2 items, got {n_items}")));
    }
    if k == 0 {
        return Err(Error::Usage("k must be >= 1".into()));
    }
    targets.check_drawable(n_items)?;
    let t = targets.max_len;
    per_row(targets, k, streams, |row, rng, idx, _| {
        for (i, slot) in idx.iter_mut().enumerate() {
            *slot = uniform_one(targets, row * t + i / k, n_items, rng);
        }
        Ok(())
    })
}

/// Draws items with probability proportional to `popularity[i]^γ`.
#[derive(Debug, Clone)]
pub struct PopularitySampler {
    weights: Vec<f64>,
    alias: WeightedAliasIndex<f64>,
}

impl PopularitySampler {
    /// `popularity` is indexed by item, with entry 0 for padding.
    pub fn new(popularity: &[u64], gamma: f64) -> Result<Self> {
        if popularity.len() < 3 {
            return Err(Error::Usage("popularity sampling needs at least 2 items".into()));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::Usage(format!("gamma must be >= 0, got {gamma}")));
        }
        let weights: Vec<f64> = popularity[1..].iter().map(|&c| (c as f64).powf(gamma)).collect();
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::numeric("popularity", format!("count^{gamma} overflows")));
        }
        let alias = WeightedAliasIndex::new(weights.clone())
            .map_err(|e| Error::Usage(format!("popularity weights: {e}")))?;
        Ok(PopularitySampler { weights, alias })
    }

    pub fn n_items(&self) -> usize {
        self.weights.len()
    }

    /// Normalized probability of each item `1..=|V|` before exclusion.
    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }

    fn one<R: Rng + ?Sized>(&self, targets: &Targets, pos: usize, rng: &mut R) -> Result<u32> {
        // Rejection is exact; it only needs a bound for pathological masses.
        for _ in 0..10_000 {
            let item = self.alias.sample(rng) as u32 + 1;
            if !targets.excluded(pos, item) {
                return Ok(item);
            }
        }
        let allowed: Vec<(u32, f64)> = (1..=self.weights.len() as u32)
            .filter(|&i| !targets.excluded(pos, i))
            .map(|i| (i, self.weights[i as usize - 1]))
            .collect();
        let total: f64 = allowed.iter().map(|p| p.1).sum();
        if !(total > 0.0) {
            return Err(Error::Usage(format!("no popularity mass left at position {pos}")));
        }
        let mut u = rng.random::<f64>() * total;
        for &(item, w) in &allowed {
            if u < w {
                return Ok(item);
            }
            u -= w;
        }
        Ok(allowed.iter().rev().find(|p| p.1 > 0.0).expect("positive mass").0)
    }

    pub fn sample(&self, targets: &Targets, k: usize, streams: &Streams) -> Result<NegativeDraw> {
        if k == 0 {
            return Err(Error::Usage("k must be >= 1".into()));
        }
        targets.check_drawable(self.weights.len())?;
        let t = targets.max_len;
        per_row(targets, k, streams, |row, rng, idx, _| {
            for (i, slot) in idx.iter_mut().enumerate() {
                *slot = self.one(targets, row * t + i / k, rng)?;
            }
            Ok(())
        })
    }
}

//! Synthetic interaction logs driven by a low-rank Markov chain over items.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Interaction, InteractionLog};
use crate::error::{Error, Result};
use crate::rng::{purpose, substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transition {
    /// Next item drawn from `softmax(score / temperature)`, where the score
    /// mixes the last `order` items.
    Markov {
        #[serde(default = "one_usize")]
        order: usize,
        #[serde(default = "one")]
        temperature: f64,
    },
    /// First-order chain plus a planted pair: outside the held-out users,
    /// `first` is always followed directly by `second`; held-out users see
    /// `first` but never immediately followed by `second`, and their
    /// sequences end on `first` and one more item.
    PlantedConfounder {
        #[serde(default = "one")]
        temperature: f64,
        #[serde(default = "held_out_fraction")]
        held_out: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn held_out_fraction() -> f64 {
    0.1
}

impl Default for Transition {
    fn default() -> Self {
        Transition::Markov {
            order: 1,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub mean_len: f64,
    #[serde(default)]
    pub transition: Transition,
    #[serde(default)]
    pub seed: u64,
    /// Rank of the item factors behind the transition scores.
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Standard deviation of the low-rank part of a transition score.
    #[serde(default = "default_signal")]
    pub signal: f64,
    /// Zipf exponent of the popularity term added to every score.
    #[serde(default = "one")]
    pub popularity_skew: f64,
}

fn default_rank() -> usize {
    8
}

fn default_signal() -> f64 {
    3.0
}

/// Sequences shorter than this would not survive 5-core filtering.
const MIN_LEN: usize = 5;

impl SyntheticSpec {
    pub fn markov(n_users: usize, n_items: usize, mean_len: f64, seed: u64) -> Self {
        SyntheticSpec {
            n_users,
            n_items,
            mean_len,
            transition: Transition::default(),
            seed,
            rank: default_rank(),
            signal: default_signal(),
            popularity_skew: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(format!("synthetic: {m}")));
        if self.n_users == 0 || self.n_items < 3 {
            return bad("needs at least one user and three items".into());
        }
        if !(self.mean_len >= 1.0 && self.mean_len.is_finite()) {
            return bad(format!("mean_len must be >= 1, got {}", self.mean_len));
        }
        if self.rank == 0 || !(self.signal >= 0.0) || !(self.popularity_skew >= 0.0) {
            return bad("rank must be >= 1, signal and popularity_skew >= 0".into());
        }
        match self.transition {
            Transition::Markov { order, temperature } => {
                if order == 0 || !(temperature > 0.0) {
                    return bad("markov needs order >= 1 and temperature > 0".into());
                }
            }
            Transition::PlantedConfounder { temperature, held_out } => {
                if !(temperature > 0.0) || !(0.0..1.0).contains(&held_out) {
                    return bad("planted confounder needs temperature > 0 and held_out in [0, 1)".into());
                }
            }
        }
        Ok(())
    }
}

/// Generated log plus what was planted in it.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub log: InteractionLog,
    /// Users whose histories avoid the planted transition.
    pub held_out: Vec<String>,
    /// The planted `(first, second)` item pair, if any.
    pub pair: Option<(String, String)>,
}

pub fn user_id(u: usize) -> String {
    format!("u{u}")
}

pub fn item_id(i: usize) -> String {
    format!("i{i}")
}

struct Chain {
    left: Vec<Vec<f64>>,
    right: Vec<Vec<f64>>,
    bias: Vec<f64>,
    temperature: f64,
}

impl Chain {
    /// Item `0..n` distribution following `history` (most recent last).
    fn next(&self, history: &[usize], order: usize) -> Vec<f64> {
        let r = self.left[0].len();
        let mut ctx = vec![0.0; r];
        let mut weight = 1.0;
        for &prev in history.iter().rev().take(order) {
            for (c, l) in ctx.iter_mut().zip(&self.left[prev]) {
                *c += weight * l;
            }
            weight *= 0.5;
        }
        let scores: Vec<f64> = self
            .right
            .iter()
            .zip(&self.bias)
            .map(|(v, b)| (ctx.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() + b) / self.temperature)
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        scores.iter().map(|s| (s - max).exp()).collect()
    }

    fn start(&self) -> Vec<f64> {
        let max = self.bias.iter().copied().fold(f64::NEG_INFINITY, f64::max) / self.temperature;
        self.bias.iter().map(|b| (b / self.temperature - max).exp()).collect()
    }
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize> {
    let dist = WeightedIndex::new(weights).map_err(|e| Error::numeric("synthetic", e.to_string()))?;
    Ok(dist.sample(rng))
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let n = spec.n_items;
    let mut rng = substream(spec.seed, &[purpose::SYNTHETIC]);
    let scale = (spec.signal / (spec.rank as f64).sqrt()).sqrt();
    let factors = |rng: &mut crate::rng::RunRng| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..spec.rank).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    };
    let left = factors(&mut rng);
    let right = factors(&mut rng);
    let bias = (0..n).map(|i| -spec.popularity_skew * ((i + 1) as f64).ln()).collect();
    let (order, temperature, planted) = match spec.transition {
        Transition::Markov { order, temperature } => (order, temperature, None),
        Transition::PlantedConfounder { temperature, held_out } => (1, temperature, Some(held_out)),
    };
    let chain = Chain {
        left,
        right,
        bias,
        temperature,
    };
    let extra = (spec.mean_len - MIN_LEN as f64).max(0.0);
    let length = Geometric::new(1.0 / (extra + 1.0)).map_err(|e| Error::Usage(e.to_string()))?;
    // planted pair: two mid-popularity items
    let (first, second) = (n / 3, n / 3 + 1);
    let held_cut = planted.map_or(spec.n_users, |f| spec.n_users - (f * spec.n_users as f64).round() as usize);

    let mut records = Vec::new();
    let mut held_out = Vec::new();
    for u in 0..spec.n_users {
        let len = MIN_LEN + length.sample(&mut rng) as usize;
        let is_held = u >= held_cut;
        let mut seq: Vec<usize> = Vec::with_capacity(len);
        while seq.len() < len {
            let weights = if seq.is_empty() { chain.start() } else { chain.next(&seq, order) };
            let mut item = pick(&weights, &mut rng)?;
            if planted.is_some() {
                if seq.last() == Some(&first) {
                    if is_held {
                        while item == second {
                            item = pick(&weights, &mut rng)?;
                        }
                    } else {
                        item = second;
                    }
                } else if !is_held && rng.random_bool(0.15) {
                    item = first;
                }
            }
            seq.push(item);
        }
        if planted.is_some() && is_held {
            // end on `first` followed by anything but `second`
            let weights = chain.next(&[first], 1);
            let mut last = pick(&weights, &mut rng)?;
            while last == second || last == first {
                last = pick(&weights, &mut rng)?;
            }
            let cut = seq.len() - 2;
            seq.truncate(cut);
            if seq.last() == Some(&first) {
                seq.pop();
                seq.push((first + 2) % n);
            }
            seq.push(first);
            seq.push(last);
            held_out.push(user_id(u));
        }
        let mut ts = 1_000_000 * u as i64;
        for &item in &seq {
            ts += rng.random_range(1..=60);
            records.push(Interaction::new(user_id(u), item_id(item), ts));
        }
    }
    Ok(SyntheticData {
        log: InteractionLog::new(records),
        held_out,
        pair: planted.map(|_| (item_id(first), item_id(second))),
    })
}

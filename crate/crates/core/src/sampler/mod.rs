//! Negative item samplers: uniform, popularity^γ and the model-conditioned
//! GenNi sampler with uniform pre-selection and an adaptive difficulty
//! exponent.

mod draw;
mod genni;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use draw::{sample_uniform, NegativeDraw, PopularitySampler, Targets};
pub use genni::{
    candidate_count, genni_position, genni_sample, inspect_informative_negatives, negative_distribution,
    DiagnosticRecord, GenniScratch,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Uniform,
    Popularity,
    Genni,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaMode {
    Fixed,
    Gradual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Curriculum {
    Off,
    SelfAdjusted {
        #[serde(default = "default_delta")]
        delta: f64,
        #[serde(default)]
        alpha_min: f64,
        #[serde(default = "default_alpha_max")]
        alpha_max: f64,
        /// Weight of the previous smoothed loss; 0 compares raw batch losses.
        #[serde(default = "default_smoothing")]
        smoothing: f64,
    },
}

fn default_delta() -> f64 {
    0.01
}

fn default_alpha_max() -> f64 {
    6.0
}

fn default_smoothing() -> f64 {
    0.9
}

impl Curriculum {
    pub fn self_adjusted() -> Self {
        Curriculum::SelfAdjusted {
            delta: default_delta(),
            alpha_min: 0.0,
            alpha_max: default_alpha_max(),
            smoothing: default_smoothing(),
        }
    }
}

/// Which negative distribution to draw from, and how its knobs evolve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "fixed")]
    pub beta_mode: BetaMode,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "default_m")]
    pub m: f64,
    #[serde(default = "off")]
    pub curriculum: Curriculum,
    #[serde(default = "one_usize")]
    pub k: usize,
    /// Draw one candidate subset per batch instead of per position.
    #[serde(default)]
    pub shared_candidates: bool,
    /// Never draw any item from the user's own training sequence.
    #[serde(default)]
    pub exclude_history: bool,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn fixed() -> BetaMode {
    BetaMode::Fixed
}

fn default_m() -> f64 {
    20.0
}

fn off() -> Curriculum {
    Curriculum::Off
}

impl SamplerSpec {
    pub fn uniform(k: usize) -> Self {
        SamplerSpec {
            kind: SamplerKind::Uniform,
            gamma: 1.0,
            alpha: 1.0,
            beta_mode: BetaMode::Fixed,
            beta: 1.0,
            m: default_m(),
            curriculum: Curriculum::Off,
            k,
            shared_candidates: false,
            exclude_history: false,
        }
    }

    pub fn popularity(gamma: f64, k: usize) -> Self {
        SamplerSpec {
            kind: SamplerKind::Popularity,
            gamma,
            ..Self::uniform(k)
        }
    }

    pub fn genni(alpha: f64, beta: f64, k: usize) -> Self {
        SamplerSpec {
            kind: SamplerKind::Genni,
            alpha,
            beta,
            ..Self::uniform(k)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Usage(format!("sampler: {msg}")));
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("beta must lie in (0, 1], got {}", self.beta));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.m > 0.0 && self.m.is_finite()) {
            return bad(format!("m must be > 0, got {}", self.m));
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if let Curriculum::SelfAdjusted {
            delta,
            alpha_min,
            alpha_max,
            smoothing,
        } = self.curriculum
        {
            if !(delta > 0.0) || !(alpha_min >= 0.0) || !(alpha_min <= alpha_max) {
                return bad(format!(
                    "curriculum needs delta > 0 and 0 <= alpha_min <= alpha_max, got {delta}, {alpha_min}, {alpha_max}"
                ));
            }
            if !(0.0..1.0).contains(&smoothing) {
                return bad(format!("curriculum smoothing must lie in [0, 1), got {smoothing}"));
            }
        }
        Ok(())
    }
}

/// Pre-selection ratio in effect at `epoch`.
///
/// Gradual mode grows geometrically from 0.001 by a factor of ten every `m`
/// epochs and saturates at 1.
pub fn beta_schedule(mode: BetaMode, beta_fixed: f64, m: f64, epoch: usize) -> f64 {
    match mode {
        BetaMode::Fixed => beta_fixed,
        BetaMode::Gradual => (0.001 * 10f64.powf(epoch as f64 / m)).min(1.0),
    }
}

/// One curriculum update: raise α when the loss fell, lower it otherwise.
pub fn curriculum_step(alpha: f64, prev_loss: f64, curr_loss: f64, delta: f64, alpha_min: f64, alpha_max: f64) -> f64 {
    let next = if prev_loss > curr_loss { alpha + delta } else { alpha - delta };
    next.clamp(alpha_min, alpha_max)
}

/// Running state of the self-adjusted curriculum.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumState {
    pub alpha: f64,
    smoothed: Option<f64>,
}

impl CurriculumState {
    pub fn new(alpha: f64) -> Self {
        CurriculumState { alpha, smoothed: None }
    }

    /// Feeds one batch loss and returns the α to use next. The first
    /// observation only seeds the smoothed loss.
    pub fn observe(&mut self, curriculum: &Curriculum, loss: f64) -> f64 {
        if let Curriculum::SelfAdjusted {
            delta,
            alpha_min,
            alpha_max,
            smoothing,
        } = *curriculum
        {
            match self.smoothed {
                None => self.smoothed = Some(loss),
                Some(prev) => {
                    let curr = smoothing * prev + (1.0 - smoothing) * loss;
                    self.alpha = curriculum_step(self.alpha, prev, curr, delta, alpha_min, alpha_max);
                    self.smoothed = Some(curr);
                }
            }
        }
        self.alpha
    }
}

//! Training loop: encode, draw negatives, NCE or BPR loss, Adam, early
//! stopping on validation NDCG@10.

mod adam;
mod loss;

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{bpr_loss, nce_loss};

use crate::data::{make_batches, EvalCase, SequenceBatch};
use crate::encoder::{encode, BoundParams, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::numcore::{Graph, Scalar};
use crate::rng::{purpose, substream, Streams};
use crate::sampler::{
    beta_schedule, genni_sample, sample_uniform, CurriculumState, NegativeDraw, PopularitySampler, SamplerKind,
    SamplerSpec, Targets,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Nce,
    Bpr,
}

/// Encoder hyperparameters other than the vocabulary size, which comes from
/// the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderHyper {
    #[serde(default = "d_max_len")]
    pub max_len: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_layers")]
    pub layers: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_ff")]
    pub ff_dim: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_true")]
    pub final_layer_norm: bool,
}

fn d_max_len() -> usize {
    50
}
fn d_dim() -> usize {
    64
}
fn d_layers() -> usize {
    2
}
fn d_heads() -> usize {
    2
}
fn d_ff() -> usize {
    256
}
fn d_dropout() -> f64 {
    0.2
}
fn d_true() -> bool {
    true
}

impl Default for EncoderHyper {
    fn default() -> Self {
        EncoderHyper {
            max_len: d_max_len(),
            dim: d_dim(),
            layers: d_layers(),
            heads: d_heads(),
            ff_dim: d_ff(),
            dropout: d_dropout(),
            final_layer_norm: true,
        }
    }
}

impl EncoderHyper {
    pub fn config(&self, n_items: usize) -> EncoderConfig {
        EncoderConfig {
            n_items,
            max_len: self.max_len,
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
            dropout: self.dropout,
            final_layer_norm: self.final_layer_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_objective")]
    pub objective: Objective,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "d_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "d_eps")]
    pub adam_eps: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub max_epochs: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_sampler")]
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub encoder: EncoderHyper,
    /// Drop each user's context items from the evaluation ranking.
    #[serde(default)]
    pub filter_seen: bool,
}

fn d_objective() -> Objective {
    Objective::Nce
}
fn d_lr() -> f64 {
    0.001
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_batch() -> usize {
    256
}
fn d_epochs() -> usize {
    200
}
fn d_patience() -> usize {
    40
}
fn d_sampler() -> SamplerSpec {
    SamplerSpec::uniform(1)
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: d_objective(),
            lr: d_lr(),
            adam_beta1: d_beta1(),
            adam_beta2: d_beta2(),
            adam_eps: d_eps(),
            batch_size: d_batch(),
            max_epochs: d_epochs(),
            patience: d_patience(),
            seed: 0,
            sampler: d_sampler(),
            encoder: EncoderHyper::default(),
            filter_seen: false,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Usage(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.patience < 1 {
            return Err(Error::Usage("patience must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Usage("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Usage("adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        self.sampler.validate()?;
        self.encoder.config(1).validate()
    }
}

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub alpha: f64,
    pub beta: f64,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,loss,alpha,beta,hr5,hr10,ndcg5,ndcg10,seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.loss,
            self.alpha,
            self.beta,
            self.hr5,
            self.hr10,
            self.ndcg5,
            self.ndcg10,
            self.seconds
        )
    }

    /// Same row with the wall-clock column ignored.
    pub fn without_time(&self) -> EpochMetrics {
        EpochMetrics {
            seconds: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
}

impl RunMetrics {
    pub fn csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let _ = writeln!(out, "{}", e.csv_row());
        }
        out
    }

    pub fn best(&self) -> Option<&EpochMetrics> {
        self.best_epoch.and_then(|b| self.epochs.iter().find(|e| e.epoch == b))
    }
}

/// Inputs to [`train`]: training sequences, validation cases and item
/// popularity indexed by item (entry 0 for padding).
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [Vec<u32>],
    pub valid: &'a [EvalCase],
    pub n_items: usize,
    pub popularity: &'a [u64],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    /// Parameters of the epoch with the highest validation NDCG@10.
    pub best: EncoderParams<S>,
    pub metrics: RunMetrics,
    /// Difficulty exponent in effect when training stopped.
    pub final_alpha: f64,
}

enum Drawer {
    Uniform,
    Popularity(PopularitySampler),
    Genni,
}

#[allow(clippy::too_many_arguments)]
fn draw_negatives<S: Scalar>(
    drawer: &Drawer,
    spec: &SamplerSpec,
    data: &TrainData,
    params: &EncoderParams<S>,
    batch: &SequenceBatch,
    hidden: &[S],
    alpha: f64,
    beta: f64,
    streams: &Streams,
) -> Result<NegativeDraw> {
    let mut targets = Targets::from_batch(batch);
    if spec.exclude_history {
        let hist: Vec<&[u32]> = batch.sources.iter().map(|&s| data.train[s].as_slice()).collect();
        targets = targets.with_history(&hist)?;
    }
    match drawer {
        Drawer::Uniform => sample_uniform(&targets, data.n_items, spec.k, streams),
        Drawer::Popularity(p) => p.sample(&targets, spec.k, streams),
        Drawer::Genni => genni_sample(
            hidden,
            &params.item_embeddings,
            &targets,
            alpha,
            beta,
            spec.k,
            spec.shared_candidates,
            streams,
        ),
    }
}

fn batch_dump(epoch: usize, batch_index: usize, loss: f64, alpha: f64, beta: f64, batch: &SequenceBatch) -> String {
    let rows: Vec<&[u32]> = batch.inputs.chunks(batch.max_len.max(1)).collect();
    serde_json::json!({
        "epoch": epoch,
        "batch": batch_index,
        "loss": loss.to_string(),
        "alpha": alpha,
        "beta": beta,
        "sources": batch.sources,
        "inputs": rows,
        "targets": batch.targets.chunks(batch.max_len.max(1)).collect::<Vec<_>>(),
    })
    .to_string()
}

/// Trains from scratch, calling `on_epoch` after each validation pass.
pub fn train_with<S: Scalar>(
    config: &TrainConfig,
    data: &TrainData,
    on_epoch: &mut dyn FnMut(&EpochMetrics, &EncoderParams<S>),
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    let enc = config.encoder.config(data.n_items);
    let mut params = EncoderParams::<S>::init(enc, config.seed)?;
    let spec = &config.sampler;
    let mut curriculum = CurriculumState::new(spec.alpha);
    let mut metrics = RunMetrics::default();
    if config.max_epochs == 0 {
        return Ok(TrainOutcome {
            best: params,
            metrics,
            final_alpha: spec.alpha,
        });
    }
    if data.valid.is_empty() || data.train.is_empty() {
        return Err(Error::Usage("training needs non-empty train and validation sets".into()));
    }
    let drawer = match spec.kind {
        SamplerKind::Uniform => Drawer::Uniform,
        SamplerKind::Popularity => Drawer::Popularity(PopularitySampler::new(data.popularity, spec.gamma)?),
        SamplerKind::Genni => Drawer::Genni,
    };
    let adam = config.adam();
    let mut state = AdamState::new(params.named_tensors().into_iter().map(|(_, t)| t));
    let mut best = params.clone();
    let mut best_ndcg = f64::NEG_INFINITY;
    let mut since_best = 0;
    let t = config.encoder.max_len;

    for epoch in 0..config.max_epochs {
        let start = Instant::now();
        let beta = beta_schedule(spec.beta_mode, spec.beta, spec.m, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, batch) in make_batches(data.train, config.batch_size, t, config.seed, epoch as u64).enumerate() {
            if batch.mask.iter().all(|&m| !m) {
                continue;
            }
            let alpha = curriculum.alpha;
            let diverged = |loss: f64| Error::Diverged {
                epoch,
                batch: bi,
                loss,
                dump: batch_dump(epoch, bi, loss, alpha, beta, &batch),
            };
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &params, true);
            let forward = (|| {
                let mut dropout_rng = substream(config.seed, &[purpose::DROPOUT, epoch as u64, bi as u64]);
                let h = encode(&mut g, &bound, &batch, true, &mut dropout_rng)?;
                let streams = Streams::new(config.seed, &[purpose::SAMPLE, epoch as u64, bi as u64]);
                let negatives =
                    draw_negatives(&drawer, spec, data, &params, &batch, g.value(h).data(), alpha, beta, &streams)?;
                match config.objective {
                    Objective::Nce => nce_loss(&mut g, h, bound.item_embeddings, &batch.targets, &batch.mask, &negatives),
                    Objective::Bpr => bpr_loss(&mut g, h, bound.item_embeddings, &batch.targets, &batch.mask, &negatives),
                }
            })();
            let loss = match forward {
                Ok(loss) => loss,
                Err(Error::Numeric { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            let value = g.value(loss).item()?.as_f64();
            if !value.is_finite() {
                return Err(diverged(value));
            }
            let grads = g.backward(loss)?;
            let gs: Vec<_> = bound.vars().iter().map(|&v| grads.get(v)).collect();
            adam_step(&mut params.tensors_mut(), &gs, &mut state, &adam)?;
            if !params.all_finite() {
                return Err(diverged(value));
            }
            curriculum.observe(&spec.curriculum, value);
            loss_sum += value;
            batches += 1;
        }
        let eval = evaluate(&params, data.valid, &[5, 10], config.filter_seen)?;
        let row = EpochMetrics {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            alpha: curriculum.alpha,
            beta,
            hr5: eval.hr_at(5),
            hr10: eval.hr_at(10),
            ndcg5: eval.ndcg_at(5),
            ndcg10: eval.ndcg_at(10),
            seconds: start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE),
        };
        on_epoch(&row, &params);
        let improved = row.ndcg10 > best_ndcg;
        metrics.epochs.push(row);
        if improved {
            best_ndcg = metrics.epochs.last().expect("pushed").ndcg10;
            best = params.clone();
            metrics.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        metrics,
        final_alpha: curriculum.alpha,
    })
}

pub fn train<S: Scalar>(config: &TrainConfig, data: &TrainData) -> Result<TrainOutcome<S>> {
    train_with(config, data, &mut |_, _| {})
}

#[cfg(test)]
mod tests;

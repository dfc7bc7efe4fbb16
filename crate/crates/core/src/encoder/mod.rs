//! Causal self-attention sequence encoder with tied item embeddings.

mod checkpoint;
mod forward;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use forward::{encode, final_states, score_all, score_rows, BoundParams};

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};
use crate::rng::{purpose, substream};

/// Encoder hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Number of real items `|V|`; the embedding table has `|V| + 1` rows.
    pub n_items: usize,
    pub max_len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    /// Layer-normalize the last block's output before scoring.
    #[serde(default = "default_true")]
    pub final_layer_norm: bool,
}

fn default_true() -> bool {
    true
}

impl EncoderConfig {
    /// Desk-scale defaults: d=64, 2 layers, 2 heads, d_ff=256, p=0.2, T=50.
    pub fn desk(n_items: usize) -> Self {
        EncoderConfig {
            n_items,
            max_len: 50,
            dim: 64,
            layers: 2,
            heads: 2,
            ff_dim: 256,
            dropout: 0.2,
            final_layer_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Usage(msg));
        if self.n_items < 1 || self.max_len < 1 || self.dim < 1 || self.heads < 1 || self.ff_dim < 1 {
            return bad(format!("encoder dimensions must be positive: {self:?}"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let (v, t, d, f) = (self.n_items + 1, self.max_len, self.dim, self.ff_dim);
        let per_layer = 2 * 2 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
        let final_ln = if self.final_layer_norm { 2 * d } else { 0 };
        v * d + t * d + self.layers * per_layer + final_ln
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S> {
    pub ln1_gamma: Tensor<S>,
    pub ln1_beta: Tensor<S>,
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
    pub ln2_gamma: Tensor<S>,
    pub ln2_beta: Tensor<S>,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

const LAYER_TENSOR_NAMES: [&str; 16] = [
    "ln1_gamma", "ln1_beta", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_gamma", "ln2_beta", "w1", "b1", "w2",
    "b2",
];

impl<S> LayerParams<S> {
    fn tensors(&self) -> [&Tensor<S>; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<S>; 16] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// All trainable tensors. Row 0 of `item_embeddings` is the padding row.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<S> {
    pub config: EncoderConfig,
    pub item_embeddings: Tensor<S>,
    pub positional_embeddings: Tensor<S>,
    pub layers: Vec<LayerParams<S>>,
    pub final_gamma: Tensor<S>,
    pub final_beta: Tensor<S>,
}

fn trunc_normal<S: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break S::lit(z * std);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

pub const INIT_STD: f64 = 0.02;

impl<S: Scalar> EncoderParams<S> {
    /// Deterministic initialization: truncated normal (std 0.02, cut at 2σ)
    /// for weights and embeddings, zero biases, unit layer-norm scales.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, &[purpose::INIT]);
        let (d, f) = (config.dim, config.ff_dim);
        let item_embeddings = trunc_normal(&[config.n_items + 1, d], INIT_STD, &mut rng);
        let positional_embeddings = trunc_normal(&[config.max_len, d], INIT_STD, &mut rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_gamma: Tensor::filled(&[d], S::one()),
                ln1_beta: Tensor::zeros(&[d]),
                wq: trunc_normal(&[d, d], INIT_STD, &mut rng),
                bq: Tensor::zeros(&[d]),
                wk: trunc_normal(&[d, d], INIT_STD, &mut rng),
                bk: Tensor::zeros(&[d]),
                wv: trunc_normal(&[d, d], INIT_STD, &mut rng),
                bv: Tensor::zeros(&[d]),
                wo: trunc_normal(&[d, d], INIT_STD, &mut rng),
                bo: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::filled(&[d], S::one()),
                ln2_beta: Tensor::zeros(&[d]),
                w1: trunc_normal(&[d, f], INIT_STD, &mut rng),
                b1: Tensor::zeros(&[f]),
                w2: trunc_normal(&[f, d], INIT_STD, &mut rng),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        let (final_gamma, final_beta) = if config.final_layer_norm {
            (Tensor::filled(&[d], S::one()), Tensor::zeros(&[d]))
        } else {
            (Tensor::zeros(&[0]), Tensor::zeros(&[0]))
        };
        Ok(EncoderParams {
            config,
            item_embeddings,
            positional_embeddings,
            layers,
            final_gamma,
            final_beta,
        })
    }

    /// Every tensor with its canonical name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![
            ("item_embeddings".to_string(), &self.item_embeddings),
            ("positional_embeddings".to_string(), &self.positional_embeddings),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSOR_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        if self.config.final_layer_norm {
            out.push(("final_gamma".to_string(), &self.final_gamma));
            out.push(("final_beta".to_string(), &self.final_beta));
        }
        out
    }

    /// Mutable tensors in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.item_embeddings, &mut self.positional_embeddings];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        if self.config.final_layer_norm {
            out.push(&mut self.final_gamma);
            out.push(&mut self.final_beta);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Embedding row of item `index` (0 is padding).
    pub fn embedding(&self, index: u32) -> &[S] {
        self.item_embeddings.row(index as usize)
    }

    pub fn cast<T: Scalar>(&self) -> EncoderParams<T> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerParams {
                ln1_gamma: l.ln1_gamma.cast(),
                ln1_beta: l.ln1_beta.cast(),
                wq: l.wq.cast(),
                bq: l.bq.cast(),
                wk: l.wk.cast(),
                bk: l.bk.cast(),
                wv: l.wv.cast(),
                bv: l.bv.cast(),
                wo: l.wo.cast(),
                bo: l.bo.cast(),
                ln2_gamma: l.ln2_gamma.cast(),
                ln2_beta: l.ln2_beta.cast(),
                w1: l.w1.cast(),
                b1: l.b1.cast(),
                w2: l.w2.cast(),
                b2: l.b2.cast(),
            })
            .collect();
        EncoderParams {
            config: self.config.clone(),
            item_embeddings: self.item_embeddings.cast(),
            positional_embeddings: self.positional_embeddings.cast(),
            layers,
            final_gamma: self.final_gamma.cast(),
            final_beta: self.final_beta.cast(),
        }
    }
}

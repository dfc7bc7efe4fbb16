use rand::{Rng, SeedableRng};

use crate::data::SequenceBatch;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numcore::{dot, gemm, Graph, Scalar, Var};
use crate::rng::RunRng;
use crate::tolerance::LAYER_NORM_EPS;

#[derive(Debug, Clone)]
struct BoundLayer {
    ln1: (Var, Var),
    q: (Var, Var),
    k: (Var, Var),
    v: (Var, Var),
    o: (Var, Var),
    ln2: (Var, Var),
    ff1: (Var, Var),
    ff2: (Var, Var),
}

/// Encoder parameters recorded as leaves of one graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub config: EncoderConfig,
    pub item_embeddings: Var,
    positional: Var,
    layers: Vec<BoundLayer>,
    final_ln: Option<(Var, Var)>,
    vars: Vec<Var>,
}

impl BoundParams {
    /// Records every parameter tensor on `graph`.
    pub fn bind<S: Scalar>(graph: &mut Graph<S>, params: &EncoderParams<S>, requires_grad: bool) -> Self {
        let vars: Vec<Var> = params
            .named_tensors()
            .into_iter()
            .map(|(_, t)| graph.leaf(t.clone(), requires_grad))
            .collect();
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("canonical tensor order");
        let item_embeddings = next();
        let positional = next();
        let layers = (0..params.layers.len())
            .map(|_| BoundLayer {
                ln1: (next(), next()),
                q: (next(), next()),
                k: (next(), next()),
                v: (next(), next()),
                o: (next(), next()),
                ln2: (next(), next()),
                ff1: (next(), next()),
                ff2: (next(), next()),
            })
            .collect();
        let final_ln = params.config.final_layer_norm.then(|| (next(), next()));
        BoundParams {
            config: params.config.clone(),
            item_embeddings,
            positional,
            layers,
            final_ln,
            vars,
        }
    }

    /// Leaf handles in the canonical tensor order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn linear<S: Scalar>(g: &mut Graph<S>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// `[B, T, d] -> [B*H, T, d/H]`.
fn split_heads<S: Scalar>(g: &mut Graph<S>, x: Var, b: usize, t: usize, heads: usize) -> Result<Var> {
    let d = g.shape(x)[2];
    let dh = d / heads;
    if heads == 1 {
        return g.reshape(x, &[b, t, dh]);
    }
    let x = g.reshape(x, &[b, t, heads, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, t, dh])
}

fn merge_heads<S: Scalar>(g: &mut Graph<S>, x: Var, b: usize, t: usize, heads: usize) -> Result<Var> {
    let dh = g.shape(x)[2];
    if heads == 1 {
        return g.reshape(x, &[b, t, dh]);
    }
    let x = g.reshape(x, &[b, heads, t, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b, t, heads * dh])
}

/// Encodes a batch of left-padded windows into hidden states `[B, T, d]`.
///
/// Position `t` only attends to real items at positions `<= t`; hidden
/// states at padding positions are exactly zero. Dropout is active only when
/// `train` is set.
pub fn encode<S: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    params: &BoundParams,
    batch: &SequenceBatch,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let cfg = &params.config;
    let (b, t, heads) = (batch.rows, batch.max_len, cfg.heads);
    if t != cfg.max_len {
        return Err(Error::dim(
            "encode",
            format!("batch length {t} but encoder expects {}", cfg.max_len),
        ));
    }
    if let Some(bad) = batch.inputs.iter().find(|&&i| i as usize > cfg.n_items) {
        return Err(Error::dim("encode", format!("item index {bad} > {}", cfg.n_items)));
    }
    let p = cfg.dropout;
    let eps = S::lit(LAYER_NORM_EPS);
    let indices: Vec<usize> = batch.inputs.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..b * t).map(|i| i % t).collect();
    let row_mask: Vec<S> = batch
        .inputs
        .iter()
        .map(|&i| if i != 0 { S::one() } else { S::zero() })
        .collect();
    let mut key_valid = Vec::with_capacity(b * heads * t);
    for r in 0..b {
        let row = &batch.inputs[r * t..(r + 1) * t];
        for _ in 0..heads {
            key_valid.extend(row.iter().map(|&i| i != 0));
        }
    }

    let x = g.embedding(params.item_embeddings, &indices, &[b, t])?;
    let x = g.scale(x, S::lit((cfg.dim as f64).sqrt()));
    let pos = g.embedding(params.positional, &positions, &[b, t])?;
    let x = g.add(x, pos)?;
    let x = g.dropout(x, p, train, rng)?;
    let mut x = g.scale_rows(x, &row_mask)?;

    let att_scale = S::lit(1.0 / ((cfg.dim / heads) as f64).sqrt());
    for layer in &params.layers {
        let xn = g.layer_norm(x, layer.ln1.0, layer.ln1.1, eps)?;
        let q = linear(g, xn, layer.q)?;
        let k = linear(g, xn, layer.k)?;
        let v = linear(g, xn, layer.v)?;
        let q = split_heads(g, q, b, t, heads)?;
        let k = split_heads(g, k, b, t, heads)?;
        let v = split_heads(g, v, b, t, heads)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, att_scale);
        let scores = g.causal_mask(scores, &key_valid)?;
        let att = g.softmax(scores);
        let att = g.dropout(att, p, train, rng)?;
        let ctx = g.bmm(att, v, false)?;
        let ctx = merge_heads(g, ctx, b, t, heads)?;
        let out = linear(g, ctx, layer.o)?;
        let out = g.dropout(out, p, train, rng)?;
        x = g.add(x, out)?;

        let xn = g.layer_norm(x, layer.ln2.0, layer.ln2.1, eps)?;
        let f = linear(g, xn, layer.ff1)?;
        let f = g.relu(f);
        let f = g.dropout(f, p, train, rng)?;
        let f = linear(g, f, layer.ff2)?;
        let f = g.dropout(f, p, train, rng)?;
        x = g.add(x, f)?;
        x = g.scale_rows(x, &row_mask)?;
    }
    if let Some((gamma, beta)) = params.final_ln {
        x = g.layer_norm(x, gamma, beta, eps)?;
        x = g.scale_rows(x, &row_mask)?;
    }
    Ok(x)
}

/// Eval-mode hidden state at the last position of each context (left
/// truncated to `max_len`), as a flat `[contexts, d]` buffer.
pub fn final_states<S: Scalar>(params: &EncoderParams<S>, contexts: &[&[u32]]) -> Result<Vec<S>> {
    let t = params.config.max_len;
    let d = params.config.dim;
    let batch = SequenceBatch::contexts(contexts, t);
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params, false);
    // eval mode draws nothing from this stream
    let mut rng = RunRng::seed_from_u64(0);
    let h = encode(&mut g, &bound, &batch, false, &mut rng)?;
    let hv = g.value(h).data();
    Ok((0..contexts.len())
        .flat_map(|r| hv[(r * t + t - 1) * d..(r * t + t) * d].iter().copied())
        .collect())
}

/// Scores of every real item `1..=|V|` against one hidden state; entry
/// `i - 1` holds `h · s_i`.
pub fn score_all<S: Scalar>(params: &EncoderParams<S>, h: &[S]) -> Vec<S> {
    let n = params.config.n_items;
    (1..=n as u32).map(|i| dot(h, params.embedding(i))).collect()
}

/// Scores for many hidden states at once: `[n, d] -> [n, |V| + 1]`. Column 0
/// is the padding row and must be ignored by callers.
pub fn score_rows<S: Scalar>(embeddings: &[S], dim: usize, hidden: &[S]) -> Vec<S> {
    let rows = hidden.len() / dim;
    let items = embeddings.len() / dim;
    let mut out = vec![S::zero(); rows * items];
    gemm(rows, dim, items, hidden, false, embeddings, true, &mut out, false);
    out
}

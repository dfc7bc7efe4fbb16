use crate::error::{Error, Result};
use crate::numcore::{Graph, Scalar, Var};
use crate::sampler::NegativeDraw;
use crate::tolerance::SIGMOID_CLAMP;

struct Pairs {
    valid: Vec<usize>,
    repeated: Vec<usize>,
    negatives: Vec<usize>,
    positives: Vec<usize>,
}

fn pairs(targets: &[u32], mask: &[bool], negatives: &NegativeDraw) -> Result<Pairs> {
    let k = negatives.k;
    if targets.len() != mask.len() || negatives.indices.len() != targets.len() * k {
        return Err(Error::dim(
            "loss",
            format!(
                "{} targets, {} mask entries, {} negatives with k = {k}",
                targets.len(),
                mask.len(),
                negatives.indices.len()
            ),
        ));
    }
    let valid: Vec<usize> = (0..targets.len()).filter(|&p| mask[p]).collect();
    if valid.is_empty() {
        return Err(Error::Usage("loss over a batch without valid positions".into()));
    }
    if let Some(&p) = valid.iter().find(|&&p| targets[p] == 0) {
        return Err(Error::Usage(format!("position {p} is unmasked but has padding target")));
    }
    let repeated: Vec<usize> = valid.iter().flat_map(|&p| std::iter::repeat_n(p, k)).collect();
    let negatives = valid
        .iter()
        .flat_map(|&p| negatives.at(p).iter().map(|&i| i as usize))
        .collect();
    let positives = valid.iter().map(|&p| targets[p] as usize).collect();
    Ok(Pairs {
        valid,
        repeated,
        negatives,
        positives,
    })
}

/// Row-wise dot products `h[rows[i]] · table[items[i]]`.
fn logits<S: Scalar>(g: &mut Graph<S>, h: Var, table: Var, rows: &[usize], items: &[usize]) -> Result<Var> {
    let hs = g.gather_rows(h, rows)?;
    let es = g.embedding(table, items, &[items.len()])?;
    let prod = g.mul(hs, es)?;
    Ok(g.sum_last(prod))
}

/// `log σ(x)` with σ clamped to `[ε, 1 - ε]`.
fn log_sigmoid<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    let s = g.sigmoid(x);
    let s = g.clamp(s, S::lit(SIGMOID_CLAMP), S::lit(1.0 - SIGMOID_CLAMP));
    g.log(s)
}

fn neg_mean<S: Scalar>(g: &mut Graph<S>, x: Var, count: usize) -> Result<Var> {
    let n = g.value(x).len();
    g.weighted_sum(x, &vec![S::lit(-1.0 / count as f64); n])
}

/// Binary NCE loss averaged over unmasked positions:
/// `-log σ(h·s₊) - Σ_j log(1 - σ(h·s₋ⱼ))`.
///
/// `h` holds hidden states with any leading shape and last axis `d`;
/// `table` is the `[|V| + 1, d]` item embedding table.
pub fn nce_loss<S: Scalar>(
    g: &mut Graph<S>,
    h: Var,
    table: Var,
    targets: &[u32],
    mask: &[bool],
    negatives: &NegativeDraw,
) -> Result<Var> {
    let p = pairs(targets, mask, negatives)?;
    let pos = logits(g, h, table, &p.valid, &p.positives)?;
    let neg = logits(g, h, table, &p.repeated, &p.negatives)?;
    let lp = log_sigmoid(g, pos)?;
    let flipped = g.scale(neg, S::lit(-1.0));
    let ln = log_sigmoid(g, flipped)?;
    let a = neg_mean(g, lp, p.valid.len())?;
    let b = neg_mean(g, ln, p.valid.len())?;
    g.add(a, b)
}

/// Sequential BPR loss averaged over unmasked positions and negatives:
/// `-log σ(h·s₊ - h·s₋ⱼ)`.
pub fn bpr_loss<S: Scalar>(
    g: &mut Graph<S>,
    h: Var,
    table: Var,
    targets: &[u32],
    mask: &[bool],
    negatives: &NegativeDraw,
) -> Result<Var> {
    let p = pairs(targets, mask, negatives)?;
    let k = negatives.k;
    let pos_items: Vec<usize> = p.positives.iter().flat_map(|&i| std::iter::repeat_n(i, k)).collect();
    let pos = logits(g, h, table, &p.repeated, &pos_items)?;
    let neg = logits(g, h, table, &p.repeated, &p.negatives)?;
    let flipped = g.scale(neg, S::lit(-1.0));
    let margin = g.add(pos, flipped)?;
    let l = log_sigmoid(g, margin)?;
    neg_mean(g, l, p.repeated.len())
}

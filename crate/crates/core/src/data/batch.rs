use rand::seq::SliceRandom;

use crate::rng::{purpose, substream};

/// Fixed-length, left-padded training windows.
///
/// `targets[b, t]` is the next item after `inputs[b, t]`; `mask[b, t]` is set
/// exactly where both the input and its target are real items.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub rows: usize,
    pub max_len: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
    /// Index into the training set for each row.
    pub sources: Vec<usize>,
}

impl SequenceBatch {
    /// Builds a batch from training sequences. Each row holds the last
    /// `max_len` items; the final position has no next item and is masked.
    pub fn from_sequences(seqs: &[&[u32]], sources: Vec<usize>, max_len: usize) -> Self {
        let rows = seqs.len();
        let mut inputs = Vec::with_capacity(rows * max_len);
        let mut targets = Vec::with_capacity(rows * max_len);
        for s in seqs {
            let window = pad_left(s, max_len);
            for t in 0..max_len {
                let next = if t + 1 < max_len { window[t + 1] } else { 0 };
                targets.push(if window[t] == 0 { 0 } else { next });
            }
            inputs.extend(window);
        }
        let mask = targets.iter().map(|&t| t != 0).collect();
        SequenceBatch {
            rows,
            max_len,
            inputs,
            targets,
            mask,
            sources,
        }
    }

    /// Inputs only (evaluation); targets and mask are empty of positions.
    pub fn contexts(seqs: &[&[u32]], max_len: usize) -> Self {
        let rows = seqs.len();
        let mut inputs = Vec::with_capacity(rows * max_len);
        for s in seqs {
            inputs.extend(pad_left(s, max_len));
        }
        SequenceBatch {
            rows,
            max_len,
            inputs,
            targets: vec![0; rows * max_len],
            mask: vec![false; rows * max_len],
            sources: (0..rows).collect(),
        }
    }

    pub fn positions(&self) -> usize {
        self.rows * self.max_len
    }

    /// Flat indices of unmasked positions, in row-major order.
    pub fn valid_positions(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

/// Last `max_len` items of `seq`, left-padded with 0.
pub fn pad_left(seq: &[u32], max_len: usize) -> Vec<u32> {
    let take = seq.len().min(max_len);
    let mut out = vec![0; max_len - take];
    out.extend_from_slice(&seq[seq.len() - take..]);
    out
}

/// One epoch of batches: every training sequence appears in exactly one row,
/// in an order fixed by `(seed, epoch)`.
pub struct BatchIter<'a> {
    train: &'a [Vec<u32>],
    order: Vec<usize>,
    batch_size: usize,
    max_len: usize,
    cursor: usize,
}

pub fn make_batches(train: &[Vec<u32>], batch_size: usize, max_len: usize, seed: u64, epoch: u64) -> BatchIter<'_> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut substream(seed, &[purpose::SHUFFLE, epoch]));
    BatchIter {
        train,
        order,
        batch_size: batch_size.max(1),
        max_len,
        cursor: 0,
    }
}

impl Iterator for BatchIter<'_> {
    type Item = SequenceBatch;

    fn next(&mut self) -> Option<SequenceBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let sources = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let seqs: Vec<&[u32]> = sources.iter().map(|&i| self.train[i].as_slice()).collect();
        Some(SequenceBatch::from_sequences(&seqs, sources, self.max_len))
    }
}

impl BatchIter<'_> {
    pub fn batch_count(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

use std::collections::HashMap;

use crate::data::InteractionLog;
use crate::error::{Error, Result};

/// Dense item indexing. Index 0 is padding; real items are `1..=len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    item_ids: Vec<String>,
    index: HashMap<String, u32>,
    popularity: Vec<u64>,
}

impl Vocab {
    /// Indices are assigned in order of first appearance in `log`.
    pub fn from_log(log: &InteractionLog) -> Self {
        let mut item_ids = vec![String::new()];
        let mut index = HashMap::new();
        let mut popularity = vec![0u64];
        for r in &log.records {
            let idx = *index.entry(r.item.clone()).or_insert_with(|| {
                item_ids.push(r.item.clone());
                popularity.push(0);
                (item_ids.len() - 1) as u32
            });
            popularity[idx as usize] += 1;
        }
        Vocab {
            item_ids,
            index,
            popularity,
        }
    }

    /// Number of real items, `|V|`.
    pub fn len(&self) -> usize {
        self.item_ids.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index_of(&self, item: &str) -> Option<u32> {
        self.index.get(item).copied()
    }

    pub fn item_id(&self, index: u32) -> &str {
        &self.item_ids[index as usize]
    }

    /// Interaction counts by index; entry 0 (padding) is zero.
    pub fn popularity(&self) -> &[u64] {
        &self.popularity
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids[1..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthStats {
    pub users: usize,
    pub mean_before_truncation: f64,
    pub mean_after_truncation: f64,
}

/// Chronological per-user item sequences.
#[derive(Debug, Clone)]
pub struct Sequences {
    pub users: Vec<String>,
    pub items: Vec<Vec<u32>>,
    pub vocab: Vocab,
    pub max_len: usize,
    pub lengths: LengthStats,
}

/// Groups a (filtered) log by user, sorts each history by timestamp with
/// ties kept in input order, and keeps the most recent `max_len + 2` items.
pub fn build_sequences(log: &InteractionLog, max_len: usize) -> Result<Sequences> {
    if max_len == 0 {
        return Err(Error::Usage("maximum sequence length must be positive".into()));
    }
    let vocab = Vocab::from_log(log);
    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut users = Vec::new();
    let mut events: Vec<Vec<(i64, u32)>> = Vec::new();
    for r in &log.records {
        let u = *user_index.entry(&r.user).or_insert_with(|| {
            users.push(r.user.clone());
            events.push(Vec::new());
            users.len() - 1
        });
        events[u].push((r.timestamp, vocab.index_of(&r.item).expect("indexed")));
    }
    let keep = max_len + 2;
    let mut before = 0usize;
    let mut after = 0usize;
    let items: Vec<Vec<u32>> = events
        .into_iter()
        .map(|mut ev| {
            ev.sort_by_key(|&(t, _)| t);
            before += ev.len();
            let start = ev.len().saturating_sub(keep);
            after += ev.len() - start;
            ev[start..].iter().map(|&(_, i)| i).collect()
        })
        .collect();
    let n = users.len().max(1) as f64;
    let lengths = LengthStats {
        users: users.len(),
        mean_before_truncation: before as f64 / n,
        mean_after_truncation: after as f64 / n,
    };
    Ok(Sequences {
        users,
        items,
        vocab,
        max_len,
        lengths,
    })
}

/// A context to encode and the single held-out item to rank.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub user: usize,
    pub context: Vec<u32>,
    pub target: u32,
}

/// Leave-one-out views. `users`, `train`, `valid` and `test` are aligned.
#[derive(Debug, Clone)]
pub struct Split {
    pub users: Vec<usize>,
    pub train: Vec<Vec<u32>>,
    pub valid: Vec<EvalCase>,
    pub test: Vec<EvalCase>,
    /// Sequences shorter than 3 that were left out.
    pub excluded: usize,
}

/// Last item is the test target, second to last the validation target,
/// the rest is training data.
pub fn split_leave_one_out(seqs: &[Vec<u32>]) -> Split {
    let mut split = Split {
        users: vec![],
        train: vec![],
        valid: vec![],
        test: vec![],
        excluded: 0,
    };
    for (u, s) in seqs.iter().enumerate() {
        let n = s.len();
        if n < 3 {
            split.excluded += 1;
            continue;
        }
        split.users.push(u);
        split.train.push(s[..n - 2].to_vec());
        split.valid.push(EvalCase {
            user: u,
            context: s[..n - 2].to_vec(),
            target: s[n - 2],
        });
        split.test.push(EvalCase {
            user: u,
            context: s[..n - 1].to_vec(),
            target: s[n - 1],
        });
    }
    split
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interaction;

    #[test]
    fn sorts_chronologically() {
        let log = InteractionLog::new(vec![
            Interaction::new("u", "c", 30),
            Interaction::new("u", "a", 10),
            Interaction::new("u", "b", 20),
        ]);
        let s = build_sequences(&log, 50).unwrap();
        let names: Vec<&str> = s.items[0].iter().map(|&i| s.vocab.item_id(i)).collect();
        assert_eq!(names, ["a", "b", "c"]);
    }

    #[test]
    fn keeps_last_t_plus_two() {
        let t = 4;
        let log = InteractionLog::new((0..t + 10).map(|i| Interaction::new("u", format!("i{i}"), i as i64)).collect());
        let s = build_sequences(&log, t).unwrap();
        assert_eq!(s.items[0].len(), t + 2);
        assert_eq!(s.vocab.item_id(*s.items[0].last().unwrap()), "i13");
        assert_eq!(s.vocab.item_id(s.items[0][0]), "i8");
        assert_eq!(s.lengths.mean_before_truncation, 14.0);
        assert_eq!(s.lengths.mean_after_truncation, 6.0);
    }

    #[test]
    fn equal_timestamps_keep_input_order() {
        let log = InteractionLog::new(vec![
            Interaction::new("u", "x", 5),
            Interaction::new("u", "y", 5),
            Interaction::new("u", "w", 1),
        ]);
        let s = build_sequences(&log, 10).unwrap();
        let names: Vec<&str> = s.items[0].iter().map(|&i| s.vocab.item_id(i)).collect();
        assert_eq!(names, ["w", "x", "y"]);
    }

    #[test]
    fn popularity_matches_brute_force_counts() {
        let log = InteractionLog::new(
            (0..200)
                .map(|i| Interaction::new(format!("u{}", i % 7), format!("i{}", (i * i) % 11), i as i64))
                .collect(),
        );
        let vocab = Vocab::from_log(&log);
        for (idx, id) in vocab.item_ids().iter().enumerate() {
            let brute = log.records.iter().filter(|r| &r.item == id).count() as u64;
            assert_eq!(vocab.popularity()[idx + 1], brute);
        }
        assert_eq!(vocab.popularity()[0], 0);
    }

    #[test]
    fn leave_one_out_rules() {
        let split = split_leave_one_out(&[vec![1, 2, 3, 4, 5], vec![1, 2, 3], vec![1, 2]]);
        assert_eq!(split.excluded, 1);
        assert_eq!(split.train, vec![vec![1, 2, 3], vec![1]]);
        assert_eq!(split.valid[0], EvalCase { user: 0, context: vec![1, 2, 3], target: 4 });
        assert_eq!(split.test[0], EvalCase { user: 0, context: vec![1, 2, 3, 4], target: 5 });
        assert_eq!(split.valid[1].target, 2);
        assert_eq!(split.test[1].target, 3);
        assert_eq!(split.users, vec![0, 1]);
    }
}

//! Interaction logs, 5-core filtering, per-user sequences and batches.

mod batch;
mod filter;
mod ingest;
mod sequences;

pub use batch::{make_batches, pad_left, BatchIter, SequenceBatch};
pub use filter::{five_core_filter, MIN_INTERACTIONS};
pub use ingest::{ingest, parse_tsv, write_tsv, IngestReport};
pub use sequences::{build_sequences, split_leave_one_out, EvalCase, LengthStats, Sequences, Split, Vocab};

/// One `(user, item, timestamp)` event.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: i64) -> Self {
        Interaction {
            user: user.into(),
            item: item.into(),
            timestamp,
        }
    }
}

/// Raw events in input order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

impl InteractionLog {
    pub fn new(records: Vec<Interaction>) -> Self {
        InteractionLog { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

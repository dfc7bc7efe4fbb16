use std::collections::HashMap;

use crate::data::InteractionLog;
use crate::error::{Error, Result};

pub const MIN_INTERACTIONS: usize = 5;

/// Repeatedly drops users and items with fewer than five interactions until
/// every remaining user and item has at least five.
pub fn five_core_filter(log: &InteractionLog) -> Result<InteractionLog> {
    if log.is_empty() {
        return Err(Error::Data("cannot 5-core filter an empty log".into()));
    }
    let mut keep: Vec<bool> = vec![true; log.len()];
    let mut rounds = 0;
    loop {
        rounds += 1;
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for (r, _) in log.records.iter().zip(&keep).filter(|(_, k)| **k) {
            *users.entry(&r.user).or_default() += 1;
            *items.entry(&r.item).or_default() += 1;
        }
        let mut changed = false;
        for (r, k) in log.records.iter().zip(keep.iter_mut()) {
            if *k && (users[r.user.as_str()] < MIN_INTERACTIONS || items[r.item.as_str()] < MIN_INTERACTIONS) {
                *k = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let records: Vec<_> = log
        .records
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(r, _)| r.clone())
        .collect();
    if records.is_empty() {
        return Err(Error::Data(format!(
            "5-core filtering removed all {} records after {rounds} rounds",
            log.len()
        )));
    }
    Ok(InteractionLog::new(records))
}

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::InteractionLog;
use crate::{Error, Result};

/// Name of item id 0.
pub const PADDING_ITEM: &str = "<pad>";

/// Dense ids: items start at 1 (0 is padding), users at 0. Both follow sorted name order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub items: Vec<String>,
    pub users: Vec<String>,
}

impl Vocabulary {
    /// Item ids including padding.
    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn item_index(&self) -> HashMap<&str, u32> {
        self.items.iter().enumerate().map(|(i, s)| (s.as_str(), i as u32)).collect()
    }

    pub fn user_index(&self) -> HashMap<&str, u32> {
        self.users.iter().enumerate().map(|(i, s)| (s.as_str(), i as u32)).collect()
    }
}

/// Repeatedly drops users and items with at most `min_count` interactions
/// until none remain, then orders each user's events chronologically.
pub fn preprocess(log: &InteractionLog, min_count: usize) -> Result<(InteractionLog, Vocabulary)> {
    let mut records = log.records.clone();
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            *users.entry(&r.user).or_default() += 1;
            *items.entry(&r.item).or_default() += 1;
        }
        let keep: Vec<bool> = records
            .iter()
            .map(|r| users[r.user.as_str()] > min_count && items[r.item.as_str()] > min_count)
            .collect();
        if keep.iter().all(|&k| k) {
            break;
        }
        let mut it = keep.into_iter();
        records.retain(|_| it.next().unwrap_or(false));
    }
    if records.is_empty() {
        return Err(Error::data(format!(
            "no interactions survive the filter (every user or item has at most {min_count})"
        )));
    }
    records.sort_by(|a, b| a.user.cmp(&b.user).then(a.timestamp.cmp(&b.timestamp)));
    let items: BTreeSet<&str> = records.iter().map(|r| r.item.as_str()).collect();
    let users: BTreeSet<&str> = records.iter().map(|r| r.user.as_str()).collect();
    let vocab = Vocabulary {
        items: std::iter::once(PADDING_ITEM)
            .chain(items)
            .map(str::to_owned)
            .collect(),
        users: users.into_iter().map(str::to_owned).collect(),
    };
    Ok((InteractionLog { records }, vocab))
}

/// Per-user item id sequences (indexed by user id) of a preprocessed log.
pub fn sequences(log: &InteractionLog, vocab: &Vocabulary) -> Result<Vec<Vec<u32>>> {
    let items = vocab.item_index();
    let users = vocab.user_index();
    let mut out = vec![Vec::new(); vocab.num_users()];
    for r in &log.records {
        let (Some(&u), Some(&i)) = (users.get(r.user.as_str()), items.get(r.item.as_str())) else {
            return Err(Error::data(format!("({}, {}) is not in the vocabulary", r.user, r.item)));
        };
        out[u as usize].push(i);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interaction;

    fn rec(u: &str, i: &str, t: i64) -> Interaction {
        Interaction {
            user: u.into(),
            item: i.into(),
            timestamp: t,
        }
    }

    #[test]
    fn lone_short_user_is_an_error() {
        let log = InteractionLog {
            records: (0..5).map(|t| rec("u", &format!("i{t}"), t)).collect(),
        };
        assert!(matches!(preprocess(&log, 10), Err(Error::Data(_))));
    }

    #[test]
    fn dense_log_is_a_fixed_point() {
        let mut records = Vec::new();
        for u in 0..12 {
            for i in 0..12 {
                records.push(rec(&format!("u{u:02}"), &format!("i{i:02}"), i));
            }
        }
        let log = InteractionLog { records };
        let (out, vocab) = preprocess(&log, 10).unwrap();
        assert_eq!(out, log);
        assert_eq!(vocab.num_items(), 13);
        assert_eq!(vocab.items[0], PADDING_ITEM);
    }

    #[test]
    fn filter_cascades() {
        // Item `rare` has two events; removing it pushes user `b` below the threshold.
        let mut records = Vec::new();
        for t in 0..3 {
            records.push(rec("a", "x", t));
            records.push(rec("c", "x", t));
        }
        records.push(rec("b", "x", 10));
        records.push(rec("b", "rare", 11));
        records.push(rec("b", "rare", 12));
        let (out, vocab) = preprocess(&InteractionLog { records }, 2).unwrap();
        assert_eq!(vocab.users, vec!["a", "c"]);
        assert_eq!(out.len(), 6);
    }

    #[test]
    fn chronological_order_is_stable() {
        let log = InteractionLog {
            records: vec![rec("a", "y", 5), rec("a", "x", 1), rec("a", "z", 5)],
        };
        let (out, vocab) = preprocess(&log, 0).unwrap();
        let items: Vec<&str> = out.records.iter().map(|r| r.item.as_str()).collect();
        assert_eq!(items, vec!["x", "y", "z"]);
        assert_eq!(sequences(&out, &vocab).unwrap(), vec![vec![1, 2, 3]]);
    }
}

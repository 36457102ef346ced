//! Shared domain types: identifiers, interaction logs, embedding tables and
//! user features, plus the leave-one-out evaluation split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::stable_hash::Fnv1a;

/// Opaque item identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ItemId(pub u64);

/// Opaque user identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UserId(pub u64);

/// Opaque category identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CategoryId(pub u64);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Interaction event kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventType {
    Click,
    Purchase,
    Cart,
    Favorite,
}

impl EventType {
    pub fn token(self) -> &'static str {
        match self {
            EventType::Click => "click",
            EventType::Purchase => "purchase",
            EventType::Cart => "cart",
            EventType::Favorite => "favorite",
        }
    }

    pub fn parse(token: &str) -> Option<EventType> {
        match token {
            "click" => Some(EventType::Click),
            "purchase" => Some(EventType::Purchase),
            "cart" => Some(EventType::Cart),
            "favorite" => Some(EventType::Favorite),
            _ => None,
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// A single user-item event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub category: CategoryId,
    pub timestamp: u64,
    pub event: EventType,
}

impl Interaction {
    /// Total sort key: (user, timestamp, item), ties beyond that by the
    /// remaining fields so duplicate rows still order deterministically.
    fn sort_key(&self) -> (u64, u64, u64, u64, EventType) {
        (
            self.user.0,
            self.timestamp,
            self.item.0,
            self.category.0,
            self.event,
        )
    }
}

/// An ordered sequence of interactions, sorted by (user, timestamp, item).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionLog {
    interactions: Vec<Interaction>,
}

/// Distinct-entity counts for a log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogSummary {
    pub interactions: usize,
    pub users: usize,
    pub items: usize,
    pub categories: usize,
}

impl InteractionLog {
    /// Builds a log from unordered interactions; sorts into canonical order.
    pub fn from_interactions(mut interactions: Vec<Interaction>) -> Self {
        interactions.sort_by_key(|i| i.sort_key());
        InteractionLog { interactions }
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn summary(&self) -> LogSummary {
        let mut users = BTreeSet::new();
        let mut items = BTreeSet::new();
        let mut categories = BTreeSet::new();
        for i in &self.interactions {
            users.insert(i.user);
            items.insert(i.item);
            categories.insert(i.category);
        }
        LogSummary {
            interactions: self.interactions.len(),
            users: users.len(),
            items: items.len(),
            categories: categories.len(),
        }
    }

    /// Per-user behavior sequences in temporal order (ties by item id).
    pub fn user_sequences(&self) -> impl Iterator<Item = (UserId, &[Interaction])> {
        self.interactions
            .chunk_by(|a, b| a.user == b.user)
            .map(|chunk| (chunk[0].user, chunk))
    }

    /// Number of interactions of each item.
    pub fn item_counts(&self) -> BTreeMap<ItemId, u64> {
        let mut counts = BTreeMap::new();
        for i in &self.interactions {
            *counts.entry(i.item).or_insert(0) += 1;
        }
        counts
    }

    /// Category of each item as observed in the log (last occurrence wins;
    /// categories are expected to be stable per item).
    pub fn item_categories(&self) -> BTreeMap<ItemId, CategoryId> {
        let mut map = BTreeMap::new();
        for i in &self.interactions {
            map.insert(i.item, i.category);
        }
        map
    }

    /// Stable content hash; identical logs hash identically across runs.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        for i in &self.interactions {
            h.write_u64(i.user.0);
            h.write_u64(i.item.0);
            h.write_u64(i.category.0);
            h.write_u64(i.timestamp);
            h.write_u64(i.event as u64);
        }
        h.finish()
    }
}

/// Ground-truth map produced by the leave-one-out split.
pub type GroundTruth = BTreeMap<UserId, BTreeSet<ItemId>>;

/// Moves each user's temporally last interaction into a ground-truth map.
///
/// Users with a single interaction stay entirely in the train split and get
/// no ground-truth entry. Ties on timestamp break by item id ascending, so
/// the "last" interaction is well-defined.
pub fn split_leave_one_out(log: &InteractionLog) -> (InteractionLog, GroundTruth) {
    let mut train = Vec::with_capacity(log.len());
    let mut truth: GroundTruth = BTreeMap::new();
    for (user, seq) in log.user_sequences() {
        if seq.len() >= 2 {
            let (last, rest) = seq.split_last().expect("non-empty sequence");
            train.extend_from_slice(rest);
            truth.entry(user).or_default().insert(last.item);
        } else {
            train.extend_from_slice(seq);
        }
    }
    (InteractionLog::from_interactions(train), truth)
}

/// Stable hash over a (train, truth) pair; used to guard against comparing
/// artifacts built from different splits.
pub fn split_hash(train: &InteractionLog, truth: &GroundTruth) -> u64 {
    let mut h = Fnv1a::new();
    h.write_u64(train.content_hash());
    for (user, items) in truth {
        h.write_u64(user.0);
        for item in items {
            h.write_u64(item.0);
        }
    }
    h.finish()
}

/// Dense id -> vector map with a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: BTreeMap<ItemId, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("embedding dim must be positive".into()));
        }
        Ok(EmbeddingTable {
            dim,
            entries: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, item: ItemId, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Validation(format!(
                "vector for item {} has {} components, table dim is {}",
                item,
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "vector for item {item} has non-finite components"
            )));
        }
        if self.entries.contains_key(&item) {
            return Err(Error::Validation(format!("duplicate item id {item}")));
        }
        self.entries.insert(item, vector);
        Ok(())
    }

    pub fn get(&self, item: ItemId) -> Option<&[f32]> {
        self.entries.get(&item).map(|v| v.as_slice())
    }

    pub fn ids(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ItemId, &[f32])> {
        self.entries.iter().map(|(id, v)| (*id, v.as_slice()))
    }
}

/// Query-side features for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserFeatures {
    pub user: UserId,
    /// Interacted items, most recent last.
    pub history: Vec<ItemId>,
    /// Fixed-width context vector; empty by default.
    pub context: Vec<f64>,
}

impl UserFeatures {
    pub fn new(user: UserId, history: Vec<ItemId>) -> Self {
        UserFeatures {
            user,
            history,
            context: Vec::new(),
        }
    }
}

/// Builds query features for every user in the log (history = full sequence).
pub fn user_features_from_log(log: &InteractionLog) -> BTreeMap<UserId, UserFeatures> {
    let mut map = BTreeMap::new();
    for (user, seq) in log.user_sequences() {
        let history = seq.iter().map(|i| i.item).collect();
        map.insert(user, UserFeatures::new(user, history));
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn interaction(user: u64, item: u64, ts: u64) -> Interaction {
        Interaction {
            user: UserId(user),
            item: ItemId(item),
            category: CategoryId(0),
            timestamp: ts,
            event: EventType::Click,
        }
    }

    #[test]
    fn log_sorts_by_user_time_item() {
        let log = InteractionLog::from_interactions(vec![
            interaction(2, 5, 10),
            interaction(1, 9, 30),
            interaction(1, 3, 30),
            interaction(1, 7, 10),
        ]);
        let order: Vec<(u64, u64, u64)> = log
            .interactions()
            .iter()
            .map(|i| (i.user.0, i.timestamp, i.item.0))
            .collect();
        assert_eq!(order, vec![(1, 10, 7), (1, 30, 3), (1, 30, 9), (2, 10, 5)]);
    }

    #[test]
    fn split_moves_last_item_to_truth() {
        let log = InteractionLog::from_interactions(vec![
            interaction(1, 10, 1),
            interaction(1, 11, 2),
            interaction(1, 12, 3),
        ]);
        let (train, truth) = split_leave_one_out(&log);
        let items: Vec<u64> = train.interactions().iter().map(|i| i.item.0).collect();
        assert_eq!(items, vec![10, 11]);
        assert_eq!(truth[&UserId(1)], BTreeSet::from([ItemId(12)]));
    }

    #[test]
    fn split_keeps_singleton_users_in_train() {
        let log = InteractionLog::from_interactions(vec![interaction(2, 7, 5)]);
        let (train, truth) = split_leave_one_out(&log);
        assert_eq!(train.len(), 1);
        assert!(truth.is_empty());
    }

    #[test]
    fn split_two_users_three_events_each() {
        let mut rows = Vec::new();
        for user in [1, 2] {
            for t in 0..3 {
                rows.push(interaction(user, 100 * user + t, t));
            }
        }
        let log = InteractionLog::from_interactions(rows);
        let (train, truth) = split_leave_one_out(&log);
        assert_eq!(truth.len(), 2);
        assert_eq!(train.len(), 4);
        // Conservation: every original event lands in exactly one side.
        let truth_total: usize = truth.values().map(|s| s.len()).sum();
        assert_eq!(train.len() + truth_total, log.len());
    }

    #[test]
    fn split_tie_on_timestamp_breaks_by_item_id() {
        let log = InteractionLog::from_interactions(vec![
            interaction(1, 9, 10),
            interaction(1, 4, 10),
        ]);
        let (_, truth) = split_leave_one_out(&log);
        // Item 9 sorts after item 4 at the same timestamp, so it is "last".
        assert_eq!(truth[&UserId(1)], BTreeSet::from([ItemId(9)]));
    }

    #[test]
    fn embedding_table_rejects_dim_mismatch_and_duplicates() {
        let mut table = EmbeddingTable::new(2).unwrap();
        table.insert(ItemId(1), vec![0.5, -0.5]).unwrap();
        assert!(table.insert(ItemId(2), vec![1.0]).is_err());
        assert!(table.insert(ItemId(1), vec![0.0, 0.0]).is_err());
        assert!(table.insert(ItemId(3), vec![f32::NAN, 0.0]).is_err());
        assert_eq!(table.len(), 1);
    }

    #[test]
    fn content_hash_is_order_insensitive_after_canonical_sort() {
        let a = InteractionLog::from_interactions(vec![
            interaction(1, 1, 1),
            interaction(2, 2, 2),
        ]);
        let b = InteractionLog::from_interactions(vec![
            interaction(2, 2, 2),
            interaction(1, 1, 1),
        ]);
        assert_eq!(a.content_hash(), b.content_hash());
    }
}

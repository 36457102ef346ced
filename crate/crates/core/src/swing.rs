//! Swing item-to-item similarity from click co-occurrence.
//!
//! sim(i, j) sums 1/(alpha + |I_u ∩ I_v|) over ordered pairs (u, v), u ≠ v,
//! of users who clicked both i and j, where I_u is u's clicked item set.
//! A pair of items both clicked by the same *pair* of users scores high
//! unless those users click everything together anyway; the overlap term in
//! the denominator discounts such "swing-less" user pairs.
//!
//! Summation is performed in sorted user order for every item pair, so the
//! result is reproducible bit for bit and directly comparable to a naive
//! reference implementation that walks the same order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::stable_hash::Fnv1a;
use crate::types::{EventType, InteractionLog, ItemId, UserId};

/// Symmetric item-pair similarity scores; only strictly positive entries are
/// stored, keyed with the smaller item id first.
#[derive(Debug, Clone, PartialEq)]
pub struct SwingScoreTable {
    entries: BTreeMap<(ItemId, ItemId), f64>,
    /// Per-item partner lists pre-sorted by (similarity desc, id asc).
    by_item: BTreeMap<ItemId, Vec<(ItemId, f64)>>,
    source_hash: u64,
    alpha: f64,
}

impl SwingScoreTable {
    fn build(entries: BTreeMap<(ItemId, ItemId), f64>, source_hash: u64, alpha: f64) -> Self {
        let mut by_item: BTreeMap<ItemId, Vec<(ItemId, f64)>> = BTreeMap::new();
        for (&(a, b), &sim) in &entries {
            by_item.entry(a).or_default().push((b, sim));
            by_item.entry(b).or_default().push((a, sim));
        }
        for partners in by_item.values_mut() {
            partners.sort_by(|(id_a, sim_a), (id_b, sim_b)| {
                sim_b.total_cmp(sim_a).then(id_a.cmp(id_b))
            });
        }
        SwingScoreTable {
            entries,
            by_item,
            source_hash,
            alpha,
        }
    }

    /// Similarity of (a, b) in either orientation; 0 when never co-clicked.
    pub fn get(&self, a: ItemId, b: ItemId) -> f64 {
        let key = if a <= b { (a, b) } else { (b, a) };
        self.entries.get(&key).copied().unwrap_or(0.0)
    }

    /// The k highest-similarity partners of `item`, similarity descending,
    /// ties by item id ascending. Shorter than k when fewer partners exist.
    pub fn top_positives(&self, item: ItemId, k: usize) -> Vec<ItemId> {
        match self.by_item.get(&item) {
            Some(partners) => partners.iter().take(k).map(|(id, _)| *id).collect(),
            None => Vec::new(),
        }
    }

    /// Number of stored (positive) pairs.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((ItemId, ItemId), f64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    /// Content hash of the log this table was computed from.
    pub fn source_hash(&self) -> u64 {
        self.source_hash
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Clicked item sets per user, with users above `max_user_degree` items
/// down-sampled (uniform, per-user seeded) to bound the pair blowup.
fn clicked_item_sets(
    log: &InteractionLog,
    max_user_degree: usize,
    seed: u64,
) -> BTreeMap<UserId, BTreeSet<ItemId>> {
    let mut sets: BTreeMap<UserId, BTreeSet<ItemId>> = BTreeMap::new();
    for i in log.interactions() {
        if i.event == EventType::Click {
            sets.entry(i.user).or_default().insert(i.item);
        }
    }
    for (user, items) in sets.iter_mut() {
        if items.len() > max_user_degree {
            let sorted: Vec<ItemId> = items.iter().copied().collect();
            let mut h = Fnv1a::new();
            h.write_u64(seed);
            h.write_u64(user.0);
            let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
            let chosen = rand::seq::index::sample(&mut rng, sorted.len(), max_user_degree);
            *items = chosen.iter().map(|idx| sorted[idx]).collect();
        }
    }
    sets
}

/// Computes the full Swing table over click events.
///
/// `seed` drives only the down-sampling of heavy users; logs where every
/// user stays within `max_user_degree` are seed-independent.
pub fn compute_swing(
    log: &InteractionLog,
    alpha_swing: f64,
    max_user_degree: usize,
    seed: u64,
) -> Result<SwingScoreTable> {
    if !(alpha_swing > 0.0) || !alpha_swing.is_finite() {
        return Err(Error::Config(format!(
            "alpha_swing must be > 0, got {alpha_swing}"
        )));
    }
    if max_user_degree == 0 {
        return Err(Error::Config("max_user_degree must be positive".into()));
    }
    let user_items = clicked_item_sets(log, max_user_degree, seed);

    let mut item_users: BTreeMap<ItemId, Vec<UserId>> = BTreeMap::new();
    let mut candidate_pairs: BTreeSet<(ItemId, ItemId)> = BTreeSet::new();
    for (&user, items) in &user_items {
        let sorted: Vec<ItemId> = items.iter().copied().collect();
        for (idx, &a) in sorted.iter().enumerate() {
            item_users.entry(a).or_default().push(user);
            for &b in &sorted[idx + 1..] {
                candidate_pairs.insert((a, b));
            }
        }
    }

    let mut overlap_memo: HashMap<(UserId, UserId), f64> = HashMap::new();
    let mut overlap = |u: UserId, v: UserId| -> f64 {
        let key = if u <= v { (u, v) } else { (v, u) };
        *overlap_memo.entry(key).or_insert_with(|| {
            user_items[&u].intersection(&user_items[&v]).count() as f64
        })
    };

    let mut entries = BTreeMap::new();
    for (a, b) in candidate_pairs {
        // Users are inserted in BTreeMap order above, so both lists are
        // sorted; the merge intersection is therefore sorted too.
        let common = sorted_intersection(&item_users[&a], &item_users[&b]);
        if common.len() < 2 {
            continue;
        }
        let mut sim = 0.0;
        for &u in &common {
            for &v in &common {
                if u != v {
                    sim += 1.0 / (alpha_swing + overlap(u, v));
                }
            }
        }
        entries.insert((a, b), sim);
    }
    Ok(SwingScoreTable::build(
        entries,
        log.content_hash(),
        alpha_swing,
    ))
}

fn sorted_intersection(a: &[UserId], b: &[UserId]) -> Vec<UserId> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Writes `item_a<TAB>item_b<TAB>score` rows preceded by provenance headers.
/// Scores use the shortest representation that parses back identically, so
/// the dump round-trips losslessly.
pub fn save_swing(table: &SwingScoreTable, path: &Path) -> Result<()> {
    save_swing_with_meta(table, path, None)
}

/// Save variant that also records the config hash of the producing run as a
/// header comment. Readers accept files with or without it.
pub fn save_swing_with_meta(
    table: &SwingScoreTable,
    path: &Path,
    config_hash: Option<u64>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |s: String| w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e));
    write(format!("# source_hash={:016x}\n", table.source_hash))?;
    write(format!("# alpha_swing={}\n", table.alpha))?;
    if let Some(hash) = config_hash {
        write(format!("# config_hash={hash:016x}\n"))?;
    }
    for ((a, b), sim) in &table.entries {
        write(format!("{a}\t{b}\t{sim}\n"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dump produced by [`save_swing`]; the provenance headers are
/// required so downstream consumers can verify the table's source log.
pub fn load_swing(path: &Path) -> Result<SwingScoreTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut source_hash: Option<u64> = None;
    let mut alpha: Option<f64> = None;
    let mut entries = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(value) = rest.strip_prefix("source_hash=") {
                source_hash = Some(u64::from_str_radix(value, 16).map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("invalid source_hash '{value}'"),
                })?);
            } else if let Some(value) = rest.strip_prefix("alpha_swing=") {
                alpha = Some(value.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("invalid alpha_swing '{value}'"),
                })?);
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let a = ItemId(fields[0].parse::<u64>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("invalid item id '{}'", fields[0]),
        })?);
        let b = ItemId(fields[1].parse::<u64>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("invalid item id '{}'", fields[1]),
        })?);
        let sim = fields[2].parse::<f64>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("invalid score '{}'", fields[2]),
        })?;
        if a >= b {
            return Err(Error::Validation(format!(
                "line {line_no}: pair must be stored with the smaller id first"
            )));
        }
        if entries.insert((a, b), sim).is_some() {
            return Err(Error::Validation(format!(
                "line {line_no}: duplicate pair ({a}, {b})"
            )));
        }
    }
    let source_hash = source_hash.ok_or_else(|| {
        Error::Format(format!("{}: missing '# source_hash=' header", path.display()))
    })?;
    let alpha = alpha.ok_or_else(|| {
        Error::Format(format!("{}: missing '# alpha_swing=' header", path.display()))
    })?;
    Ok(SwingScoreTable::build(entries, source_hash, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{CategoryId, Interaction};
    use rand::{Rng, SeedableRng};

    fn click(user: u64, item: u64) -> Interaction {
        Interaction {
            user: UserId(user),
            item: ItemId(item),
            category: CategoryId(0),
            timestamp: item,
            event: EventType::Click,
        }
    }

    fn log_of(rows: Vec<Interaction>) -> InteractionLog {
        InteractionLog::from_interactions(rows)
    }

    /// Direct quadruple-loop reference: same sorted iteration order as the
    /// implementation, overlaps recomputed naively each time.
    fn naive_swing(log: &InteractionLog, alpha: f64) -> BTreeMap<(ItemId, ItemId), f64> {
        let mut user_items: BTreeMap<UserId, BTreeSet<ItemId>> = BTreeMap::new();
        for i in log.interactions() {
            if i.event == EventType::Click {
                user_items.entry(i.user).or_default().insert(i.item);
            }
        }
        let items: BTreeSet<ItemId> = user_items.values().flatten().copied().collect();
        let users: Vec<UserId> = user_items.keys().copied().collect();
        let mut out = BTreeMap::new();
        for &a in &items {
            for &b in &items {
                if a >= b {
                    continue;
                }
                let common: Vec<UserId> = users
                    .iter()
                    .copied()
                    .filter(|u| user_items[u].contains(&a) && user_items[u].contains(&b))
                    .collect();
                if common.len() < 2 {
                    continue;
                }
                let mut sim = 0.0;
                for &u in &common {
                    for &v in &common {
                        if u != v {
                            let overlap =
                                user_items[&u].intersection(&user_items[&v]).count() as f64;
                            sim += 1.0 / (alpha + overlap);
                        }
                    }
                }
                out.insert((a, b), sim);
            }
        }
        out
    }

    #[test]
    fn two_user_example_scores_two_thirds() {
        let log = log_of(vec![click(1, 10), click(1, 11), click(2, 10), click(2, 11)]);
        let table = compute_swing(&log, 1.0, 100, 0).unwrap();
        let sim = table.get(ItemId(10), ItemId(11));
        assert!((sim - 0.6667).abs() < 1e-4);
        assert_eq!(sim, 1.0 / 3.0 + 1.0 / 3.0);
    }

    #[test]
    fn single_user_pair_scores_zero() {
        let log = log_of(vec![click(1, 10), click(1, 11)]);
        let table = compute_swing(&log, 1.0, 100, 0).unwrap();
        assert_eq!(table.get(ItemId(10), ItemId(11)), 0.0);
        assert!(table.is_empty());
    }

    #[test]
    fn disjoint_audiences_score_zero() {
        let log = log_of(vec![click(1, 10), click(2, 11), click(3, 10), click(4, 11)]);
        let table = compute_swing(&log, 1.0, 100, 0).unwrap();
        assert_eq!(table.get(ItemId(10), ItemId(11)), 0.0);
    }

    #[test]
    fn symmetry_of_lookup() {
        let log = log_of(vec![click(1, 10), click(1, 11), click(2, 10), click(2, 11)]);
        let table = compute_swing(&log, 1.0, 100, 0).unwrap();
        assert_eq!(
            table.get(ItemId(10), ItemId(11)),
            table.get(ItemId(11), ItemId(10))
        );
    }

    #[test]
    fn non_click_events_do_not_contribute() {
        let mut rows = vec![click(1, 10), click(1, 11), click(2, 10)];
        rows.push(Interaction {
            user: UserId(2),
            item: ItemId(11),
            category: CategoryId(0),
            timestamp: 0,
            event: EventType::Purchase,
        });
        let table = compute_swing(&log_of(rows), 1.0, 100, 0).unwrap();
        assert_eq!(table.get(ItemId(10), ItemId(11)), 0.0);
    }

    #[test]
    fn matches_naive_oracle_exactly_on_random_small_logs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(314);
        for trial in 0..50 {
            let users = rng.random_range(2..20);
            let items = rng.random_range(2..20);
            let events = rng.random_range(5..120);
            let mut rows = Vec::new();
            for _ in 0..events {
                rows.push(click(rng.random_range(0..users), rng.random_range(0..items)));
            }
            let log = log_of(rows);
            let table = compute_swing(&log, 1.0, 1000, trial).unwrap();
            let oracle = naive_swing(&log, 1.0);
            assert_eq!(table.entries.len(), oracle.len(), "trial {trial}");
            for (pair, want) in &oracle {
                let got = table.get(pair.0, pair.1);
                assert_eq!(got.to_bits(), want.to_bits(), "trial {trial} pair {pair:?}");
            }
        }
    }

    #[test]
    fn top_positives_orders_by_score_then_id() {
        // Craft sims directly to check the ordering contract.
        let entries = BTreeMap::from([
            ((ItemId(1), ItemId(2)), 0.5),
            ((ItemId(1), ItemId(3)), 0.9),
            ((ItemId(1), ItemId(4)), 0.5),
        ]);
        let table = SwingScoreTable::build(entries, 0, 1.0);
        assert_eq!(
            table.top_positives(ItemId(1), 2),
            vec![ItemId(3), ItemId(2)]
        );
        assert_eq!(table.top_positives(ItemId(1), 5).len(), 3);
        assert!(table.top_positives(ItemId(1), 0).is_empty());
        assert!(table.top_positives(ItemId(99), 3).is_empty());
    }

    #[test]
    fn heavy_user_downsampling_is_seed_deterministic() {
        let mut rows = Vec::new();
        for user in 1..=3 {
            for item in 0..150 {
                rows.push(click(user, item));
            }
        }
        let log = log_of(rows);
        let a = compute_swing(&log, 1.0, 50, 42).unwrap();
        let b = compute_swing(&log, 1.0, 50, 42).unwrap();
        assert_eq!(a, b);
        // Each user keeps 50 of 150 items, so pairs only survive where the
        // sampled subsets overlap; with the full log the table would hold
        // C(150, 2) pairs.
        assert!(!a.is_empty());
        assert!(a.len() < 150 * 149 / 2);
        let c = compute_swing(&log, 1.0, 50, 43).unwrap();
        assert_ne!(a.entries, c.entries);
    }

    #[test]
    fn dump_round_trips_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut rows = Vec::new();
        for _ in 0..200 {
            rows.push(click(rng.random_range(0..15), rng.random_range(0..15)));
        }
        let log = log_of(rows);
        let table = compute_swing(&log, 1.0, 100, 0).unwrap();
        assert!(!table.is_empty());
        let file = tempfile::NamedTempFile::new().unwrap();
        save_swing(&table, file.path()).unwrap();
        let loaded = load_swing(file.path()).unwrap();
        assert_eq!(table, loaded);
        assert_eq!(loaded.source_hash(), log.content_hash());
    }

    #[test]
    fn rejects_invalid_parameters() {
        let log = log_of(vec![click(1, 1)]);
        assert!(compute_swing(&log, 0.0, 100, 0).is_err());
        assert!(compute_swing(&log, -1.0, 100, 0).is_err());
        assert!(compute_swing(&log, 1.0, 0, 0).is_err());
    }
}

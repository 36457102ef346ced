//! Uncertainty-aware retrieval: a fixed-step beam search per layer driven
//! by the fusion score (score + beta · variance), wrapped in a top-down
//! descent that runs greedy (beam 1) above layer 0.
//!
//! With beta = 0 the uncertainty head is never consulted: candidates carry
//! variance 0 and the plain model score. That short-circuit is load-bearing
//! for controlled comparisons, because a Monte-Carlo head's mean score does
//! not rank identically to the underlying logit.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::hnsw::LayeredGraphIndex;
use crate::scorer::UserItemScorer;
use crate::types::{ItemId, UserFeatures, UserId};
use crate::uncertainty::{logistic, UeHead};

/// Eq.-style fusion of relevance and uncertainty.
pub fn fusion_score(score: f64, variance: f64, beta: f64) -> f64 {
    score + beta * variance
}

/// Parameters of a top-K retrieval run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalConfig {
    /// Weight on variance in the fusion score; may be 0 or negative.
    pub beta: f64,
    /// Number of items returned per user.
    pub k: usize,
    /// Beam width at layer 0.
    pub ef_c: usize,
    /// Fixed iteration count per layer.
    pub t_c: usize,
}

impl RetrievalConfig {
    /// Defaults: T_c = 50, ef_c = max(200, 2k).
    pub fn new(beta: f64, k: usize) -> Self {
        RetrievalConfig {
            beta,
            k,
            ef_c: 200.max(2 * k),
            t_c: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be finite, got {}", self.beta)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be ≥ 1".into()));
        }
        if self.t_c == 0 {
            return Err(Error::Config("steps per layer T_c must be ≥ 1".into()));
        }
        if self.ef_c < self.k {
            return Err(Error::Config(format!(
                "ef_c {} must be ≥ k {} at layer 0",
                self.ef_c, self.k
            )));
        }
        Ok(())
    }
}

/// One retrieved item with its exact scoring triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredCandidate {
    pub item: ItemId,
    /// Model relevance in [0, 1].
    pub score_u2i: f64,
    /// Uncertainty of the relevance estimate, ≥ 0.
    pub var_u2i: f64,
    /// score_u2i + beta · var_u2i for the beta in effect.
    pub fusion: f64,
}

fn sort_desc(w: &mut [ScoredCandidate]) {
    w.sort_by(|a, b| b.fusion.total_cmp(&a.fusion).then(a.item.cmp(&b.item)));
}

/// Scores one item for the user. Consults the uncertainty head only when
/// beta is nonzero and a head is supplied.
fn score_item(
    scorer: &dyn UserItemScorer,
    ue: Option<&dyn UeHead>,
    user: &UserFeatures,
    item: ItemId,
    beta: f64,
) -> Result<ScoredCandidate> {
    let (logit, repr) = scorer.score_user_item(user, item)?;
    let (score, variance) = match ue {
        Some(head) if beta != 0.0 => {
            let est = head.estimate_pair(user.user.0, item.0, logit, &repr)?;
            (est.score, est.variance)
        }
        _ => (logistic(logit), 0.0),
    };
    Ok(ScoredCandidate {
        item,
        score_u2i: score,
        var_u2i: variance,
        fusion: fusion_score(score, variance, beta),
    })
}

/// Fixed-step beam search at one layer.
///
/// State per the algorithm: S are visited items, C the frontier, W the
/// current best ef_c by fusion. Each of the T_c steps expands C's unvisited
/// neighbors N, scores them, keeps the top ef_c of W ∪ N, and continues
/// from the new items that survived (C = W ∩ N). An empty C ends the loop
/// early, which cannot change the result: an empty frontier generates no
/// further candidates.
pub fn un_layer_search(
    index: &LayeredGraphIndex,
    scorer: &dyn UserItemScorer,
    ue: Option<&dyn UeHead>,
    user: &UserFeatures,
    entry: &[ItemId],
    layer: usize,
    t_c: usize,
    ef_c: usize,
    beta: f64,
) -> Result<Vec<ScoredCandidate>> {
    if ef_c == 0 || t_c == 0 {
        return Err(Error::Config("ef_c and T_c must be ≥ 1".into()));
    }
    let mut visited: BTreeSet<ItemId> = BTreeSet::new();
    let mut frontier: BTreeSet<ItemId> = BTreeSet::new();
    let mut best: Vec<ScoredCandidate> = Vec::new();
    for &e in entry {
        if !index.contains_at_layer(layer, e) {
            return Err(Error::Input(format!(
                "entry item {e} does not exist at layer {layer}"
            )));
        }
        if visited.insert(e) {
            frontier.insert(e);
            best.push(score_item(scorer, ue, user, e, beta)?);
        }
    }
    sort_desc(&mut best);
    best.truncate(ef_c);

    for _ in 0..t_c {
        if frontier.is_empty() {
            break;
        }
        // N: unvisited neighbors of the frontier, visited as discovered.
        let mut fresh: BTreeSet<ItemId> = BTreeSet::new();
        for &c in &frontier {
            for edge in index.neighbors(layer, c) {
                if visited.insert(edge.to) {
                    fresh.insert(edge.to);
                }
            }
        }
        if fresh.is_empty() {
            break;
        }
        // One scoring pass over N, then keep the top ef_c of W ∪ N.
        for &item in &fresh {
            best.push(score_item(scorer, ue, user, item, beta)?);
        }
        sort_desc(&mut best);
        best.truncate(ef_c);
        frontier = best
            .iter()
            .map(|c| c.item)
            .filter(|item| fresh.contains(item))
            .collect();
    }
    Ok(best)
}

/// Top-K retrieval for one user: greedy descent (beam 1) from the entry
/// point through the upper layers, a full beam at layer 0, then the k best
/// by fusion.
pub fn retrieve_topk(
    index: &LayeredGraphIndex,
    scorer: &dyn UserItemScorer,
    ue: Option<&dyn UeHead>,
    user: &UserFeatures,
    config: &RetrievalConfig,
) -> Result<Vec<ScoredCandidate>> {
    config.validate()?;
    if index.num_items() == 0 {
        return Ok(Vec::new());
    }
    let mut entry = index.entry_point();
    for layer in (1..=index.max_layer()).rev() {
        let w = un_layer_search(index, scorer, ue, user, &[entry], layer, config.t_c, 1, config.beta)?;
        entry = w.first().expect("non-empty beam").item;
    }
    let mut w = un_layer_search(
        index,
        scorer,
        ue,
        user,
        &[entry],
        0,
        config.t_c,
        config.ef_c,
        config.beta,
    )?;
    w.truncate(config.k);
    Ok(w)
}

/// Retrieval results for a set of users.
pub type RetrievalRun = BTreeMap<UserId, Vec<ScoredCandidate>>;

/// Writes `user<TAB>rank<TAB>item<TAB>score<TAB>var<TAB>fusion` lines,
/// ranks 1-based, preceded by `#`-prefixed comment lines. Floats use the
/// shortest representation that round-trips, so save → load is exact.
pub fn save_retrieval(run: &RetrievalRun, path: &Path, comments: &[String]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |line: String| -> Result<()> {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))
    };
    for c in comments {
        emit(format!("# {c}"))?;
    }
    for (user, candidates) in run {
        for (i, c) in candidates.iter().enumerate() {
            emit(format!(
                "{user}\t{}\t{}\t{}\t{}\t{}",
                i + 1,
                c.item,
                c.score_u2i,
                c.var_u2i,
                c.fusion
            ))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a retrieval file back. Ranks must be 1..len and contiguous per
/// user; comment lines are skipped.
pub fn load_retrieval(path: &Path) -> Result<RetrievalRun> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut run: RetrievalRun = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 6 tab-separated fields, found {}", fields.len()),
            });
        }
        let parse_u64 = |s: &str, what: &str| {
            s.parse::<u64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid {what} '{s}'"),
            })
        };
        let parse_f64 = |s: &str, what: &str| {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid {what} '{s}'"),
            })
        };
        let user = UserId(parse_u64(fields[0], "user id")?);
        let rank = parse_u64(fields[1], "rank")? as usize;
        let candidate = ScoredCandidate {
            item: ItemId(parse_u64(fields[2], "item id")?),
            score_u2i: parse_f64(fields[3], "score")?,
            var_u2i: parse_f64(fields[4], "variance")?,
            fusion: parse_f64(fields[5], "fusion")?,
        };
        let list = run.entry(user).or_default();
        if rank != list.len() + 1 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("rank {rank} out of sequence for user {user}"),
            });
        }
        list.push(candidate);
    }
    Ok(run)
}

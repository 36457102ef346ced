//! Retrieval quality metrics and their aggregation.
//!
//! Recall@N is measured against a ground-truth item set per user.
//! CateEntropy@N is the base-2 Shannon entropy of the retrieved category
//! distribution. NewCateRatio@N divides the count of retrieved categories
//! absent from the user's history by the history category count; that
//! denominator makes values above 1 possible, and that behavior is kept,
//! not "fixed".

pub mod ablation;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::retrieval::RetrievalRun;
use crate::types::{CategoryId, GroundTruth, InteractionLog, ItemId, UserId};

/// |top-n(retrieved) ∩ truth| / |truth|. The denominator is the full truth
/// set, so short retrieved lists lower recall and never error.
pub fn recall_at_n(retrieved: &[ItemId], truth: &BTreeSet<ItemId>, n: usize) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Input("recall undefined for an empty truth set".into()));
    }
    let hits = retrieved
        .iter()
        .take(n)
        .filter(|item| truth.contains(item))
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// |retrieved \ history| / |history|, with the history-sized denominator.
pub fn new_cate_ratio(
    retrieved_cates: &BTreeSet<CategoryId>,
    history_cates: &BTreeSet<CategoryId>,
) -> Result<f64> {
    if history_cates.is_empty() {
        return Err(Error::Input(
            "new-category ratio undefined for an empty history".into(),
        ));
    }
    let fresh = retrieved_cates.difference(history_cates).count();
    Ok(fresh as f64 / history_cates.len() as f64)
}

/// −Σ_c p_c log2 p_c over the categories of the retrieved list.
pub fn cate_entropy(
    retrieved: &[ItemId],
    category_of: &BTreeMap<ItemId, CategoryId>,
) -> Result<f64> {
    if retrieved.is_empty() {
        return Err(Error::Input("entropy undefined for an empty list".into()));
    }
    let mut counts: BTreeMap<CategoryId, usize> = BTreeMap::new();
    for item in retrieved {
        let cate = category_of.get(item).ok_or_else(|| {
            Error::Lookup(format!("item {item} has no category assignment"))
        })?;
        *counts.entry(*cate).or_insert(0) += 1;
    }
    let total = retrieved.len() as f64;
    let mut entropy = 0.0;
    for &count in counts.values() {
        let p = count as f64 / total;
        entropy -= p * p.log2();
    }
    Ok(entropy)
}

/// Per-user metric values; `None` marks a skip, not a zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserMetricRow {
    pub recall: Option<f64>,
    pub entropy: Option<f64>,
    pub new_cate: Option<f64>,
}

/// Aggregated metrics at one cutoff. Means exclude skipped users; the skip
/// counts say how many were excluded and why.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub n: usize,
    pub recall_at_n: f64,
    pub cate_entropy: f64,
    pub new_cate_ratio: f64,
    pub users_evaluated: usize,
    pub skipped_empty_truth: usize,
    pub skipped_empty_history: usize,
    pub skipped_empty_retrieved: usize,
    pub per_user: BTreeMap<UserId, UserMetricRow>,
}

/// The set of categories each user has interacted with.
pub fn history_categories(log: &InteractionLog) -> BTreeMap<UserId, BTreeSet<CategoryId>> {
    let mut out: BTreeMap<UserId, BTreeSet<CategoryId>> = BTreeMap::new();
    for i in log.interactions() {
        out.entry(i.user).or_default().insert(i.category);
    }
    out
}

/// Scores a retrieval run against truth at cutoff `n`. Users lacking truth
/// are skipped for recall, users lacking history categories are skipped for
/// the new-category ratio, and users with empty retrieved lists are skipped
/// for entropy; each skip is counted.
pub fn evaluate_retrieval(
    run: &RetrievalRun,
    truth: &GroundTruth,
    history_cates: &BTreeMap<UserId, BTreeSet<CategoryId>>,
    category_of: &BTreeMap<ItemId, CategoryId>,
    n: usize,
) -> Result<MetricReport> {
    if n == 0 {
        return Err(Error::Config("metric cutoff n must be ≥ 1".into()));
    }
    let mut report = MetricReport {
        n,
        recall_at_n: 0.0,
        cate_entropy: 0.0,
        new_cate_ratio: 0.0,
        users_evaluated: 0,
        skipped_empty_truth: 0,
        skipped_empty_history: 0,
        skipped_empty_retrieved: 0,
        per_user: BTreeMap::new(),
    };
    let mut recall_sum = 0.0;
    let mut recall_n = 0usize;
    let mut entropy_sum = 0.0;
    let mut entropy_n = 0usize;
    let mut fresh_sum = 0.0;
    let mut fresh_n = 0usize;
    for (&user, candidates) in run {
        let retrieved: Vec<ItemId> = candidates.iter().take(n).map(|c| c.item).collect();
        let mut row = UserMetricRow {
            recall: None,
            entropy: None,
            new_cate: None,
        };
        match truth.get(&user).filter(|t| !t.is_empty()) {
            Some(t) => {
                let r = recall_at_n(&retrieved, t, n)?;
                recall_sum += r;
                recall_n += 1;
                row.recall = Some(r);
            }
            None => report.skipped_empty_truth += 1,
        }
        if retrieved.is_empty() {
            report.skipped_empty_retrieved += 1;
        } else {
            let e = cate_entropy(&retrieved, category_of)?;
            entropy_sum += e;
            entropy_n += 1;
            row.entropy = Some(e);
        }
        match history_cates.get(&user).filter(|h| !h.is_empty()) {
            Some(hist) => {
                let mut retrieved_cates = BTreeSet::new();
                for item in &retrieved {
                    let cate = category_of.get(item).ok_or_else(|| {
                        Error::Lookup(format!("item {item} has no category assignment"))
                    })?;
                    retrieved_cates.insert(*cate);
                }
                let f = new_cate_ratio(&retrieved_cates, hist)?;
                fresh_sum += f;
                fresh_n += 1;
                row.new_cate = Some(f);
            }
            None => report.skipped_empty_history += 1,
        }
        report.per_user.insert(user, row);
    }
    report.users_evaluated = recall_n;
    report.recall_at_n = if recall_n > 0 { recall_sum / recall_n as f64 } else { 0.0 };
    report.cate_entropy = if entropy_n > 0 { entropy_sum / entropy_n as f64 } else { 0.0 };
    report.new_cate_ratio = if fresh_n > 0 { fresh_sum / fresh_n as f64 } else { 0.0 };
    Ok(report)
}

/// Ranks with average ties: values sorted ascending share the mean of the
/// rank positions they span.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ties (Pearson on ranks).
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Input(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Input("need at least two points".into()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mean;
        let dy = ry[i] - mean;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Err(Error::Numeric(
            "rank correlation undefined for a constant sequence".into(),
        ));
    }
    Ok(cov / (var_x * var_y).sqrt())
}

//! Uncertainty-aware index post-processing: reweight every edge by the
//! item-pair variance, then prune each neighbor list to the closest n′ by
//! weighted distance.
//!
//! weighted = raw · min(m_cap, 1 + alpha · variance)
//!
//! Reweighting never touches raw distances, so the pass is repeatable and
//! the alpha→0⁺ limit degenerates to plain distance pruning.

use crate::error::{Error, Result};
use crate::hnsw::{LayeredGraphIndex, ReweightProvenance};
use crate::scorer::ItemPairScorer;
use crate::uncertainty::UeHead;

/// Parameters of the reweight + prune pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReweightConfig {
    /// Variance multiplier; must be strictly positive.
    pub alpha: f64,
    /// Ceiling on the distance multiplier; must exceed 1.
    pub m_cap: f64,
    /// Neighbor-list size after pruning.
    pub n_prime: u32,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        ReweightConfig {
            alpha: 1.0,
            m_cap: 2.0,
            n_prime: 32,
        }
    }
}

impl ReweightConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::Config(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !self.m_cap.is_finite() || self.m_cap <= 1.0 {
            return Err(Error::Config(format!(
                "m_cap must be > 1, got {}",
                self.m_cap
            )));
        }
        if self.n_prime == 0 {
            return Err(Error::Config("n_prime must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// The edge-reweighting formula. The multiplier is clamped to m_cap before
/// the product so the cap is exact.
pub fn weighted_distance(raw: f64, variance: f64, alpha: f64, m_cap: f64) -> f64 {
    raw * (1.0 + alpha * variance).min(m_cap)
}

/// Scores every directed edge at every layer, writes its variance, and
/// recomputes the weighted distance. Raw distances are untouched; lists are
/// re-sorted by (weighted, id) so downstream pruning is a prefix cut.
pub fn reweight_edges(
    index: &LayeredGraphIndex,
    scorer: &dyn ItemPairScorer,
    ue: &dyn UeHead,
    config: &ReweightConfig,
) -> Result<LayeredGraphIndex> {
    config.validate()?;
    if config.n_prime as usize >= index.build_n() {
        return Err(Error::Config(format!(
            "n_prime {} must be smaller than the build-time neighbor budget {}",
            config.n_prime,
            index.build_n()
        )));
    }
    let mut out = index.clone();
    for adj in out.layers_mut() {
        for (&from, edges) in adj.iter_mut() {
            for edge in edges.iter_mut() {
                let (logit, repr) = scorer.score_item_pair(from, edge.to)?;
                let est = ue.estimate_pair(from.0, edge.to.0, logit, &repr)?;
                if !est.variance.is_finite() || est.variance < 0.0 {
                    return Err(Error::Domain(format!(
                        "edge {from}→{}: variance {} is not a finite non-negative number",
                        edge.to, est.variance
                    )));
                }
                edge.variance = est.variance;
                edge.weighted = weighted_distance(edge.raw, edge.variance, config.alpha, config.m_cap);
            }
            edges.sort_by(|a, b| a.weighted.total_cmp(&b.weighted).then(a.to.cmp(&b.to)));
        }
    }
    out.set_provenance(ReweightProvenance {
        alpha: config.alpha,
        m_cap: config.m_cap,
        n_prime: config.n_prime,
    });
    Ok(out)
}

/// What a prune pass did, including the post-prune connectivity audit.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub n_prime: u32,
    pub lists_truncated: usize,
    pub edges_removed: usize,
    /// Fraction of layer-0 items reachable from the entry point afterwards.
    pub reachable_fraction_layer0: f64,
    pub warnings: Vec<String>,
}

/// Truncates every neighbor list to the n′ smallest weighted distances
/// (ties by item id ascending). When n′ is no smaller than the build-time
/// budget the pass is a no-op and says so in the report.
///
/// Connectivity after pruning is audited, never enforced: a reachable
/// fraction below 99% lands in `warnings`.
pub fn prune_neighbors(
    index: &LayeredGraphIndex,
    n_prime: u32,
) -> Result<(LayeredGraphIndex, PruneReport)> {
    if n_prime == 0 {
        return Err(Error::Config("n_prime must be ≥ 1".into()));
    }
    let mut report = PruneReport {
        n_prime,
        lists_truncated: 0,
        edges_removed: 0,
        reachable_fraction_layer0: 1.0,
        warnings: Vec::new(),
    };
    if n_prime as usize >= index.build_n() {
        report.warnings.push(format!(
            "n_prime {} is not below the neighbor budget {}; nothing pruned",
            n_prime,
            index.build_n()
        ));
        report.reachable_fraction_layer0 = index.reachable_fraction(0);
        return Ok((index.clone(), report));
    }
    let mut out = index.clone();
    for adj in out.layers_mut() {
        for edges in adj.values_mut() {
            edges.sort_by(|a, b| a.weighted.total_cmp(&b.weighted).then(a.to.cmp(&b.to)));
            if edges.len() > n_prime as usize {
                report.lists_truncated += 1;
                report.edges_removed += edges.len() - n_prime as usize;
                edges.truncate(n_prime as usize);
            }
        }
    }
    if let Some(p) = out.provenance().copied() {
        out.set_provenance(ReweightProvenance { n_prime, ..p });
    }
    let frac = out.reachable_fraction(0);
    report.reachable_fraction_layer0 = frac;
    if frac < 0.99 {
        report.warnings.push(format!(
            "layer-0 reachability after pruning is {frac:.4}, below the 0.99 target"
        ));
    }
    Ok((out, report))
}

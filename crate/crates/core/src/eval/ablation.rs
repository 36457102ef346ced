//! Index-only A/B/C ablation harness over the synthetic generator.
//!
//! Per data seed, one dataset, one split, and one base index are shared by
//! the three configurations:
//!   A: plain index, beta = 0 (no uncertainty anywhere),
//!   B: plain index, beta > 0 (uncertainty in retrieval only),
//!   C: reweighted + pruned index, beta > 0 (uncertainty in both).
//! Scoring uses a dot-product scorer over the observed (noisy) embeddings
//! and a count-based uncertainty head, so no training run is needed and a
//! 20-seed sweep stays cheap. Alpha is grid-searched on a validation seed
//! disjoint from the evaluation seeds.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::synth::{generate_synthetic, SyntheticData, SyntheticSpec};
use crate::eval::{evaluate_retrieval, history_categories, MetricReport};
use crate::hnsw::{build_index, LayeredGraphIndex};
use crate::retrieval::{retrieve_topk, RetrievalConfig, RetrievalRun};
use crate::scorer::DotProductScorer;
use crate::stable_hash::derive_seed;
use crate::types::{split_hash, split_leave_one_out, user_features_from_log, UserFeatures};
use crate::uncertainty::CountBasedHead;
use crate::unindex::{prune_neighbors, reweight_edges, ReweightConfig};

/// The three ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    A,
    B,
    C,
}

impl Group {
    pub fn label(self) -> &'static str {
        match self {
            Group::A => "A",
            Group::B => "B",
            Group::C => "C",
        }
    }
}

/// Harness parameters. `spec.seed` is overridden by each run seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub spec: SyntheticSpec,
    /// Evaluation seeds; one A/B/C row triple each.
    pub seeds: Vec<u64>,
    /// Seed used only for the alpha grid search.
    pub validation_seed: u64,
    pub alpha_grid: Vec<f64>,
    /// Beta for groups B and C.
    pub beta: f64,
    pub m_cap: f64,
    /// Build-time neighbor budget and post-prune size.
    pub n: usize,
    pub n_prime: u32,
    pub ef_construction: usize,
    pub k: usize,
    pub ef_c: usize,
    pub t_c: usize,
    /// Metric cutoff N.
    pub metric_n: usize,
    /// Count-head scale v0.
    pub v0: f64,
    /// Dot-product scorer temperature.
    pub temperature: f64,
    /// Users evaluated per seed (0 = all).
    pub max_eval_users: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            spec: SyntheticSpec::default(),
            seeds: (0..20).collect(),
            validation_seed: 1000,
            alpha_grid: vec![0.5, 1.0, 2.0, 4.0],
            beta: 1.0,
            m_cap: 2.0,
            n: 16,
            n_prime: 14,
            ef_construction: 100,
            k: 100,
            ef_c: 200,
            t_c: 50,
            metric_n: 100,
            v0: 0.25,
            temperature: 0.1,
            max_eval_users: 150,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        if self.seeds.contains(&self.validation_seed) {
            return Err(Error::Config(format!(
                "validation seed {} must be disjoint from the evaluation seeds",
                self.validation_seed
            )));
        }
        if self.alpha_grid.is_empty() {
            return Err(Error::Config("alpha grid must be non-empty".into()));
        }
        for &a in &self.alpha_grid {
            if !a.is_finite() || a <= 0.0 {
                return Err(Error::Config(format!("alpha grid value {a} must be > 0")));
            }
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(Error::Config(format!(
                "group B/C beta must be > 0, got {}",
                self.beta
            )));
        }
        if self.n_prime as usize >= self.n {
            return Err(Error::Config(format!(
                "n_prime {} must be below the build budget {}",
                self.n_prime, self.n
            )));
        }
        if self.v0 <= 0.0 || !self.v0.is_finite() {
            return Err(Error::Config(format!("v0 must be > 0, got {}", self.v0)));
        }
        RetrievalConfig {
            beta: self.beta,
            k: self.k,
            ef_c: self.ef_c,
            t_c: self.t_c,
        }
        .validate()?;
        if self.metric_n == 0 {
            return Err(Error::Config("metric cutoff N must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One TSV row: `group seed recall@N entropy@N newcate@N`.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub group: Group,
    pub seed: u64,
    pub recall: f64,
    pub entropy: f64,
    pub new_cate: f64,
}

/// Mean and median per group over the seed rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub group: Group,
    pub mean_recall: f64,
    pub median_recall: f64,
    pub mean_entropy: f64,
    pub median_entropy: f64,
    pub mean_new_cate: f64,
    pub median_new_cate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub chosen_alpha: f64,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<GroupSummary>,
    /// Split hash per seed; identical across the three groups by contract.
    pub split_hashes: BTreeMap<u64, u64>,
}

/// Everything the three groups share for one data seed.
pub struct SeedContext {
    pub data: SyntheticData,
    pub split_hash: u64,
    pub index: LayeredGraphIndex,
    pub scorer: DotProductScorer,
    pub head: CountBasedHead,
    pub users: Vec<UserFeatures>,
    pub history_cates: BTreeMap<crate::types::UserId, std::collections::BTreeSet<crate::types::CategoryId>>,
}

/// Generates the dataset, splits it, builds the base index, and wires the
/// scorer and count head — all deterministic in (config, seed).
pub fn prepare_seed(cfg: &AblationConfig, seed: u64) -> Result<SeedContext> {
    let spec = SyntheticSpec { seed, ..cfg.spec.clone() };
    let data = generate_synthetic(&spec)?;
    let (train, holdout) = split_leave_one_out(&data.log);
    let hash = split_hash(&train, &holdout);
    let index = build_index(
        &data.observed_embeddings,
        cfg.n,
        cfg.ef_construction,
        derive_seed(seed, "ablation/index"),
    )?;
    let scorer = DotProductScorer::new(&data.observed_embeddings, cfg.temperature)?;
    // Counts come from the training split: that is what a retrieval system
    // would know. User ids would collide with item ids in the count map, so
    // only items are counted; the user side contributes a constant v0 that
    // cannot change any per-user ranking.
    let head = CountBasedHead::new(cfg.v0, train.item_counts().into_iter().map(|(i, c)| (i.0, c)).collect())?;
    let features = user_features_from_log(&train);
    let cap = if cfg.max_eval_users == 0 { usize::MAX } else { cfg.max_eval_users };
    let users: Vec<UserFeatures> = features.into_values().take(cap).collect();
    let history_cates = history_categories(&train);
    Ok(SeedContext {
        data,
        split_hash: hash,
        index,
        scorer,
        head,
        users,
        history_cates,
    })
}

/// Applies the uncertainty reweight + prune pass to the context's index.
pub fn reweighted_index(
    ctx: &SeedContext,
    cfg: &AblationConfig,
    alpha: f64,
) -> Result<LayeredGraphIndex> {
    let rw_cfg = ReweightConfig {
        alpha,
        m_cap: cfg.m_cap,
        n_prime: cfg.n_prime,
    };
    let reweighted = reweight_edges(&ctx.index, &ctx.scorer, &ctx.head, &rw_cfg)?;
    let (pruned, _report) = prune_neighbors(&reweighted, cfg.n_prime)?;
    Ok(pruned)
}

/// Runs one retrieval wiring over the context's users and scores it.
/// Returns the report plus the split hash the run was evaluated under.
pub fn run_wiring(
    ctx: &SeedContext,
    cfg: &AblationConfig,
    index: &LayeredGraphIndex,
    beta: f64,
    with_head: bool,
) -> Result<(MetricReport, u64)> {
    let retrieval = RetrievalConfig {
        beta,
        k: cfg.k,
        ef_c: cfg.ef_c,
        t_c: cfg.t_c,
    };
    let mut run: RetrievalRun = BTreeMap::new();
    for user in &ctx.users {
        let head = if with_head { Some(&ctx.head as &dyn crate::uncertainty::UeHead) } else { None };
        let candidates = retrieve_topk(index, &ctx.scorer, head, user, &retrieval)?;
        run.insert(user.user, candidates);
    }
    let report = evaluate_retrieval(
        &run,
        &ctx.data.truth,
        &ctx.history_cates,
        &ctx.data.categories,
        cfg.metric_n,
    )?;
    Ok((report, ctx.split_hash))
}

fn group_report(
    ctx: &SeedContext,
    cfg: &AblationConfig,
    group: Group,
    alpha: f64,
    c_index: Option<&LayeredGraphIndex>,
) -> Result<(MetricReport, u64)> {
    match group {
        Group::A => run_wiring(ctx, cfg, &ctx.index, 0.0, false),
        Group::B => run_wiring(ctx, cfg, &ctx.index, cfg.beta, true),
        Group::C => {
            let owned;
            let index = match c_index {
                Some(i) => i,
                None => {
                    owned = reweighted_index(ctx, cfg, alpha)?;
                    &owned
                }
            };
            run_wiring(ctx, cfg, index, cfg.beta, true)
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Picks the alpha with the best Group-C recall on the validation seed;
/// ties go to the smaller alpha.
pub fn select_alpha(cfg: &AblationConfig) -> Result<f64> {
    if cfg.alpha_grid.len() == 1 {
        return Ok(cfg.alpha_grid[0]);
    }
    let ctx = prepare_seed(cfg, cfg.validation_seed)?;
    let mut best = (f64::NEG_INFINITY, cfg.alpha_grid[0]);
    for &alpha in &cfg.alpha_grid {
        let index = reweighted_index(&ctx, cfg, alpha)?;
        let (report, _) = run_wiring(&ctx, cfg, &index, cfg.beta, true)?;
        if report.recall_at_n > best.0 {
            best = (report.recall_at_n, alpha);
        }
    }
    Ok(best.1)
}

/// The full A/B/C comparison: per-seed rows plus a mean/median summary per
/// group. Bit-reproducible for a fixed config.
pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationTable> {
    cfg.validate()?;
    let chosen_alpha = select_alpha(cfg)?;
    let mut rows = Vec::with_capacity(cfg.seeds.len() * 3);
    let mut split_hashes = BTreeMap::new();
    for &seed in &cfg.seeds {
        let ctx = prepare_seed(cfg, seed)?;
        let c_index = reweighted_index(&ctx, cfg, chosen_alpha)?;
        let mut seed_hashes = Vec::new();
        for group in [Group::A, Group::B, Group::C] {
            let (report, hash) = group_report(&ctx, cfg, group, chosen_alpha, Some(&c_index))?;
            seed_hashes.push(hash);
            rows.push(AblationRow {
                group,
                seed,
                recall: report.recall_at_n,
                entropy: report.cate_entropy,
                new_cate: report.new_cate_ratio,
            });
        }
        if seed_hashes.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Validation(format!(
                "groups disagree on the train/test split for seed {seed}: {seed_hashes:?}"
            )));
        }
        split_hashes.insert(seed, seed_hashes[0]);
    }
    let mut summary = Vec::new();
    for group in [Group::A, Group::B, Group::C] {
        let of_group: Vec<&AblationRow> = rows.iter().filter(|r| r.group == group).collect();
        let n = of_group.len() as f64;
        let mut recalls: Vec<f64> = of_group.iter().map(|r| r.recall).collect();
        let mut entropies: Vec<f64> = of_group.iter().map(|r| r.entropy).collect();
        let mut fresh: Vec<f64> = of_group.iter().map(|r| r.new_cate).collect();
        summary.push(GroupSummary {
            group,
            mean_recall: recalls.iter().sum::<f64>() / n,
            median_recall: median(&mut recalls),
            mean_entropy: entropies.iter().sum::<f64>() / n,
            median_entropy: median(&mut entropies),
            mean_new_cate: fresh.iter().sum::<f64>() / n,
            median_new_cate: median(&mut fresh),
        });
    }
    Ok(AblationTable {
        chosen_alpha,
        rows,
        summary,
        split_hashes,
    })
}

/// Mean metrics per beta over the config's seeds, plain-index wiring.
/// Beta 0 takes the no-uncertainty path by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaSweepRow {
    pub beta: f64,
    pub mean_recall: f64,
    pub mean_entropy: f64,
    pub mean_new_cate: f64,
}

pub fn run_beta_sweep(cfg: &AblationConfig, betas: &[f64]) -> Result<Vec<BetaSweepRow>> {
    cfg.validate()?;
    if betas.is_empty() {
        return Err(Error::Config("beta sweep needs at least one beta".into()));
    }
    let mut acc = vec![(0.0, 0.0, 0.0); betas.len()];
    for &seed in &cfg.seeds {
        let ctx = prepare_seed(cfg, seed)?;
        for (i, &beta) in betas.iter().enumerate() {
            let (report, _) = run_wiring(&ctx, cfg, &ctx.index, beta, beta != 0.0)?;
            acc[i].0 += report.recall_at_n;
            acc[i].1 += report.cate_entropy;
            acc[i].2 += report.new_cate_ratio;
        }
    }
    let n = cfg.seeds.len() as f64;
    Ok(betas
        .iter()
        .zip(acc)
        .map(|(&beta, (r, e, f))| BetaSweepRow {
            beta,
            mean_recall: r / n,
            mean_entropy: e / n,
            mean_new_cate: f / n,
        })
        .collect())
}

/// TSV rows `group seed recall@N entropy@N newcate@N`; the chosen alpha,
/// cutoff, and summary travel as comment lines.
pub fn save_ablation(table: &AblationTable, metric_n: usize, path: &Path, comments: &[String]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |line: String| -> Result<()> {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))
    };
    for c in comments {
        emit(format!("# {c}"))?;
    }
    emit(format!("# chosen_alpha={}", table.chosen_alpha))?;
    emit(format!("# columns=group\tseed\trecall@{metric_n}\tentropy@{metric_n}\tnewcate@{metric_n}"))?;
    for row in &table.rows {
        emit(format!(
            "{}\t{}\t{}\t{}\t{}",
            row.group.label(),
            row.seed,
            row.recall,
            row.entropy,
            row.new_cate
        ))?;
    }
    for s in &table.summary {
        emit(format!(
            "# summary group={} mean_recall={} median_recall={} mean_entropy={} median_entropy={} mean_newcate={} median_newcate={}",
            s.group.label(),
            s.mean_recall,
            s.median_recall,
            s.mean_entropy,
            s.median_entropy,
            s.mean_new_cate,
            s.median_new_cate
        ))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

//! The eight pipeline subcommands. Each is a pure function of its input
//! files, the resolved configuration, and the root seed; outputs embed the
//! config hash that produced them.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use uann_core::eval::ablation::{run_ablation, run_beta_sweep, save_ablation};
use uann_core::eval::synth::generate_synthetic;
use uann_core::eval::{evaluate_retrieval, history_categories, MetricReport};
use uann_core::hnsw::{build_index, load_index, save_index, LayeredGraphIndex};
use uann_core::io::{
    ingest_interactions, load_embeddings_with_meta, load_item_categories, load_truth,
    save_embeddings_with_meta, save_interactions, save_item_categories, save_truth, LogFormat,
};
use uann_core::model::{load_model, save_model_with_meta, train};
use uann_core::retrieval::{load_retrieval, retrieve_topk, save_retrieval, RetrievalRun};
use uann_core::scorer::{CachedModelScorer, DotProductScorer, UserItemScorer};
use uann_core::swing::{compute_swing, load_swing, save_swing_with_meta};
use uann_core::types::{
    split_hash, split_leave_one_out, user_features_from_log, InteractionLog, UserFeatures,
};
use uann_core::uncertainty::{CountBasedHead, UeHead};
use uann_core::unindex::{prune_neighbors, reweight_edges, PruneReport};
use uann_core::Error;

use crate::config::RunConfig;

/// Command failures, separated so `main` can map them to exit codes:
/// missing input → 2, config violation → 3, anything else → 1.
#[derive(Debug)]
pub enum CliError {
    MissingInput(PathBuf),
    Core(Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::MissingInput(path) => write!(f, "missing input file: {}", path.display()),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingInput(_) => 2,
            CliError::Core(Error::Config(_)) => 3,
            CliError::Core(_) => 1,
        }
    }
}

/// Fails with the missing-input exit contract unless `path` exists.
pub fn require_input(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

/// Which scorer/uncertainty wiring a command uses: item counts over a fixed
/// embedding table (no training needed) or the trained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ScorerMode {
    Count,
    Model,
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Core(Error::io(dir, e)))?;
    Ok(())
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Core(Error::io(path, e)))
}

/// Scans a TSV artifact's `#` header for `key=<hex u64>`.
fn read_hash_comment(path: &Path, key: &str) -> CliResult<Option<u64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let prefix = format!("{key}=");
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let Some(rest) = line.strip_prefix('#') else {
            break;
        };
        if let Some(value) = rest.trim().strip_prefix(&prefix) {
            let parsed = u64::from_str_radix(value.trim(), 16).map_err(|_| {
                Error::Format(format!(
                    "{}: invalid {key} header '{}'",
                    path.display(),
                    value.trim()
                ))
            })?;
            return Ok(Some(parsed));
        }
    }
    Ok(None)
}

fn load_log(path: &Path) -> CliResult<InteractionLog> {
    require_input(path)?;
    Ok(ingest_interactions(path, LogFormat::Tsv)?)
}

fn count_head_for(cfg: &RunConfig, train_log: &InteractionLog) -> CliResult<CountBasedHead> {
    // Item counts come from the training split: that is what a live system
    // would know. The user key would collide with item ids in the count map,
    // so only items are counted; the user term is then a constant v0 that
    // cannot change any per-user ranking.
    let counts: BTreeMap<u64, u64> = train_log
        .item_counts()
        .into_iter()
        .map(|(item, count)| (item.0, count))
        .collect();
    Ok(CountBasedHead::new(cfg.v0, counts)?)
}

pub fn synth(cfg: &RunConfig, out_dir: &Path) -> CliResult<()> {
    ensure_dir(out_dir)?;
    let spec = cfg.synthetic_spec();
    let data = generate_synthetic(&spec)?;
    let hash = cfg.config_hash();
    let comment = cfg.hash_comment();
    save_interactions(
        &data.log,
        &out_dir.join("interactions.tsv"),
        &[comment.clone(), "columns=user item category timestamp event".into()],
    )?;
    save_truth(
        &data.truth,
        &out_dir.join("truth.tsv"),
        &[comment.clone(), "columns=user item".into()],
    )?;
    save_embeddings_with_meta(&data.oracle_embeddings, &out_dir.join("oracle.uemb"), Some(hash))?;
    save_embeddings_with_meta(
        &data.observed_embeddings,
        &out_dir.join("observed.uemb"),
        Some(hash),
    )?;
    save_item_categories(&data.categories, &out_dir.join("categories.tsv"), &[comment])?;
    let summary = data.log.summary();
    println!(
        "synth: {} users, {} items, {} interactions -> {}",
        summary.users,
        summary.items,
        summary.interactions,
        out_dir.display()
    );
    Ok(())
}

pub fn swing(cfg: &RunConfig, interactions: &Path, out: &Path) -> CliResult<()> {
    let log = load_log(interactions)?;
    let (train_log, _) = split_leave_one_out(&log);
    let table = compute_swing(
        &train_log,
        cfg.alpha_swing,
        cfg.max_user_degree,
        cfg.stage_seed("swing"),
    )?;
    save_swing_with_meta(&table, out, Some(cfg.config_hash()))?;
    println!("swing: {} scored pairs -> {}", table.len(), out.display());
    Ok(())
}

pub fn train_model(
    cfg: &RunConfig,
    interactions: &Path,
    swing_path: &Path,
    out_model: &Path,
    out_embeddings: &Path,
) -> CliResult<()> {
    let log = load_log(interactions)?;
    require_input(swing_path)?;
    let swing_table = load_swing(swing_path)?;
    let (train_log, _) = split_leave_one_out(&log);
    let outcome = train(&train_log, &swing_table, cfg.model_config())?;
    for (epoch, loss) in outcome.epoch_losses.iter().enumerate() {
        eprintln!("epoch {epoch} loss {loss:.6}");
    }
    save_model_with_meta(&outcome.model, out_model, Some(cfg.config_hash()))?;
    let embeddings = outcome.model.export_embeddings()?;
    save_embeddings_with_meta(&embeddings, out_embeddings, Some(cfg.config_hash()))?;
    println!(
        "train: {} items, {} epochs, train-split hash {:016x} -> {}, {}",
        outcome.model.num_items(),
        outcome.epoch_losses.len(),
        outcome.model.split_hash,
        out_model.display(),
        out_embeddings.display()
    );
    Ok(())
}

pub fn build_index_cmd(cfg: &RunConfig, embeddings: &Path, out: &Path) -> CliResult<()> {
    require_input(embeddings)?;
    let (table, _) = load_embeddings_with_meta(embeddings)?;
    let mut index = build_index(
        &table,
        cfg.n,
        cfg.ef_construction,
        cfg.stage_seed("build-index"),
    )?;
    index.set_config_hash(cfg.config_hash());
    save_index(&index, out)?;
    println!(
        "build-index: {} items, top layer {} -> {}",
        index.num_items(),
        index.max_layer(),
        out.display()
    );
    Ok(())
}

fn load_index_with_table(index_path: &Path, embeddings: &Path) -> CliResult<LayeredGraphIndex> {
    require_input(index_path)?;
    require_input(embeddings)?;
    let (table, _) = load_embeddings_with_meta(embeddings)?;
    Ok(load_index(index_path, &table)?)
}

pub fn reweight_index(
    cfg: &RunConfig,
    index_path: &Path,
    embeddings: &Path,
    mode: ScorerMode,
    interactions: Option<&Path>,
    model_path: Option<&Path>,
    out: &Path,
) -> CliResult<()> {
    let index = load_index_with_table(index_path, embeddings)?;
    let rw_cfg = cfg.reweight_config();
    let (mut pruned, report): (LayeredGraphIndex, PruneReport) = match mode {
        ScorerMode::Count => {
            let interactions = interactions.ok_or_else(|| {
                Error::Config("--interactions is required with --mode count".into())
            })?;
            let log = load_log(interactions)?;
            let (train_log, _) = split_leave_one_out(&log);
            let scorer = DotProductScorer::new(index.embeddings(), cfg.dot_temperature)?;
            let head = count_head_for(cfg, &train_log)?;
            let reweighted = reweight_edges(&index, &scorer, &head, &rw_cfg)?;
            prune_neighbors(&reweighted, cfg.n_prime)?
        }
        ScorerMode::Model => {
            let model_path = model_path
                .ok_or_else(|| Error::Config("--model is required with --mode model".into()))?;
            require_input(model_path)?;
            let model = load_model(model_path)?;
            let scorer = CachedModelScorer::new(&model)?;
            let (_, i2i_head) = model.eval_heads()?;
            let reweighted = reweight_edges(&index, &scorer, &i2i_head, &rw_cfg)?;
            prune_neighbors(&reweighted, cfg.n_prime)?
        }
    };
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    pruned.set_config_hash(cfg.config_hash());
    save_index(&pruned, out)?;
    println!(
        "reweight-index: {} lists truncated, {} edges removed, layer-0 reachability {:.3} -> {}",
        report.lists_truncated,
        report.edges_removed,
        report.reachable_fraction_layer0,
        out.display()
    );
    Ok(())
}

pub fn retrieve(
    cfg: &RunConfig,
    index_path: &Path,
    embeddings: &Path,
    interactions: &Path,
    mode: ScorerMode,
    model_path: Option<&Path>,
    out: &Path,
) -> CliResult<()> {
    let index = load_index_with_table(index_path, embeddings)?;
    let log = load_log(interactions)?;
    let (train_log, holdout) = split_leave_one_out(&log);
    let split = split_hash(&train_log, &holdout);
    let cap = if cfg.retrieve_users == 0 {
        usize::MAX
    } else {
        cfg.retrieve_users
    };
    let users: Vec<UserFeatures> = user_features_from_log(&train_log)
        .into_values()
        .take(cap)
        .collect();
    let retrieval_cfg = cfg.retrieval_config();
    let mut run: RetrievalRun = RetrievalRun::new();
    let mut run_with = |scorer: &dyn UserItemScorer, head: &dyn UeHead| -> CliResult<()> {
        for user in &users {
            let candidates = retrieve_topk(&index, scorer, Some(head), user, &retrieval_cfg)?;
            run.insert(user.user, candidates);
        }
        Ok(())
    };
    match mode {
        ScorerMode::Count => {
            let scorer = DotProductScorer::new(index.embeddings(), cfg.dot_temperature)?;
            let head = count_head_for(cfg, &train_log)?;
            run_with(&scorer, &head)?;
        }
        ScorerMode::Model => {
            let model_path = model_path
                .ok_or_else(|| Error::Config("--model is required with --mode model".into()))?;
            require_input(model_path)?;
            let model = load_model(model_path)?;
            if model.split_hash != train_log.content_hash() {
                return Err(CliError::Core(Error::Validation(format!(
                    "model was trained on a different train split (model hash {:016x}, interactions give {:016x}); refusing to retrieve across splits",
                    model.split_hash,
                    train_log.content_hash()
                ))));
            }
            let scorer = CachedModelScorer::new(&model)?;
            let (u2i_head, _) = model.eval_heads()?;
            run_with(&scorer, &u2i_head)?;
        }
    }
    save_retrieval(
        &run,
        out,
        &[
            cfg.hash_comment(),
            format!("split_hash={split:016x}"),
            "columns=user rank item score var fusion".into(),
        ],
    )?;
    println!(
        "retrieve: {} users x top-{} -> {}",
        run.len(),
        cfg.k,
        out.display()
    );
    Ok(())
}

fn write_metrics(report: &MetricReport, path: &Path, comments: &[String]) -> CliResult<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |s: String| w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e));
    for comment in comments {
        write(format!("# {comment}\n"))?;
    }
    write(format!(
        "# n={} users_evaluated={} skipped_empty_truth={} skipped_empty_history={} skipped_empty_retrieved={}\n",
        report.n,
        report.users_evaluated,
        report.skipped_empty_truth,
        report.skipped_empty_history,
        report.skipped_empty_retrieved
    ))?;
    write(format!(
        "# mean recall={} entropy={} newcate={}\n",
        report.recall_at_n, report.cate_entropy, report.new_cate_ratio
    ))?;
    write("# columns=user recall entropy newcate\n".into())?;
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x}"));
    for (user, row) in &report.per_user {
        write(format!(
            "{user}\t{}\t{}\t{}\n",
            cell(row.recall),
            cell(row.entropy),
            cell(row.new_cate)
        ))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn evaluate(
    cfg: &RunConfig,
    retrieval_path: &Path,
    interactions: &Path,
    categories: &Path,
    truth_path: Option<&Path>,
    out: &Path,
) -> CliResult<()> {
    require_input(retrieval_path)?;
    require_input(categories)?;
    let log = load_log(interactions)?;
    let (train_log, loo_truth) = split_leave_one_out(&log);
    let split = split_hash(&train_log, &loo_truth);
    match read_hash_comment(retrieval_path, "split_hash")? {
        Some(recorded) if recorded != split => {
            return Err(CliError::Core(Error::Validation(format!(
                "retrieval file was produced under split hash {recorded:016x} but the interactions give {split:016x}; refusing to compare across splits"
            ))));
        }
        None => {
            return Err(CliError::Core(Error::Validation(format!(
                "{}: no split_hash header; cannot verify the retrieval run matches these interactions",
                retrieval_path.display()
            ))));
        }
        Some(_) => {}
    }
    let run = load_retrieval(retrieval_path)?;
    let catalog = load_item_categories(categories)?;
    let truth = match truth_path {
        Some(path) => {
            require_input(path)?;
            load_truth(path)?
        }
        None => loo_truth,
    };
    let history = history_categories(&train_log);
    let report = evaluate_retrieval(&run, &truth, &history, &catalog, cfg.metric_n)?;
    write_metrics(
        &report,
        out,
        &[cfg.hash_comment(), format!("split_hash={split:016x}")],
    )?;
    println!(
        "evaluate: users={} recall@{n}={:.4} entropy@{n}={:.4} newcate@{n}={:.4} -> {}",
        report.users_evaluated,
        report.recall_at_n,
        report.cate_entropy,
        report.new_cate_ratio,
        out.display(),
        n = report.n
    );
    Ok(())
}

pub fn ablate(cfg: &RunConfig, out_dir: &Path) -> CliResult<()> {
    ensure_dir(out_dir)?;
    let ab = cfg.ablation_config();
    let table = run_ablation(&ab)?;
    save_ablation(
        &table,
        ab.metric_n,
        &out_dir.join("ablation.tsv"),
        &[cfg.hash_comment()],
    )?;
    let sweep = run_beta_sweep(&ab, &cfg.beta_grid)?;
    let sweep_path = out_dir.join("beta_sweep.tsv");
    {
        let file = File::create(&sweep_path).map_err(|e| Error::io(&sweep_path, e))?;
        let mut w = BufWriter::new(file);
        let mut write =
            |s: String| w.write_all(s.as_bytes()).map_err(|e| Error::io(&sweep_path, e));
        write(format!("# {}\n", cfg.hash_comment()))?;
        write(format!(
            "# columns=beta recall@{n} entropy@{n} newcate@{n}\n",
            n = ab.metric_n
        ))?;
        for row in &sweep {
            write(format!(
                "{}\t{}\t{}\t{}\n",
                row.beta, row.mean_recall, row.mean_entropy, row.mean_new_cate
            ))?;
        }
        w.flush().map_err(|e| Error::io(&sweep_path, e))?;
    }
    println!("ablate: chosen alpha {}", table.chosen_alpha);
    for s in &table.summary {
        println!(
            "ablate: group {} mean recall@{n}={:.4} entropy@{n}={:.4} newcate@{n}={:.4}",
            s.group.label(),
            s.mean_recall,
            s.mean_entropy,
            s.mean_new_cate,
            n = ab.metric_n
        );
    }
    println!(
        "ablate: {} rows -> {}, beta sweep -> {}",
        table.rows.len(),
        out_dir.join("ablation.tsv").display(),
        sweep_path.display()
    );
    Ok(())
}

pub fn read_config_file(path: &Path) -> CliResult<String> {
    require_input(path)?;
    read_text(path)
}

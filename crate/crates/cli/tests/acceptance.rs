//! Acceptance suite: one test per release criterion, each printing a single
//! `criterion N (label): PASS` / `FAIL` line (run with `--nocapture` to see
//! them). Every check is deterministic; oracles are independent re-derivations
//! (exact scans, full sorts, naive loops, finite differences), not replays of
//! library internals.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use uann_core::eval::ablation::{run_ablation, run_beta_sweep, AblationConfig, Group};
use uann_core::eval::synth::{generate_synthetic, SyntheticSpec};
use uann_core::eval::{cate_entropy, new_cate_ratio, recall_at_n, spearman_rho};
use uann_core::hnsw::{build_index, l2_distance};
use uann_core::model::{joint_loss_grad, train, JointBatch, ModelConfig, TrainedModel};
use uann_core::retrieval::{retrieve_topk, RetrievalConfig};
use uann_core::scorer::{DotProductScorer, UserItemScorer};
use uann_core::swing::compute_swing;
use uann_core::types::{
    user_features_from_log, CategoryId, EmbeddingTable, EventType, Interaction, InteractionLog,
    ItemId, UserId,
};
use uann_core::uncertainty::{logistic, CountBasedHead, HeteroscedasticHead, UeHead};
use uann_core::unindex::{prune_neighbors, reweight_edges, weighted_distance, ReweightConfig};

fn criterion(n: u32, label: &str, f: impl FnOnce() -> Result<(), String>) {
    match f() {
        Ok(()) => println!("criterion {n} ({label}): PASS"),
        Err(msg) => {
            println!("criterion {n} ({label}): FAIL — {msg}");
            panic!("criterion {n} ({label}): {msg}");
        }
    }
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_table(rng: &mut ChaCha8Rng, n: u64, dim: usize) -> EmbeddingTable {
    let mut t = EmbeddingTable::new(dim).unwrap();
    for id in 0..n {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        t.insert(ItemId(id), v).unwrap();
    }
    t
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn c01_plain_index_recall_vs_exact_scan() {
    criterion(1, "plain index recall vs exact scan", || {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(0xACC0_0001);
        let table = random_table(&mut rng, 2000, 16);
        let index = build_index(&table, 64, 200, 41).map_err(s)?;
        let mut recall_sum = 0.0;
        for _ in 0..100 {
            let query: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = index.knn_search(&query, 10, 200).map_err(s)?;
            let got_ids: BTreeSet<ItemId> = got.iter().map(|&(id, _)| id).collect();
            // Exact scan through the same distance arithmetic.
            let mut all: Vec<(f64, ItemId)> = table
                .iter()
                .map(|(id, emb)| (l2_distance(&query, emb), id))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let hits = all.iter().take(10).filter(|(_, id)| got_ids.contains(id)).count();
            recall_sum += hits as f64 / 10.0;
        }
        let recall = recall_sum / 100.0;
        if recall < 0.99 {
            return Err(format!("Recall@10 = {recall:.4}, need ≥ 0.99"));
        }
        let secs = t0.elapsed().as_secs_f64();
        if secs >= 10.0 {
            return Err(format!("took {secs:.1}s, need < 10s"));
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn c02_edge_reweighting_formula_exactness() {
    criterion(2, "edge reweighting formula exactness", || {
        // Hand-computed examples.
        let cases = [
            (1.234, 0.0, 5.0, 3.0, 1.234), // zero variance leaves raw untouched
            (2.0, 3.0, 1.0, 2.0, 4.0),     // multiplier capped at m_cap
            (1.5, 0.2, 0.5, 2.0, 1.65),    // linear region
        ];
        for (raw, var, alpha, m, want) in cases {
            let got = weighted_distance(raw, var, alpha, m);
            if (got - want).abs() > 1e-12 {
                return Err(format!(
                    "weighted_distance({raw}, {var}, {alpha}, {m}) = {got}, want {want}"
                ));
            }
        }
        // Monotonicity in variance and the cap, on random tuples.
        let mut rng = ChaCha8Rng::seed_from_u64(0xACC0_0002);
        for i in 0..10_000 {
            let raw: f64 = rng.random_range(0.0..10.0);
            let alpha: f64 = rng.random_range(1e-6..3.0);
            let m: f64 = rng.random_range(1.000001..4.0);
            let va: f64 = rng.random_range(0.0..5.0);
            let vb: f64 = rng.random_range(0.0..5.0);
            let (lo, hi) = if va <= vb { (va, vb) } else { (vb, va) };
            let wlo = weighted_distance(raw, lo, alpha, m);
            let whi = weighted_distance(raw, hi, alpha, m);
            if whi < wlo {
                return Err(format!("tuple {i}: weighted distance decreased with variance"));
            }
            if wlo < raw {
                return Err(format!("tuple {i}: weighted distance fell below raw"));
            }
            if whi > raw * m {
                return Err(format!("tuple {i}: weighted distance exceeded the m_cap ceiling"));
            }
            if 1.0 + alpha * hi >= m && whi != raw * m {
                return Err(format!("tuple {i}: ceiling not attained exactly at saturation"));
            }
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn c03_pruning_matches_full_sort_oracle() {
    criterion(3, "pruning equals full-sort oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACC0_0003);
        let table = random_table(&mut rng, 1000, 16);
        let index = build_index(&table, 40, 100, 5).map_err(s)?;
        let scorer = DotProductScorer::new(&table, 1.0).map_err(s)?;
        let counts: BTreeMap<u64, u64> = (0..1000).map(|id| (id, rng.random_range(0..50))).collect();
        let head = CountBasedHead::new(0.25, counts).map_err(s)?;
        let cfg = ReweightConfig { alpha: 1.0, m_cap: 2.0, n_prime: 32 };
        let reweighted = reweight_edges(&index, &scorer, &head, &cfg).map_err(s)?;
        let (pruned, _) = prune_neighbors(&reweighted, 32).map_err(s)?;

        let mut nodes = 0usize;
        for layer in 0..=reweighted.max_layer() {
            for item in reweighted.items_at_layer(layer) {
                nodes += 1;
                // Oracle: full sort of the pre-prune list by (weighted, id).
                let mut want = reweighted.neighbors(layer, item).to_vec();
                want.sort_by(|a, b| a.weighted.total_cmp(&b.weighted).then(a.to.cmp(&b.to)));
                want.truncate(32);
                let got = pruned.neighbors(layer, item);
                let same = got.len() == want.len()
                    && got
                        .iter()
                        .zip(&want)
                        .all(|(g, w)| g.to == w.to && g.weighted == w.weighted);
                if !same {
                    return Err(format!("layer {layer} item {item} retained set mismatches"));
                }
            }
        }
        if nodes < 1000 {
            return Err(format!("only {nodes} nodes audited"));
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn c04_beta_zero_equals_headless_path() {
    criterion(4, "beta=0 equals a head-free code path", || {
        let data = generate_synthetic(&SyntheticSpec::default()).map_err(s)?;
        let index = build_index(&data.observed_embeddings, 16, 100, 9).map_err(s)?;
        let scorer = DotProductScorer::new(&data.observed_embeddings, 1.0).map_err(s)?;
        let counts: BTreeMap<u64, u64> =
            data.item_counts.iter().map(|(i, c)| (i.0, *c)).collect();
        let head = CountBasedHead::new(0.25, counts).map_err(s)?;
        let cfg = RetrievalConfig::new(0.0, 50);
        let users: Vec<_> = user_features_from_log(&data.log).into_values().take(200).collect();
        if users.len() < 200 {
            return Err(format!("only {} users generated", users.len()));
        }
        for user in &users {
            let with = retrieve_topk(&index, &scorer, Some(&head as &dyn UeHead), user, &cfg)
                .map_err(s)?;
            let without = retrieve_topk(&index, &scorer, None, user, &cfg).map_err(s)?;
            if with.len() != without.len() {
                return Err(format!("user {}: result lengths differ", user.user));
            }
            for (a, b) in with.iter().zip(&without) {
                if a.item != b.item || a.fusion.to_bits() != b.fusion.to_bits() {
                    return Err(format!("user {}: results diverge at item {}", user.user, a.item));
                }
            }
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn c05_exhaustive_beam_equals_brute_force() {
    criterion(5, "exhaustive beam equals brute-force top-k", || {
        let spec = SyntheticSpec {
            num_items: 400,
            num_users: 60,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).map_err(s)?;
        let index = build_index(&data.observed_embeddings, 16, 100, 3).map_err(s)?;
        if index.reachable_fraction(0) != 1.0 {
            return Err("layer-0 graph is not fully reachable; exhaustive premise broken".into());
        }
        let scorer = DotProductScorer::new(&data.observed_embeddings, 1.0).map_err(s)?;
        let cfg = RetrievalConfig { beta: 0.0, k: 100, ef_c: 400, t_c: 100_000 };
        let users: Vec<_> = user_features_from_log(&data.log).into_values().take(50).collect();
        let items: Vec<ItemId> = data.observed_embeddings.ids().collect();
        for user in &users {
            let got = retrieve_topk(&index, &scorer, None, user, &cfg).map_err(s)?;
            // Brute force: score every item, order by (fusion desc, id asc).
            let mut all: Vec<(f64, ItemId)> = Vec::with_capacity(items.len());
            for &item in &items {
                let (logit, _) = scorer.score_user_item(user, item).map_err(s)?;
                all.push((logistic(logit), item));
            }
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            all.truncate(cfg.k);
            if got.len() != all.len() {
                return Err(format!("user {}: got {} items, want {}", user.user, got.len(), all.len()));
            }
            for (g, (score, item)) in got.iter().zip(&all) {
                if g.item != *item || g.fusion.to_bits() != score.to_bits() {
                    return Err(format!(
                        "user {}: beam and brute force disagree at item {item}",
                        user.user
                    ));
                }
            }
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn c09_metric_exactness_vs_naive_loops() {
    criterion(9, "metrics equal naive reference loops", || {
        let items = |ids: &[u64]| -> Vec<ItemId> { ids.iter().map(|&i| ItemId(i)).collect() };
        let cates = |ids: &[u64]| -> BTreeSet<CategoryId> {
            ids.iter().map(|&i| CategoryId(i)).collect()
        };

        // Worked examples.
        let truth: BTreeSet<ItemId> = [ItemId(2), ItemId(4)].into();
        let r = recall_at_n(&items(&[1, 2, 3]), &truth, 3).map_err(s)?;
        if r != 0.5 {
            return Err(format!("recall worked example: {r}, want 0.5"));
        }
        let n = new_cate_ratio(&cates(&[1, 2, 3]), &cates(&[1, 2])).map_err(s)?;
        if n != 0.5 {
            return Err(format!("new-category worked example: {n}, want 0.5"));
        }
        let n = new_cate_ratio(&cates(&[3, 4, 5]), &cates(&[1])).map_err(s)?;
        if n != 3.0 {
            return Err(format!("new-category worked example: {n}, want 3.0"));
        }
        let mut map = BTreeMap::new();
        let mut list = Vec::new();
        for id in 0..100u64 {
            map.insert(ItemId(id), CategoryId(id % 4));
            list.push(ItemId(id));
        }
        let e = cate_entropy(&list, &map).map_err(s)?;
        if e != 2.0 {
            return Err(format!("uniform entropy worked example: {e}, want 2.0"));
        }
        let mut map = BTreeMap::new();
        let mut list = Vec::new();
        for id in 0..100u64 {
            let c = if id < 60 { 0 } else if id < 90 { 1 } else { 2 };
            map.insert(ItemId(id), CategoryId(c));
            list.push(ItemId(id));
        }
        let e = cate_entropy(&list, &map).map_err(s)?;
        if (e - 1.29546).abs() > 1e-5 {
            return Err(format!("skewed entropy worked example: {e}, want 1.29546 ± 1e-5"));
        }

        // Random fixtures against naive loops, exact equality.
        let mut rng = ChaCha8Rng::seed_from_u64(0xACC0_0009);
        for case in 0..1000 {
            // --- recall
            let pool: u64 = rng.random_range(5..60);
            let len = rng.random_range(1..25usize);
            let mut retrieved = Vec::new();
            let mut seen = BTreeSet::new();
            while retrieved.len() < len.min(pool as usize) {
                let id = ItemId(rng.random_range(0..pool));
                if seen.insert(id) {
                    retrieved.push(id);
                }
            }
            let truth: BTreeSet<ItemId> = (0..rng.random_range(1..8u64))
                .map(|_| ItemId(rng.random_range(0..pool)))
                .collect();
            let n = rng.random_range(1..30usize);
            let got = recall_at_n(&retrieved, &truth, n).map_err(s)?;
            let mut hits = 0usize;
            for item in retrieved.iter().take(n) {
                if truth.contains(item) {
                    hits += 1;
                }
            }
            let want = hits as f64 / truth.len() as f64;
            if got != want {
                return Err(format!("fixture {case}: recall {got} != naive {want}"));
            }

            // --- category entropy
            let num_cates: u64 = rng.random_range(1..10);
            let mut map = BTreeMap::new();
            for &item in &retrieved {
                map.insert(item, CategoryId(rng.random_range(0..num_cates)));
            }
            let got = cate_entropy(&retrieved, &map).map_err(s)?;
            // Naive: count per category in ascending category order, then sum.
            let mut counts: BTreeMap<CategoryId, usize> = BTreeMap::new();
            for item in &retrieved {
                *counts.entry(map[item]).or_insert(0) += 1;
            }
            let total = retrieved.len() as f64;
            let mut want = 0.0;
            for &c in counts.values() {
                let p = c as f64 / total;
                want -= p * p.log2();
            }
            if got != want {
                return Err(format!("fixture {case}: entropy {got} != naive {want}"));
            }

            // --- new-category ratio
            let rec_cates: BTreeSet<CategoryId> =
                (0..rng.random_range(1..8u64)).map(|_| CategoryId(rng.random_range(0..12))).collect();
            let hist_cates: BTreeSet<CategoryId> =
                (0..rng.random_range(1..8u64)).map(|_| CategoryId(rng.random_range(0..12))).collect();
            if hist_cates.is_empty() {
                continue;
            }
            let got = new_cate_ratio(&rec_cates, &hist_cates).map_err(s)?;
            let mut fresh = 0usize;
            for c in &rec_cates {
                if !hist_cates.contains(c) {
                    fresh += 1;
                }
            }
            let want = fresh as f64 / hist_cates.len() as f64;
            if got != want {
                return Err(format!("fixture {case}: new-category ratio {got} != naive {want}"));
            }
        }
        Ok(())
    });
}

// --------------------------------------------------------------- criterion 10

const FD_H: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;

fn fd_rel_err(analytic: f64, fd: f64) -> Option<f64> {
    if analytic.abs() < 1e-9 && fd.abs() < 1e-9 {
        return None; // both vanish; relative error is meaningless
    }
    Some((analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6))
}

#[test]
fn c10_gradients_match_finite_differences() {
    criterion(10, "analytic gradients match finite differences", || {
        dual_loss_fd().map_err(|e| format!("dual loss: {e}"))?;
        joint_loss_fd().map_err(|e| format!("joint loss: {e}"))?;
        Ok(())
    });
}

fn dual_loss_fd() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC0_0010);
    let mut accepted = 0usize;
    let mut attempts = 0usize;
    while accepted < 100 {
        attempts += 1;
        if attempts > 2000 {
            return Err("could not sample 100 well-conditioned configurations".into());
        }
        let width = rng.random_range(3..7usize);
        let mc = [4, 8][rng.random_range(0..2usize)];
        let mut head = HeteroscedasticHead::zeros(width, mc, rng.random()).map_err(s)?;
        for w in head.mu_w.iter_mut() {
            *w = rng.random_range(-0.5..0.5);
        }
        head.mu_b = rng.random_range(-0.5..0.5);
        for w in head.logvar_w.iter_mut() {
            *w = rng.random_range(-0.3..0.3);
        }
        head.logvar_b = rng.random_range(-1.0..1.0);
        let logit: f64 = rng.random_range(-2.0..2.0);
        let repr: Vec<f64> = (0..width).map(|_| rng.random_range(-1.0..1.0)).collect();
        let label: u8 = rng.random_range(0..2);

        // Reject configurations on the probability clamp, where the analytic
        // gradient is legitimately zero but the finite difference is not.
        let est = head.estimate(logit, &repr).map_err(s)?;
        if est.score <= 1e-5 || est.score >= 1.0 - 1e-5 {
            continue;
        }
        accepted += 1;

        let (_, g) = head.dual_loss_grad(logit, &repr, label).map_err(s)?;
        let loss_at = |h: &HeteroscedasticHead, logit: f64, repr: &[f64]| -> Result<f64, String> {
            Ok(h.dual_loss_grad(logit, repr, label).map_err(s)?.0)
        };

        let check = |name: &str, analytic: f64, plus: f64, minus: f64| -> Result<(), String> {
            let fd = (plus - minus) / (2.0 * FD_H);
            if let Some(err) = fd_rel_err(analytic, fd) {
                if err > FD_REL_TOL {
                    return Err(format!(
                        "{name}: analytic {analytic:.9e} vs fd {fd:.9e} (rel {err:.2e})"
                    ));
                }
            }
            Ok(())
        };

        for i in 0..width {
            let mut hp = head.clone();
            hp.mu_w[i] += FD_H;
            let mut hm = head.clone();
            hm.mu_w[i] -= FD_H;
            check("mu_w", g.mu_w[i], loss_at(&hp, logit, &repr)?, loss_at(&hm, logit, &repr)?)?;

            let mut hp = head.clone();
            hp.logvar_w[i] += FD_H;
            let mut hm = head.clone();
            hm.logvar_w[i] -= FD_H;
            check(
                "logvar_w",
                g.logvar_w[i],
                loss_at(&hp, logit, &repr)?,
                loss_at(&hm, logit, &repr)?,
            )?;

            let mut rp = repr.clone();
            rp[i] += FD_H;
            let mut rm = repr.clone();
            rm[i] -= FD_H;
            check("repr", g.repr[i], loss_at(&head, logit, &rp)?, loss_at(&head, logit, &rm)?)?;
        }
        let mut hp = head.clone();
        hp.mu_b += FD_H;
        let mut hm = head.clone();
        hm.mu_b -= FD_H;
        check("mu_b", g.mu_b, loss_at(&hp, logit, &repr)?, loss_at(&hm, logit, &repr)?)?;

        let mut hp = head.clone();
        hp.logvar_b += FD_H;
        let mut hm = head.clone();
        hm.logvar_b -= FD_H;
        check("logvar_b", g.logvar_b, loss_at(&hp, logit, &repr)?, loss_at(&hm, logit, &repr)?)?;

        check(
            "logit",
            g.logit,
            loss_at(&head, logit + FD_H, &repr)?,
            loss_at(&head, logit - FD_H, &repr)?,
        )?;
    }
    Ok(())
}

fn joint_loss_fd() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC0_1010);
    let mut accepted = 0usize;
    let mut attempts = 0usize;
    while accepted < 100 {
        attempts += 1;
        if attempts > 2000 {
            return Err("could not sample 100 well-conditioned configurations".into());
        }
        let config = ModelConfig {
            embedding_dim: rng.random_range(3..5usize),
            item_tower_layers: vec![rng.random_range(4..6usize), 3],
            user_head_layers: vec![rng.random_range(6..9usize), rng.random_range(4..6usize), 1],
            context_dim: 0,
            temperature: rng.random_range(1.0..3.0),
            lambda_i2i: rng.random_range(0.1..0.6),
            mc_train: [4, 8][rng.random_range(0..2usize)],
            seed: rng.random(),
            ..ModelConfig::default()
        };
        let ids: Vec<ItemId> = {
            let mut set = BTreeSet::new();
            while set.len() < 6 {
                set.insert(ItemId(rng.random_range(0..30)));
            }
            set.into_iter().collect()
        };
        let model = TrainedModel::init(&ids, config).map_err(s)?;
        let pick = |rng: &mut ChaCha8Rng| ids[rng.random_range(0..ids.len())];
        let mut instances = Vec::new();
        for _ in 0..2 {
            let history: Vec<ItemId> =
                (0..rng.random_range(1..4usize)).map(|_| pick(&mut rng)).collect();
            instances.push((history, pick(&mut rng)));
        }
        let mut u2i_jobs = Vec::new();
        for _ in 0..3 {
            u2i_jobs.push((rng.random_range(0..2usize), pick(&mut rng), rng.random_range(0..2u8)));
        }
        let mut i2i_jobs = Vec::new();
        for _ in 0..2 {
            let a = pick(&mut rng);
            let mut b = pick(&mut rng);
            while b == a {
                b = pick(&mut rng);
            }
            i2i_jobs.push((a, b, rng.random_range(0..2u8)));
        }
        let batch = JointBatch { instances, u2i_jobs, i2i_jobs };

        // Reject batches near a ReLU kink or the probability clamp, where the
        // loss is non-differentiable or analytically flat. A parameter step of
        // h moves any preactivation by at most h·|input| ≈ 1e-5, so a 1e-3
        // margin keeps every evaluation on one side of the kink.
        let (_, grads, stats) = joint_loss_grad(&model, &batch).map_err(s)?;
        if stats.min_abs_relu_preact < 1e-3 || stats.min_prob_margin < 1e-4 {
            continue;
        }
        accepted += 1;

        let loss_of = |m: &TrainedModel| -> Result<f64, String> {
            Ok(joint_loss_grad(m, &batch).map_err(s)?.0)
        };
        let check = |analytic: f64,
                         name: &str,
                         apply: &dyn Fn(&mut TrainedModel, f64)|
         -> Result<(), String> {
            let mut mp = model.clone();
            apply(&mut mp, FD_H);
            let mut mm = model.clone();
            apply(&mut mm, -FD_H);
            let fd = (loss_of(&mp)? - loss_of(&mm)?) / (2.0 * FD_H);
            if let Some(err) = fd_rel_err(analytic, fd) {
                if err > FD_REL_TOL {
                    return Err(format!(
                        "{name}: analytic {analytic:.9e} vs fd {fd:.9e} (rel {err:.2e})"
                    ));
                }
            }
            Ok(())
        };

        for i in 0..model.item_features.len() {
            check(grads.features[i], "item_features", &move |m, d| m.item_features[i] += d)?;
        }
        for (l, (gw, gb)) in grads.tower.layers.iter().enumerate() {
            for i in 0..gw.len() {
                check(gw[i], "tower.w", &move |m, d| m.item_tower.layers[l].w[i] += d)?;
            }
            for i in 0..gb.len() {
                check(gb[i], "tower.b", &move |m, d| m.item_tower.layers[l].b[i] += d)?;
            }
        }
        for (l, (gw, gb)) in grads.head.layers.iter().enumerate() {
            for i in 0..gw.len() {
                check(gw[i], "user_head.w", &move |m, d| m.user_head.layers[l].w[i] += d)?;
            }
            for i in 0..gb.len() {
                check(gb[i], "user_head.b", &move |m, d| m.user_head.layers[l].b[i] += d)?;
            }
        }
        for i in 0..grads.u2i.mu_w.len() {
            check(grads.u2i.mu_w[i], "u2i.mu_w", &move |m, d| m.u2i_head.mu_w[i] += d)?;
            check(grads.u2i.logvar_w[i], "u2i.logvar_w", &move |m, d| {
                m.u2i_head.logvar_w[i] += d
            })?;
        }
        check(grads.u2i.mu_b, "u2i.mu_b", &|m, d| m.u2i_head.mu_b += d)?;
        check(grads.u2i.logvar_b, "u2i.logvar_b", &|m, d| m.u2i_head.logvar_b += d)?;
        for i in 0..grads.i2i.mu_w.len() {
            check(grads.i2i.mu_w[i], "i2i.mu_w", &move |m, d| m.i2i_head.mu_w[i] += d)?;
            check(grads.i2i.logvar_w[i], "i2i.logvar_w", &move |m, d| {
                m.i2i_head.logvar_w[i] += d
            })?;
        }
        check(grads.i2i.mu_b, "i2i.mu_b", &|m, d| m.i2i_head.mu_b += d)?;
        check(grads.i2i.logvar_b, "i2i.logvar_b", &|m, d| m.i2i_head.logvar_b += d)?;
    }
    Ok(())
}

// --------------------------------------------------------------- criterion 11

const BIN: &str = env!("CARGO_BIN_EXE_uann");

const PIPELINE_CFG: &str = "\
num_users = 80
num_items = 300
num_categories = 12
num_clusters = 4
events_per_user = 12
truth_per_user = 10
synth_dim = 8
embedding_dim = 8
item_tower_layers = 16,8
user_head_layers = 32,16,1
epochs = 4
batch_size = 64
mc_train = 4
mc_eval = 16
n = 8
n_prime = 4
ef_construction = 60
ef_c = 60
k = 20
metric_n = 20
max_eval_users = 30
";

fn run_ok(dir: &Path, args: &[&str]) -> Result<Output, String> {
    let out = Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| format!("spawn uann: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "uann {args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out)
}

fn run_pipeline(dir: &Path) -> Result<Vec<&'static str>, String> {
    std::fs::write(dir.join("pipeline.cfg"), PIPELINE_CFG).map_err(s)?;
    let cfg = ["--config", "pipeline.cfg", "--seed", "17"];
    let with_cfg = |base: &[&'static str]| -> Vec<&'static str> {
        let mut v = base.to_vec();
        v.extend_from_slice(&cfg);
        v
    };
    run_ok(dir, &with_cfg(&["synth", "--out", "data"]))?;
    run_ok(dir, &with_cfg(&[
        "swing", "--interactions", "data/interactions.tsv", "--out", "data/swing.tsv",
    ]))?;
    run_ok(dir, &with_cfg(&[
        "train", "--interactions", "data/interactions.tsv", "--swing", "data/swing.tsv",
        "--out-model", "data/model.umdl", "--out-embeddings", "data/items.uemb",
    ]))?;
    run_ok(dir, &with_cfg(&[
        "build-index", "--embeddings", "data/items.uemb", "--out", "data/index.uhnw",
    ]))?;
    run_ok(dir, &with_cfg(&[
        "reweight-index", "--index", "data/index.uhnw", "--embeddings", "data/items.uemb",
        "--mode", "model", "--model", "data/model.umdl", "--out", "data/reweighted.uhnw",
    ]))?;
    run_ok(dir, &with_cfg(&[
        "retrieve", "--index", "data/reweighted.uhnw", "--embeddings", "data/items.uemb",
        "--interactions", "data/interactions.tsv", "--mode", "model", "--model", "data/model.umdl",
        "--out", "data/retrieval.tsv",
    ]))?;
    run_ok(dir, &with_cfg(&[
        "evaluate", "--retrieval", "data/retrieval.tsv", "--interactions", "data/interactions.tsv",
        "--categories", "data/categories.tsv", "--truth", "data/truth.tsv",
        "--out", "data/metrics.tsv",
    ]))?;
    Ok(vec![
        "data/interactions.tsv",
        "data/truth.tsv",
        "data/oracle.uemb",
        "data/observed.uemb",
        "data/categories.tsv",
        "data/swing.tsv",
        "data/model.umdl",
        "data/items.uemb",
        "data/index.uhnw",
        "data/reweighted.uhnw",
        "data/retrieval.tsv",
        "data/metrics.tsv",
    ])
}

#[test]
fn c11_pipeline_bit_reproducibility() {
    criterion(11, "pipeline is bit-reproducible under one seed", || {
        let a = tempfile::tempdir().map_err(s)?;
        let b = tempfile::tempdir().map_err(s)?;
        let artifacts = run_pipeline(a.path())?;
        run_pipeline(b.path())?;
        for name in artifacts {
            let va = std::fs::read(a.path().join(name)).map_err(|e| format!("{name}: {e}"))?;
            let vb = std::fs::read(b.path().join(name)).map_err(|e| format!("{name}: {e}"))?;
            if va != vb {
                return Err(format!("{name} differs between identical runs"));
            }
        }
        Ok(())
    });
}

// --------------------------------------------------------------- criterion 12

fn naive_swing(log: &InteractionLog, alpha: f64) -> BTreeMap<(ItemId, ItemId), f64> {
    // Quadruple loop: pairs of items, then ordered pairs of common users.
    let mut user_items: BTreeMap<UserId, BTreeSet<ItemId>> = BTreeMap::new();
    for i in log.interactions() {
        if i.event == EventType::Click {
            user_items.entry(i.user).or_default().insert(i.item);
        }
    }
    let mut item_users: BTreeMap<ItemId, Vec<UserId>> = BTreeMap::new();
    for (&u, set) in &user_items {
        for &item in set {
            item_users.entry(item).or_default().push(u);
        }
    }
    let items: Vec<ItemId> = item_users.keys().copied().collect();
    let mut out = BTreeMap::new();
    for i in 0..items.len() {
        for j in (i + 1)..items.len() {
            let (a, b) = (items[i], items[j]);
            let common: Vec<UserId> = item_users[&a]
                .iter()
                .filter(|u| item_users[&b].contains(u))
                .copied()
                .collect();
            if common.len() < 2 {
                continue;
            }
            let mut sim = 0.0;
            for &u in &common {
                for &v in &common {
                    if u != v {
                        let overlap = user_items[&u].intersection(&user_items[&v]).count();
                        sim += 1.0 / (alpha + overlap as f64);
                    }
                }
            }
            out.insert((a, b), sim);
        }
    }
    out
}

#[test]
fn c12_swing_equals_brute_force() {
    criterion(12, "swing equals quadruple-loop brute force", || {
        // Hand example: two users, each clicking the same two items.
        let inter = |user: u64, item: u64, t: u64| Interaction {
            user: UserId(user),
            item: ItemId(item),
            category: CategoryId(0),
            timestamp: t,
            event: EventType::Click,
        };
        let log = InteractionLog::from_interactions(vec![
            inter(1, 10, 1),
            inter(1, 11, 2),
            inter(2, 10, 1),
            inter(2, 11, 2),
        ]);
        let table = compute_swing(&log, 1.0, 1_000_000, 7).map_err(s)?;
        let got = table.get(ItemId(10), ItemId(11));
        if (got - 2.0 / 3.0).abs() > 1e-12 || (got - 0.6667).abs() > 1e-4 {
            return Err(format!("hand example: swing(10,11) = {got}, want 0.6667"));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(0xACC0_0012);
        for case in 0..50 {
            let num_users = rng.random_range(4..14u64);
            let num_items = rng.random_range(6..20u64);
            let alpha = [0.5, 1.0, 2.0][case % 3];
            let mut v = Vec::new();
            for u in 0..num_users {
                for t in 0..rng.random_range(2..8u64) {
                    v.push(Interaction {
                        user: UserId(u),
                        item: ItemId(rng.random_range(0..num_items)),
                        category: CategoryId(0),
                        timestamp: t,
                        // Non-click events must be ignored by both sides.
                        event: if rng.random_range(0..10) < 8 {
                            EventType::Click
                        } else {
                            EventType::Purchase
                        },
                    });
                }
            }
            let log = InteractionLog::from_interactions(v);
            let table = compute_swing(&log, alpha, 1_000_000, 7).map_err(s)?;
            let naive = naive_swing(&log, alpha);
            for (&(a, b), &want) in &naive {
                let got = table.get(a, b);
                if got != want {
                    return Err(format!("case {case}: swing({a},{b}) = {got}, naive {want}"));
                }
            }
            for ((a, b), got) in table.iter() {
                match naive.get(&(a, b)) {
                    Some(&want) if want == got => {}
                    _ => {
                        return Err(format!(
                            "case {case}: table carries pair ({a},{b}) the brute force lacks"
                        ))
                    }
                }
            }
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- criterion 6

/// Mean estimated variance per item, averaged over every user in the log
/// (u2i) and over the item's plausible partners (i2i): its top co-occurring
/// items, padded from a spread sample when it has fewer than twenty.
fn variance_by_item(
    model: &TrainedModel,
    data: &uann_core::eval::synth::SyntheticData,
    swing: &uann_core::swing::SwingScoreTable,
) -> Result<(BTreeMap<ItemId, f64>, BTreeMap<ItemId, f64>), String> {
    const PARTNERS_PER_ITEM: usize = 20;
    let (u2i_head, i2i_head) = model.eval_heads().map_err(s)?;
    let users: Vec<_> = user_features_from_log(&data.log).into_values().collect();
    let items: Vec<ItemId> = model.items().collect();

    let mut u2i_var = BTreeMap::new();
    for &item in &items {
        let mut acc = 0.0;
        for user in &users {
            let (logit, repr) = model.score_u2i(user, item).map_err(s)?;
            acc += u2i_head.estimate(logit, &repr).map_err(s)?.variance;
        }
        u2i_var.insert(item, acc / users.len() as f64);
    }

    let fill: Vec<ItemId> = items.iter().step_by((items.len() / 40).max(1)).copied().collect();
    let mut i2i_var = BTreeMap::new();
    for &item in &items {
        let mut partners = swing.top_positives(item, PARTNERS_PER_ITEM);
        for &p in &fill {
            if partners.len() >= PARTNERS_PER_ITEM {
                break;
            }
            if p != item && !partners.contains(&p) {
                partners.push(p);
            }
        }
        let mut acc = 0.0;
        for &p in &partners {
            let (logit, repr) = model.score_i2i(item, p).map_err(s)?;
            acc += i2i_head.estimate(logit, &repr).map_err(s)?.variance;
        }
        i2i_var.insert(item, acc / partners.len() as f64);
    }
    Ok((u2i_var, i2i_var))
}

/// Width-10 buckets of interaction count → mean variance across the bucket.
fn bucket_means(
    var_by_item: &BTreeMap<ItemId, f64>,
    counts: &BTreeMap<ItemId, u64>,
) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<u64, (usize, f64)> = BTreeMap::new();
    for (item, var) in var_by_item {
        let bucket = counts.get(item).copied().unwrap_or(0) / 10;
        let e = acc.entry(bucket).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += var;
    }
    acc.into_iter().map(|(b, (n, sum))| (b as f64, sum / n as f64)).collect()
}

#[test]
fn c06_variance_decreases_with_interaction_count() {
    criterion(6, "estimated variance falls with interaction count", || {
        let data = generate_synthetic(&SyntheticSpec::default()).map_err(s)?;
        let swing = compute_swing(&data.log, 1.0, 1_000_000, 7).map_err(s)?;
        let outcome = train(&data.log, &swing, ModelConfig::default()).map_err(s)?;
        let (u2i_var, i2i_var) = variance_by_item(&outcome.model, &data, &swing)?;
        let counts = data.log.item_counts();
        for (side, vars) in [("u2i", &u2i_var), ("i2i", &i2i_var)] {
            let buckets = bucket_means(vars, &counts);
            if buckets.len() < 3 {
                return Err(format!("{side}: only {} buckets populated", buckets.len()));
            }
            let xs: Vec<f64> = buckets.iter().map(|&(b, _)| b).collect();
            let ys: Vec<f64> = buckets.iter().map(|&(_, m)| m).collect();
            let rho = spearman_rho(&xs, &ys).map_err(s)?;
            if rho > -0.8 {
                return Err(format!("{side}: Spearman ρ = {rho:.3}, need ≤ −0.8"));
            }
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn c07_reweighted_index_beats_plain_index_across_seeds() {
    criterion(7, "variance-aware index wins on recall across seeds", || {
        let cfg = AblationConfig::default();
        let table = run_ablation(&cfg).map_err(s)?;
        if !cfg.alpha_grid.contains(&table.chosen_alpha) {
            return Err(format!("chosen alpha {} not from the grid", table.chosen_alpha));
        }
        let recall_of = |group: Group, seed: u64| {
            table
                .rows
                .iter()
                .find(|r| r.group == group && r.seed == seed)
                .map(|r| r.recall)
                .ok_or_else(|| format!("missing row for {group:?} seed {seed}"))
        };
        let mut wins = 0usize;
        for &seed in cfg.seeds.iter() {
            if recall_of(Group::C, seed)? >= recall_of(Group::B, seed)? {
                wins += 1;
            }
        }
        if wins < 15 {
            return Err(format!("reweighted index won {wins}/{} seeds, need ≥ 15", cfg.seeds.len()));
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn c08_novelty_metrics_rise_with_beta() {
    criterion(8, "novelty metrics non-decreasing in beta", || {
        let cfg = AblationConfig::default();
        let betas = [0.0, 0.5, 1.0, 2.0];
        let sweep = run_beta_sweep(&cfg, &betas).map_err(s)?;
        if sweep.len() != betas.len() {
            return Err(format!("sweep returned {} rows, want {}", sweep.len(), betas.len()));
        }
        let xs: Vec<f64> = sweep.iter().map(|r| r.beta).collect();
        let entropy: Vec<f64> = sweep.iter().map(|r| r.mean_entropy).collect();
        let newcate: Vec<f64> = sweep.iter().map(|r| r.mean_new_cate).collect();
        let rho_e = spearman_rho(&xs, &entropy).map_err(s)?;
        if rho_e < 0.8 {
            return Err(format!("category entropy: Spearman ρ = {rho_e:.3}, need ≥ 0.8"));
        }
        let rho_n = spearman_rho(&xs, &newcate).map_err(s)?;
        if rho_n < 0.8 {
            return Err(format!("new-category ratio: Spearman ρ = {rho_n:.3}, need ≥ 0.8"));
        }
        Ok(())
    });
}

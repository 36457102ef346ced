//! Joint mini-batch training of the two-tower model and its uncertainty
//! heads: L = D(u2i) + lambda_i2i · D(i2i), where D is the heads'
//! Monte-Carlo cross-entropy. Single-threaded and bit-reproducible under the
//! config seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::stable_hash::derive_seed;
use crate::swing::SwingScoreTable;
use crate::types::{InteractionLog, ItemId, UserId};
use crate::uncertainty::PROB_CLAMP;

use super::mlp::MlpGrad;
use super::{score_i2i_from, ModelConfig, TrainedModel};

/// A trained model plus the loss curve that produced it.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    /// Mean joint loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// One (history → next item) training example.
#[derive(Debug, Clone)]
struct Instance {
    history: Vec<ItemId>,
    target: ItemId,
}

/// Fully materialized scoring jobs for one batch. Sampling happens at plan
/// time, so the loss of a plan is a pure function of the model parameters.
struct BatchPlan<'a> {
    instances: Vec<&'a Instance>,
    /// (instance index, target item, label).
    u2i_jobs: Vec<(usize, ItemId, u8)>,
    /// (anchor item, partner item, label).
    i2i_jobs: Vec<(ItemId, ItemId, u8)>,
}

/// Gradients for every trainable array, same shapes as the model.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    /// dL/d(item feature rows), flat in the model's slot layout.
    pub features: Vec<f64>,
    pub tower: MlpGrad,
    pub head: MlpGrad,
    pub u2i: HeadGrads,
    pub i2i: HeadGrads,
}

/// Gradients for one uncertainty head's parameters.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub mu_w: Vec<f64>,
    pub mu_b: f64,
    pub logvar_w: Vec<f64>,
    pub logvar_b: f64,
}

impl HeadGrads {
    fn zeros(width: usize) -> Self {
        HeadGrads {
            mu_w: vec![0.0; width],
            mu_b: 0.0,
            logvar_w: vec![0.0; width],
            logvar_b: 0.0,
        }
    }

    fn add_scaled(&mut self, g: &crate::uncertainty::HeteroGrad, scale: f64) {
        for (a, b) in self.mu_w.iter_mut().zip(&g.mu_w) {
            *a += scale * b;
        }
        self.mu_b += scale * g.mu_b;
        for (a, b) in self.logvar_w.iter_mut().zip(&g.logvar_w) {
            *a += scale * b;
        }
        self.logvar_b += scale * g.logvar_b;
    }
}

impl ModelGrads {
    fn zeros_like(model: &TrainedModel) -> Self {
        ModelGrads {
            features: vec![0.0; model.item_features.len()],
            tower: MlpGrad::zeros_like(&model.item_tower),
            head: MlpGrad::zeros_like(&model.user_head),
            u2i: HeadGrads::zeros(model.u2i_head.width()),
            i2i: HeadGrads::zeros(model.i2i_head.width()),
        }
    }
}

/// Diagnostics for finite-difference tests: how close the pass came to a
/// ReLU kink or the probability clamp (both invalidate FD oracles).
#[derive(Debug, Clone, Copy)]
pub struct BatchStats {
    pub min_abs_relu_preact: f64,
    pub min_prob_margin: f64,
}

/// An explicit training batch for loss and gradient verification. Unlike the
/// sampled plans inside [`train`], every job is spelled out, so the loss is a
/// pure function of the model parameters.
#[derive(Debug, Clone)]
pub struct JointBatch {
    /// (history, target) rows.
    pub instances: Vec<(Vec<ItemId>, ItemId)>,
    /// (instance index, target item, label).
    pub u2i_jobs: Vec<(usize, ItemId, u8)>,
    /// (anchor item, partner item, label).
    pub i2i_jobs: Vec<(ItemId, ItemId, u8)>,
}

/// Joint loss and analytic gradients for an explicit batch, with the
/// diagnostics a finite-difference verifier needs to reject configurations
/// sitting on a ReLU kink or the probability clamp.
pub fn joint_loss_grad(
    model: &TrainedModel,
    batch: &JointBatch,
) -> Result<(f64, ModelGrads, BatchStats)> {
    for &(idx, _, _) in &batch.u2i_jobs {
        if idx >= batch.instances.len() {
            return Err(Error::Input(format!(
                "u2i job references instance {idx}, batch has {}",
                batch.instances.len()
            )));
        }
    }
    let instances: Vec<Instance> = batch
        .instances
        .iter()
        .map(|(history, target)| Instance {
            history: history.clone(),
            target: *target,
        })
        .collect();
    let plan = BatchPlan {
        instances: instances.iter().collect(),
        u2i_jobs: batch.u2i_jobs.clone(),
        i2i_jobs: batch.i2i_jobs.clone(),
    };
    batch_pass(model, &plan)
}

/// Trains a fresh model on `log`. The Swing table must have been computed
/// from exactly this log (its source hash is checked), which is the
/// data-leakage guard: i2i positives can then only cite train-split
/// co-occurrence evidence.
pub fn train(
    log: &InteractionLog,
    swing: &SwingScoreTable,
    config: ModelConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if log.is_empty() {
        return Err(Error::Validation("cannot train on an empty log".into()));
    }
    if swing.source_hash() != log.content_hash() {
        return Err(Error::Validation(format!(
            "swing table was computed from a different log (source hash {:016x}, train log hash {:016x}); refusing to risk leaking held-out events into i2i positives",
            swing.source_hash(),
            log.content_hash()
        )));
    }
    let items: Vec<ItemId> = log.item_counts().into_keys().collect();
    let mut model = TrainedModel::init(&items, config.clone())?;
    model.split_hash = log.content_hash();

    let (instances, instance_users) = build_instances(log);
    // Full per-user click sets, used to reject false negatives: an item a
    // user actually clicked must never be labeled 0 for that user, or the
    // contradictory labels inflate the learned variance of exactly the
    // popular items that serve most often as in-batch negatives.
    let mut clicks: BTreeMap<UserId, BTreeSet<ItemId>> = BTreeMap::new();
    for (user, seq) in log.user_sequences() {
        clicks.insert(user, seq.iter().map(|i| i.item).collect());
    }
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    if instances.is_empty() {
        // Nothing to fit (every user has a single event); the initialized
        // model is returned unchanged.
        return Ok(TrainOutcome {
            model,
            epoch_losses,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "train-loop"));
    let mut opt = Adam::new(config.learning_rate, &model);
    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..instances.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &instances[i]).collect();
            let batch_users: Vec<UserId> = chunk.iter().map(|&i| instance_users[i]).collect();
            let plan = plan_batch(batch, &batch_users, &clicks, swing, &config, &mut rng);
            let (loss, grads, _) = batch_pass(&model, &plan)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became non-finite at batch {batch_idx} (learning_rate {})",
                    config.learning_rate
                )));
            }
            opt.apply(&mut model, &grads);
            if config.logvar_decay > 0.0 {
                let shrink = 1.0 - config.learning_rate * config.logvar_decay;
                for head in [&mut model.u2i_head, &mut model.i2i_head] {
                    for w in head.logvar_w.iter_mut() {
                        *w *= shrink;
                    }
                    head.logvar_b *= shrink;
                }
            }
            epoch_loss += loss;
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
    })
}

/// Every (prefix, next-item) pair of every user sequence, in log order,
/// plus a parallel vector naming the user behind each instance.
fn build_instances(log: &InteractionLog) -> (Vec<Instance>, Vec<UserId>) {
    let mut instances = Vec::new();
    let mut users = Vec::new();
    for (user, seq) in log.user_sequences() {
        let items: Vec<ItemId> = seq.iter().map(|i| i.item).collect();
        for t in 1..items.len() {
            instances.push(Instance {
                history: items[..t].to_vec(),
                target: items[t],
            });
            users.push(user);
        }
    }
    (instances, users)
}

/// Draws a uniform in-batch index different from `own` (None if the batch
/// has no other instance).
fn other_index(rng: &mut ChaCha8Rng, len: usize, own: usize) -> Option<usize> {
    if len < 2 {
        return None;
    }
    let j = rng.random_range(0..len - 1);
    Some(if j >= own { j + 1 } else { j })
}

/// Rejection budget for one negative draw. Exhausting it skips the draw
/// rather than admitting a known false negative.
const NEGATIVE_DRAW_ATTEMPTS: usize = 16;

/// Draws an in-batch index whose target passes `accept`, or None.
fn draw_negative(
    rng: &mut ChaCha8Rng,
    len: usize,
    own: usize,
    accept: impl Fn(usize) -> bool,
) -> Option<usize> {
    for _ in 0..NEGATIVE_DRAW_ATTEMPTS {
        let j = other_index(rng, len, own)?;
        if accept(j) {
            return Some(j);
        }
    }
    None
}

fn plan_batch<'a>(
    instances: Vec<&'a Instance>,
    batch_users: &[UserId],
    clicks: &BTreeMap<UserId, BTreeSet<ItemId>>,
    swing: &SwingScoreTable,
    config: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> BatchPlan<'a> {
    let len = instances.len();
    let mut u2i_jobs = Vec::new();
    let mut i2i_jobs = Vec::new();
    let empty = BTreeSet::new();
    for (idx, inst) in instances.iter().enumerate() {
        u2i_jobs.push((idx, inst.target, 1));
        // In-batch negatives follow the popularity distribution of the
        // targets; items the user clicked anywhere in the log are rejected
        // (false negatives).
        let seen = clicks.get(&batch_users[idx]).unwrap_or(&empty);
        for _ in 0..config.u2i_negatives {
            if let Some(j) = draw_negative(rng, len, idx, |j| !seen.contains(&instances[j].target))
            {
                u2i_jobs.push((idx, instances[j].target, 0));
            }
        }
        if config.lambda_i2i > 0.0 {
            for partner in swing.top_positives(inst.target, config.sample_pos) {
                i2i_jobs.push((inst.target, partner, 1));
            }
            // Partners with observed co-occurrence evidence are not valid
            // negatives for the anchor.
            for _ in 0..config.sample_neg {
                if let Some(j) = draw_negative(rng, len, idx, |j| {
                    let partner = instances[j].target;
                    partner != inst.target && swing.get(inst.target, partner) == 0.0
                }) {
                    i2i_jobs.push((inst.target, instances[j].target, 0));
                }
            }
        }
    }
    BatchPlan {
        instances,
        u2i_jobs,
        i2i_jobs,
    }
}

/// Joint loss and gradients for a materialized batch plan. Pure in the model
/// parameters, which is what makes finite-difference verification possible.
fn batch_pass(model: &TrainedModel, plan: &BatchPlan) -> Result<(f64, ModelGrads, BatchStats)> {
    let config = &model.config;
    let d_out = config.item_out_dim();
    let mut grads = ModelGrads::zeros_like(model);
    let mut stats = BatchStats {
        min_abs_relu_preact: f64::INFINITY,
        min_prob_margin: f64::INFINITY,
    };

    // Tower forwards once per unique item touched by the batch.
    let mut needed: std::collections::BTreeSet<ItemId> = std::collections::BTreeSet::new();
    for inst in &plan.instances {
        needed.extend(inst.history.iter().copied());
        needed.insert(inst.target);
    }
    for &(_, target, _) in &plan.u2i_jobs {
        needed.insert(target);
    }
    for &(a, b, _) in &plan.i2i_jobs {
        needed.insert(a);
        needed.insert(b);
    }
    let mut tower: BTreeMap<ItemId, super::mlp::MlpTrace> = BTreeMap::new();
    for &item in &needed {
        let trace = model.item_tower.forward_trace(model.feature_row(item)?);
        stats.min_abs_relu_preact = stats
            .min_abs_relu_preact
            .min(trace.min_abs_relu_preact(&model.item_tower));
        tower.insert(item, trace);
    }
    let emb = |item: ItemId| -> &[f64] { &tower[&item].output };

    // Pooled histories per instance, summed in sorted order exactly like
    // the inference path.
    let context = vec![0.0; config.context_dim];
    let mut pools: Vec<Vec<f64>> = Vec::with_capacity(plan.instances.len());
    for inst in &plan.instances {
        let pool = model.pool_history_with(&inst.history, &mut |i| Ok(tower[&i].output.clone()))?;
        pools.push(pool);
    }

    // Accumulated dL/d(tower output) per item; one tower backward per item
    // at the end.
    let mut emb_grads: BTreeMap<ItemId, Vec<f64>> = BTreeMap::new();
    let mut add_emb_grad = |item: ItemId, g: &[f64], scale: f64| {
        let acc = emb_grads.entry(item).or_insert_with(|| vec![0.0; d_out]);
        for (a, v) in acc.iter_mut().zip(g) {
            *a += scale * v;
        }
    };

    let mut loss_u2i = 0.0;
    if !plan.u2i_jobs.is_empty() {
        let w = 1.0 / plan.u2i_jobs.len() as f64;
        for &(idx, target, label) in &plan.u2i_jobs {
            let inst = plan.instances[idx];
            let input = model.user_input(&pools[idx], &context, emb(target))?;
            let trace = model.user_head.forward_trace(&input);
            stats.min_abs_relu_preact = stats
                .min_abs_relu_preact
                .min(trace.min_abs_relu_preact(&model.user_head));
            let hidden_idx = model.user_head.layers.len() - 2;
            let repr = trace.hidden(hidden_idx).to_vec();
            let logit = trace.output[0];
            let (loss, hg) = model.u2i_head.dual_loss_grad(logit, &repr, label)?;
            loss_u2i += w * loss;
            track_prob_margin(&mut stats, model.u2i_head.estimate(logit, &repr)?.score);
            grads.u2i.add_scaled(&hg, w);
            let dl_dinput = model.user_head.backward_into(
                &trace,
                &[hg.logit],
                Some(&hg.repr),
                &mut grads.head,
                w,
            );
            // Split the input gradient back into pool / context / target.
            let pool_grad = &dl_dinput[..d_out];
            let target_grad = &dl_dinput[d_out + config.context_dim..];
            if !inst.history.is_empty() {
                let inv = 1.0 / inst.history.len() as f64;
                for &h in &inst.history {
                    add_emb_grad(h, pool_grad, inv);
                }
            }
            add_emb_grad(target, target_grad, 1.0);
        }
    }

    let mut loss_i2i = 0.0;
    if !plan.i2i_jobs.is_empty() {
        let w = 1.0 / plan.i2i_jobs.len() as f64;
        let tau = config.temperature;
        for &(a, b, label) in &plan.i2i_jobs {
            let (logit, repr) = score_i2i_from(emb(a), emb(b), tau);
            let (loss, hg) = model.i2i_head.dual_loss_grad(logit, &repr, label)?;
            loss_i2i += w * loss;
            track_prob_margin(&mut stats, model.i2i_head.estimate(logit, &repr)?.score);
            let scale = config.lambda_i2i * w;
            grads.i2i.add_scaled(&hg, scale);
            // dL/de_a = dL/dlogit · τ·e_b + dL/drepr[..d]; symmetric for b.
            let mut ga = vec![0.0; d_out];
            let mut gb = vec![0.0; d_out];
            let (ea, eb) = (emb(a), emb(b));
            for i in 0..d_out {
                ga[i] = hg.logit * tau * eb[i] + hg.repr[i];
                gb[i] = hg.logit * tau * ea[i] + hg.repr[d_out + i];
            }
            add_emb_grad(a, &ga, scale);
            add_emb_grad(b, &gb, scale);
        }
    }

    // One tower backward per touched item, then into the feature rows.
    for (item, out_grad) in &emb_grads {
        let trace = &tower[item];
        let dl_dfeat =
            model
                .item_tower
                .backward_into(trace, out_grad, None, &mut grads.tower, 1.0);
        let slot = model.feature_slot(*item)?;
        let dim = config.embedding_dim;
        for (i, g) in dl_dfeat.iter().enumerate() {
            grads.features[slot * dim + i] += g;
        }
    }

    let loss = loss_u2i + config.lambda_i2i * loss_i2i;
    Ok((loss, grads, stats))
}

fn track_prob_margin(stats: &mut BatchStats, p: f64) {
    let margin = (p - PROB_CLAMP).min((1.0 - PROB_CLAMP) - p);
    stats.min_prob_margin = stats.min_prob_margin.min(margin);
}

/// Adam with the usual defaults (β1 0.9, β2 0.999, ε 1e-8); one moment slot
/// per parameter array, shared global step.
struct Adam {
    lr: f64,
    t: u64,
    slots: Vec<(Vec<f64>, Vec<f64>)>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(lr: f64, model: &TrainedModel) -> Self {
        let mut sizes = vec![model.item_features.len()];
        for arr in model.item_tower.param_arrays() {
            sizes.push(arr.len());
        }
        for arr in model.user_head.param_arrays() {
            sizes.push(arr.len());
        }
        for head in [&model.u2i_head, &model.i2i_head] {
            sizes.push(head.mu_w.len());
            sizes.push(1);
            sizes.push(head.logvar_w.len());
            sizes.push(1);
        }
        Adam {
            lr,
            t: 0,
            slots: sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).collect(),
        }
    }

    fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) {
        let (m, v) = &mut self.slots[slot];
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }

    fn apply(&mut self, model: &mut TrainedModel, grads: &ModelGrads) {
        self.t += 1;
        let mut slot = 0;
        let next = |s: &mut usize| {
            let cur = *s;
            *s += 1;
            cur
        };
        self.update(next(&mut slot), &mut model.item_features, &grads.features);
        {
            let garrs: Vec<&[f64]> = grads.tower.arrays();
            for (arr, g) in model.item_tower.param_arrays_mut().into_iter().zip(garrs) {
                let s = next(&mut slot);
                self.update(s, arr, g);
            }
        }
        {
            let garrs: Vec<&[f64]> = grads.head.arrays();
            for (arr, g) in model.user_head.param_arrays_mut().into_iter().zip(garrs) {
                let s = next(&mut slot);
                self.update(s, arr, g);
            }
        }
        for (head, hg) in [
            (&mut model.u2i_head, &grads.u2i),
            (&mut model.i2i_head, &grads.i2i),
        ] {
            let s = next(&mut slot);
            self.update(s, &mut head.mu_w, &hg.mu_w);
            let s = next(&mut slot);
            let mut b = [head.mu_b];
            self.update(s, &mut b, &[hg.mu_b]);
            head.mu_b = b[0];
            let s = next(&mut slot);
            self.update(s, &mut head.logvar_w, &hg.logvar_w);
            let s = next(&mut slot);
            let mut b = [head.logvar_b];
            self.update(s, &mut b, &[hg.logvar_b]);
            head.logvar_b = b[0];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::swing::compute_swing;
    use crate::types::{CategoryId, EventType, Interaction, UserId};

    fn click(user: u64, item: u64, ts: u64) -> Interaction {
        Interaction {
            user: UserId(user),
            item: ItemId(item),
            category: CategoryId(item % 5),
            timestamp: ts,
            event: EventType::Click,
        }
    }

    /// Two well-separated behavior clusters: users 0..20 click items 0..15,
    /// users 20..40 click items 15..30.
    fn clustered_log(seed: u64) -> InteractionLog {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for user in 0..40u64 {
            let (lo, hi) = if user < 20 { (0, 15) } else { (15, 30) };
            for t in 0..12u64 {
                rows.push(click(user, rng.random_range(lo..hi), t));
            }
        }
        InteractionLog::from_interactions(rows)
    }

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            embedding_dim: 8,
            item_tower_layers: vec![12, 8],
            user_head_layers: vec![16, 8, 1],
            batch_size: 64,
            epochs: 3,
            seed,
            ..ModelConfig::default()
        }
    }

    fn swing_for(log: &InteractionLog) -> SwingScoreTable {
        compute_swing(log, 1.0, 100, 7).unwrap()
    }

    #[test]
    fn rejects_swing_from_a_different_log() {
        let log = clustered_log(1);
        let other = clustered_log(2);
        let swing = swing_for(&other);
        let err = train(&log, &swing, small_config(0)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let log = clustered_log(3);
        let swing = swing_for(&log);
        let mut config = small_config(42);
        config.epochs = 2;
        let a = train(&log, &swing, config.clone()).unwrap();
        let b = train(&log, &swing, config).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        let log = clustered_log(5);
        let swing = swing_for(&log);
        let outcome = train(&log, &swing, small_config(11)).unwrap();
        let first = outcome.epoch_losses.first().copied().unwrap();
        let last = outcome.epoch_losses.last().copied().unwrap();
        assert!(
            last < first,
            "expected loss to fall, got first {first} last {last}"
        );
    }

    #[test]
    fn lambda_zero_freezes_i2i_head_parameters() {
        let log = clustered_log(6);
        let swing = swing_for(&log);
        let mut config = small_config(13);
        config.lambda_i2i = 0.0;
        config.epochs = 1;
        let items: Vec<ItemId> = log.item_counts().into_keys().collect();
        let fresh = TrainedModel::init(&items, config.clone()).unwrap();
        let outcome = train(&log, &swing, config).unwrap();
        assert_eq!(outcome.model.i2i_head, fresh.i2i_head);
        // The shared tower still moves via the u2i route.
        assert_ne!(outcome.model.item_tower, fresh.item_tower);
    }

    #[test]
    fn trained_tower_output_is_finite_and_nonzero() {
        let log = clustered_log(7);
        let swing = swing_for(&log);
        let mut config = small_config(17);
        config.epochs = 1;
        let outcome = train(&log, &swing, config).unwrap();
        let e = outcome.model.forward_item(ItemId(0)).unwrap();
        let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm.is_finite() && norm > 0.0);
    }

    #[test]
    fn trained_model_separates_clusters_u2i() {
        let log = clustered_log(9);
        let swing = swing_for(&log);
        let mut config = small_config(19);
        config.epochs = 30;
        config.batch_size = 32;
        config.learning_rate = 3e-3;
        let model = train(&log, &swing, config).unwrap().model;
        // A user with an in-cluster history should prefer in-cluster items.
        let user = crate::types::UserFeatures::new(
            UserId(0),
            vec![ItemId(1), ItemId(2), ItemId(3), ItemId(4)],
        );
        let mut intra = 0.0;
        let mut cross = 0.0;
        for i in [5u64, 6, 7, 8] {
            intra += model.score_u2i(&user, ItemId(i)).unwrap().0;
        }
        for i in [20u64, 21, 22, 23] {
            cross += model.score_u2i(&user, ItemId(i)).unwrap().0;
        }
        assert!(
            intra > cross,
            "intra-cluster mean logit {intra} should exceed cross-cluster {cross}"
        );
    }

    /// Toy-model finite-difference check of the whole joint gradient, plus
    /// the (1, λ) decomposition of the joint loss.
    #[test]
    fn joint_gradient_matches_finite_differences() {
        let mut outer = ChaCha8Rng::seed_from_u64(404);
        let mut checked = 0;
        while checked < 5 {
            let seed: u64 = outer.random();
            let config = ModelConfig {
                embedding_dim: 2,
                item_tower_layers: vec![3, 2],
                user_head_layers: vec![4, 2, 1],
                lambda_i2i: 0.5,
                mc_train: 4,
                seed,
                ..ModelConfig::default()
            };
            let items: Vec<ItemId> = (0..3).map(ItemId).collect();
            let model = TrainedModel::init(&items, config).unwrap();
            let batch = JointBatch {
                instances: vec![
                    (vec![ItemId(0)], ItemId(1)),
                    (vec![ItemId(0), ItemId(1)], ItemId(2)),
                ],
                u2i_jobs: vec![(0, ItemId(1), 1), (0, ItemId(2), 0), (1, ItemId(2), 1)],
                i2i_jobs: vec![(ItemId(1), ItemId(2), 1), (ItemId(1), ItemId(0), 0)],
            };
            let (_, grads, stats) = joint_loss_grad(&model, &batch).unwrap();
            // Resample configurations where a ReLU kink or the probability
            // clamp would invalidate the finite-difference oracle.
            if stats.min_abs_relu_preact < 1e-2 || stats.min_prob_margin < 1e-4 {
                continue;
            }
            let loss_of = |m: &TrainedModel| joint_loss_grad(m, &batch).unwrap().0;
            let h = 1e-5;
            let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-6);
            let check = |set: &dyn Fn(&mut TrainedModel, f64), analytic: f64, name: &str| {
                let mut hi = model.clone();
                set(&mut hi, h);
                let mut lo = model.clone();
                set(&mut lo, -h);
                let fd = (loss_of(&hi) - loss_of(&lo)) / (2.0 * h);
                if fd.abs() < 1e-9 && analytic.abs() < 1e-9 {
                    return;
                }
                assert!(
                    rel(analytic, fd) < 1e-4,
                    "{name}: analytic {analytic}, fd {fd}"
                );
            };
            for i in 0..model.item_features.len() {
                check(
                    &|m, d| m.item_features[i] += d,
                    grads.features[i],
                    "features",
                );
            }
            for l in 0..model.item_tower.layers.len() {
                for i in 0..model.item_tower.layers[l].w.len() {
                    check(
                        &|m, d| m.item_tower.layers[l].w[i] += d,
                        grads.tower.layers[l].0[i],
                        "tower w",
                    );
                }
                for i in 0..model.item_tower.layers[l].b.len() {
                    check(
                        &|m, d| m.item_tower.layers[l].b[i] += d,
                        grads.tower.layers[l].1[i],
                        "tower b",
                    );
                }
            }
            for l in 0..model.user_head.layers.len() {
                for i in 0..model.user_head.layers[l].w.len() {
                    check(
                        &|m, d| m.user_head.layers[l].w[i] += d,
                        grads.head.layers[l].0[i],
                        "head w",
                    );
                }
            }
            for i in 0..model.u2i_head.mu_w.len() {
                check(&|m, d| m.u2i_head.mu_w[i] += d, grads.u2i.mu_w[i], "u2i mu_w");
                check(
                    &|m, d| m.u2i_head.logvar_w[i] += d,
                    grads.u2i.logvar_w[i],
                    "u2i logvar_w",
                );
            }
            check(&|m, d| m.u2i_head.mu_b += d, grads.u2i.mu_b, "u2i mu_b");
            for i in 0..model.i2i_head.mu_w.len() {
                check(&|m, d| m.i2i_head.mu_w[i] += d, grads.i2i.mu_w[i], "i2i mu_w");
            }
            check(
                &|m, d| m.i2i_head.logvar_b += d,
                grads.i2i.logvar_b,
                "i2i logvar_b",
            );

            // Joint loss decomposes as u2i + λ·i2i: second difference in λ
            // vanishes.
            let at_lambda = |lambda: f64| {
                let mut m = model.clone();
                m.config.lambda_i2i = lambda;
                loss_of(&m)
            };
            let (l0, l1, l2) = (at_lambda(0.0), at_lambda(1.0), at_lambda(2.0));
            assert!((l2 - 2.0 * l1 + l0).abs() < 1e-12);
            checked += 1;
        }
    }
}

//! Two-tower scorer with uncertainty heads.
//!
//! Items pass through a learned 32-wide id feature and a fully connected
//! tower; item-to-item scores are temperature-scaled inner products of tower
//! outputs, and user-to-item scores run a mean-pooled history representation
//! (concatenated with context and the target embedding) through a dense
//! head. Both routes end in a trainable uncertainty head that turns the raw
//! logit into a calibrated (score, variance) pair.
//!
//! The target item enters the user route only through its tower embedding,
//! so item embeddings remain precomputable offline.

mod io;
mod mlp;
mod train;

pub use io::{load_model, load_model_with_meta, save_model, save_model_with_meta};
pub use mlp::{Layer, Mlp, MlpGrad, MlpTrace};
pub use train::{
    joint_loss_grad, train, BatchStats, HeadGrads, JointBatch, ModelGrads, TrainOutcome,
};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{EmbeddingTable, ItemId, UserFeatures};
use crate::uncertainty::HeteroscedasticHead;

/// Hyper-parameters for the jointly trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Width of the learned per-item id feature.
    pub embedding_dim: usize,
    /// Item tower widths; the last width is the embedding the index stores.
    pub item_tower_layers: Vec<usize>,
    /// User head widths; must end in 1 (the scalar logit).
    pub user_head_layers: Vec<usize>,
    /// Width of the opaque user context vector (0 = unused).
    pub context_dim: usize,
    /// Temperature scaling the i2i inner product.
    pub temperature: f64,
    /// Weight of the i2i loss inside the joint objective.
    pub lambda_i2i: f64,
    /// Positive partners per i2i anchor, taken from the Swing table.
    pub sample_pos: usize,
    /// In-batch negatives per i2i anchor.
    pub sample_neg: usize,
    /// In-batch negatives per u2i positive.
    pub u2i_negatives: usize,
    pub learning_rate: f64,
    /// Decoupled L2 pull of the log-variance maps toward zero (σ² toward 1).
    /// Anchors the predicted variance at its prior wherever the data provides
    /// little gradient signal, instead of letting those regions ride the
    /// global variance collapse of well-fit examples.
    pub logvar_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Monte-Carlo samples inside the uncertainty heads during training.
    pub mc_train: usize,
    /// Monte-Carlo samples used by frozen heads at inference time.
    pub mc_eval: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 32,
            item_tower_layers: vec![64, 48, 32],
            user_head_layers: vec![128, 64, 1],
            context_dim: 0,
            temperature: 10.0,
            lambda_i2i: 0.1,
            sample_pos: 2,
            sample_neg: 8,
            u2i_negatives: 4,
            learning_rate: 1e-3,
            logvar_decay: 0.0,
            batch_size: 256,
            epochs: 10,
            mc_train: 8,
            mc_eval: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if self.item_tower_layers.is_empty() || self.item_tower_layers.contains(&0) {
            return Err(Error::Config(format!(
                "invalid item_tower_layers {:?}",
                self.item_tower_layers
            )));
        }
        if self.user_head_layers.last() != Some(&1) {
            return Err(Error::Config(format!(
                "user_head_layers must end in 1, got {:?}",
                self.user_head_layers
            )));
        }
        if self.user_head_layers.len() < 2 || self.user_head_layers.contains(&0) {
            return Err(Error::Config(format!(
                "user_head_layers needs at least one hidden layer, got {:?}",
                self.user_head_layers
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.lambda_i2i < 0.0 || !self.lambda_i2i.is_finite() {
            return Err(Error::Config(format!(
                "lambda_i2i must be ≥ 0, got {}",
                self.lambda_i2i
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.logvar_decay < 0.0 || !self.logvar_decay.is_finite() {
            return Err(Error::Config(format!(
                "logvar_decay must be ≥ 0, got {}",
                self.logvar_decay
            )));
        }
        for (name, v) in [
            ("sample_pos", self.sample_pos),
            ("sample_neg", self.sample_neg),
            ("u2i_negatives", self.u2i_negatives),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("mc_train", self.mc_train),
            ("mc_eval", self.mc_eval),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Width of the item embedding produced by the tower.
    pub fn item_out_dim(&self) -> usize {
        *self.item_tower_layers.last().expect("validated non-empty")
    }

    /// Input width of the user head: pooled history ⊕ context ⊕ target.
    pub fn user_input_dim(&self) -> usize {
        2 * self.item_out_dim() + self.context_dim
    }

    /// Representation width feeding the u2i uncertainty head: the last
    /// hidden layer of the user head.
    pub fn u2i_repr_dim(&self) -> usize {
        self.user_head_layers[self.user_head_layers.len() - 2]
    }

    /// Representation width feeding the i2i uncertainty head: [e_a, e_b].
    pub fn i2i_repr_dim(&self) -> usize {
        2 * self.item_out_dim()
    }
}

/// Frozen parameters of a trained (or freshly initialized) model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: ModelConfig,
    /// Item id → dense row index into `item_features`.
    item_index: BTreeMap<ItemId, usize>,
    /// Learned per-item features, row-major (n × embedding_dim).
    pub item_features: Vec<f64>,
    pub item_tower: Mlp,
    pub user_head: Mlp,
    pub u2i_head: HeteroscedasticHead,
    pub i2i_head: HeteroscedasticHead,
    /// Content hash of the train log this model was fitted on (0 = none).
    pub split_hash: u64,
}

impl TrainedModel {
    /// Seeded He-uniform initialization over the given item universe.
    pub fn init(items: &[ItemId], config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Self::build(items, config, false)
    }

    /// All-zero parameters; useful for symmetry tests.
    pub fn init_zeros(items: &[ItemId], config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Self::build(items, config, true)
    }

    fn build(items: &[ItemId], config: ModelConfig, zeros: bool) -> Result<Self> {
        let mut item_index = BTreeMap::new();
        for &item in items {
            let next = item_index.len();
            if item_index.insert(item, next).is_some() {
                return Err(Error::Validation(format!("duplicate item id {item}")));
            }
        }
        // Re-number in sorted id order so the mapping is input-order
        // independent.
        for (rank, (_, slot)) in item_index.iter_mut().enumerate() {
            *slot = rank;
        }
        let n = item_index.len();
        if n == 0 {
            return Err(Error::Validation("item universe is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let item_features = if zeros {
            vec![0.0; n * config.embedding_dim]
        } else {
            use rand::Rng;
            (0..n * config.embedding_dim)
                .map(|_| rng.random_range(-0.1..0.1))
                .collect()
        };
        let (item_tower, user_head) = if zeros {
            (
                Mlp::zeros(config.embedding_dim, &config.item_tower_layers)?,
                Mlp::zeros(config.user_input_dim(), &config.user_head_layers)?,
            )
        } else {
            (
                Mlp::he_uniform(config.embedding_dim, &config.item_tower_layers, &mut rng)?,
                Mlp::he_uniform(config.user_input_dim(), &config.user_head_layers, &mut rng)?,
            )
        };
        let u2i_head =
            HeteroscedasticHead::zeros(config.u2i_repr_dim(), config.mc_train, config.seed ^ 0xA1)?;
        let i2i_head =
            HeteroscedasticHead::zeros(config.i2i_repr_dim(), config.mc_train, config.seed ^ 0xB2)?;
        Ok(TrainedModel {
            config,
            item_index,
            item_features,
            item_tower,
            user_head,
            u2i_head,
            i2i_head,
            split_hash: 0,
        })
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.item_index.keys().copied()
    }

    pub fn num_items(&self) -> usize {
        self.item_index.len()
    }

    pub fn knows(&self, item: ItemId) -> bool {
        self.item_index.contains_key(&item)
    }

    pub(crate) fn feature_row(&self, item: ItemId) -> Result<&[f64]> {
        let &slot = self
            .item_index
            .get(&item)
            .ok_or_else(|| Error::Lookup(format!("unknown item id {item}")))?;
        let d = self.config.embedding_dim;
        Ok(&self.item_features[slot * d..(slot + 1) * d])
    }

    pub(crate) fn feature_slot(&self, item: ItemId) -> Result<usize> {
        self.item_index
            .get(&item)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("unknown item id {item}")))
    }

    pub(crate) fn item_index(&self) -> &BTreeMap<ItemId, usize> {
        &self.item_index
    }

    /// Item-tower forward pass: the embedding the index stores.
    pub fn forward_item(&self, item: ItemId) -> Result<Vec<f64>> {
        let out = self.item_tower.forward(self.feature_row(item)?);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "item tower produced non-finite output for item {item}"
            )));
        }
        Ok(out)
    }

    /// Tower forwards for every known item, keyed by id.
    pub fn all_item_embeddings(&self) -> Result<BTreeMap<ItemId, Vec<f64>>> {
        self.items()
            .map(|item| Ok((item, self.forward_item(item)?)))
            .collect()
    }

    /// Mean of the history items' tower embeddings. The sum runs in sorted
    /// id order (with multiplicity) so any permutation of the same history
    /// produces a bit-identical pool. Empty histories pool to zero.
    pub fn pool_history(&self, history: &[ItemId]) -> Result<Vec<f64>> {
        self.pool_history_with(history, &mut |item| self.forward_item(item))
    }

    /// Pooling over a caller-supplied embedding source. Retrieval passes a
    /// cache here; the cached and uncached paths are exactly equal because
    /// both run this same sorted accumulation.
    pub fn pool_history_with(
        &self,
        history: &[ItemId],
        embed: &mut dyn FnMut(ItemId) -> Result<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        let d = self.config.item_out_dim();
        let mut pool = vec![0.0; d];
        if history.is_empty() {
            return Ok(pool);
        }
        let mut sorted = history.to_vec();
        sorted.sort_unstable();
        for item in &sorted {
            let e = embed(*item)?;
            for (p, v) in pool.iter_mut().zip(&e) {
                *p += v;
            }
        }
        let inv = 1.0 / history.len() as f64;
        for p in pool.iter_mut() {
            *p *= inv;
        }
        Ok(pool)
    }

    pub(crate) fn user_input(
        &self,
        pool: &[f64],
        context: &[f64],
        target_embedding: &[f64],
    ) -> Result<Vec<f64>> {
        if context.len() != self.config.context_dim {
            return Err(Error::Validation(format!(
                "context width {} does not match configured {}",
                context.len(),
                self.config.context_dim
            )));
        }
        let mut input = Vec::with_capacity(self.config.user_input_dim());
        input.extend_from_slice(pool);
        input.extend_from_slice(context);
        input.extend_from_slice(target_embedding);
        Ok(input)
    }

    /// User-to-item raw score. Returns the scalar pre-activation logit and
    /// the final hidden layer of the user head (the u2i representation).
    pub fn score_u2i(&self, user: &UserFeatures, item: ItemId) -> Result<(f64, Vec<f64>)> {
        let target = self.forward_item(item)?;
        let pool = self.pool_history(&user.history)?;
        self.score_u2i_pooled(&pool, &user.context, &target)
    }

    /// Same as [`Self::score_u2i`] but over precomputed pool and target
    /// embeddings, for callers that cache tower outputs.
    pub fn score_u2i_pooled(
        &self,
        pool: &[f64],
        context: &[f64],
        target_embedding: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let input = self.user_input(pool, context, target_embedding)?;
        let trace = self.user_head.forward_trace(&input);
        let hidden_idx = self.user_head.layers.len() - 2;
        let repr = trace.hidden(hidden_idx).to_vec();
        let logit = trace.output[0];
        if !logit.is_finite() {
            return Err(Error::Numeric("user head produced non-finite logit".into()));
        }
        Ok((logit, repr))
    }

    /// Item-to-item raw score: τ · e_a · e_b with repr [e_a, e_b].
    pub fn score_i2i(&self, a: ItemId, b: ItemId) -> Result<(f64, Vec<f64>)> {
        let ea = self.forward_item(a)?;
        let eb = self.forward_item(b)?;
        Ok(score_i2i_from(&ea, &eb, self.config.temperature))
    }

    /// Exports tower outputs as an f32 embedding table for index building.
    pub fn export_embeddings(&self) -> Result<EmbeddingTable> {
        let mut table = EmbeddingTable::new(self.config.item_out_dim())?;
        for item in self.items() {
            let e = self.forward_item(item)?;
            table.insert(item, e.iter().map(|&v| v as f32).collect())?;
        }
        Ok(table)
    }

    /// Frozen copies of the uncertainty heads at the evaluation Monte-Carlo
    /// budget.
    pub fn eval_heads(&self) -> Result<(HeteroscedasticHead, HeteroscedasticHead)> {
        Ok((
            self.u2i_head.with_mc_samples(self.config.mc_eval)?,
            self.i2i_head.with_mc_samples(self.config.mc_eval)?,
        ))
    }
}

/// i2i scoring over raw embeddings (shared by the model and the trainer).
pub(crate) fn score_i2i_from(ea: &[f64], eb: &[f64], temperature: f64) -> (f64, Vec<f64>) {
    let dot: f64 = ea.iter().zip(eb).map(|(x, y)| x * y).sum();
    let mut repr = Vec::with_capacity(ea.len() + eb.len());
    repr.extend_from_slice(ea);
    repr.extend_from_slice(eb);
    (temperature * dot, repr)
}

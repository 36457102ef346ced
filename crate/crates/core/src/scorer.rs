//! Scoring abstractions consumed by index reweighting and retrieval.
//!
//! Both return a raw pre-sigmoid score and the pair representation an
//! uncertainty head may consume. [`crate::model::TrainedModel`] implements
//! both traits; [`DotProductScorer`] provides a training-free route over a
//! plain embedding table for index-only experiments.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::TrainedModel;
use crate::types::{EmbeddingTable, ItemId, UserFeatures};

/// Scores a (user, item) pair: (raw logit, representation).
pub trait UserItemScorer {
    fn score_user_item(&self, user: &UserFeatures, item: ItemId) -> Result<(f64, Vec<f64>)>;
}

/// Scores an (item, item) pair: (raw logit, representation).
pub trait ItemPairScorer {
    fn score_item_pair(&self, a: ItemId, b: ItemId) -> Result<(f64, Vec<f64>)>;
}

impl UserItemScorer for TrainedModel {
    fn score_user_item(&self, user: &UserFeatures, item: ItemId) -> Result<(f64, Vec<f64>)> {
        self.score_u2i(user, item)
    }
}

impl ItemPairScorer for TrainedModel {
    fn score_item_pair(&self, a: ItemId, b: ItemId) -> Result<(f64, Vec<f64>)> {
        self.score_i2i(a, b)
    }
}

/// Tower outputs cached once; scoring then avoids repeated forwards. Results
/// are exactly equal to the uncached model paths because `forward_item` is
/// deterministic.
pub struct CachedModelScorer<'a> {
    model: &'a TrainedModel,
    embeddings: BTreeMap<ItemId, Vec<f64>>,
}

impl<'a> CachedModelScorer<'a> {
    pub fn new(model: &'a TrainedModel) -> Result<Self> {
        Ok(CachedModelScorer {
            embeddings: model.all_item_embeddings()?,
            model,
        })
    }

    fn embedding(&self, item: ItemId) -> Result<&Vec<f64>> {
        self.embeddings
            .get(&item)
            .ok_or_else(|| Error::Lookup(format!("unknown item id {item}")))
    }
}

impl UserItemScorer for CachedModelScorer<'_> {
    fn score_user_item(&self, user: &UserFeatures, item: ItemId) -> Result<(f64, Vec<f64>)> {
        let target = self.embedding(item)?.clone();
        let pool = self
            .model
            .pool_history_with(&user.history, &mut |i| Ok(self.embedding(i)?.clone()))?;
        self.model.score_u2i_pooled(&pool, &user.context, &target)
    }
}

impl ItemPairScorer for CachedModelScorer<'_> {
    fn score_item_pair(&self, a: ItemId, b: ItemId) -> Result<(f64, Vec<f64>)> {
        Ok(crate::model::score_i2i_from(
            self.embedding(a)?,
            self.embedding(b)?,
            self.model.config.temperature,
        ))
    }
}

/// Model-free scorer: temperature-scaled inner products over a fixed
/// embedding table; user side mean-pools the history. Representations are
/// empty (pair it with heads that ignore them, e.g. the count-based head).
pub struct DotProductScorer {
    embeddings: BTreeMap<ItemId, Vec<f64>>,
    dim: usize,
    temperature: f64,
}

impl DotProductScorer {
    pub fn new(table: &EmbeddingTable, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        let embeddings = table
            .iter()
            .map(|(id, v)| (id, v.iter().map(|&x| x as f64).collect()))
            .collect();
        Ok(DotProductScorer {
            embeddings,
            dim: table.dim(),
            temperature,
        })
    }

    fn embedding(&self, item: ItemId) -> Result<&Vec<f64>> {
        self.embeddings
            .get(&item)
            .ok_or_else(|| Error::Lookup(format!("unknown item id {item}")))
    }

    /// Sorted-order mean pool, mirroring the model's permutation-invariant
    /// accumulation.
    fn pool(&self, history: &[ItemId]) -> Result<Vec<f64>> {
        let mut pool = vec![0.0; self.dim];
        if history.is_empty() {
            return Ok(pool);
        }
        let mut sorted = history.to_vec();
        sorted.sort_unstable();
        for item in &sorted {
            for (p, v) in pool.iter_mut().zip(self.embedding(*item)?) {
                *p += v;
            }
        }
        let inv = 1.0 / history.len() as f64;
        for p in pool.iter_mut() {
            *p *= inv;
        }
        Ok(pool)
    }
}

impl UserItemScorer for DotProductScorer {
    fn score_user_item(&self, user: &UserFeatures, item: ItemId) -> Result<(f64, Vec<f64>)> {
        let pool = self.pool(&user.history)?;
        let e = self.embedding(item)?;
        let dot: f64 = pool.iter().zip(e).map(|(x, y)| x * y).sum();
        Ok((self.temperature * dot, Vec::new()))
    }
}

impl ItemPairScorer for DotProductScorer {
    fn score_item_pair(&self, a: ItemId, b: ItemId) -> Result<(f64, Vec<f64>)> {
        let ea = self.embedding(a)?;
        let eb = self.embedding(b)?;
        let dot: f64 = ea.iter().zip(eb).map(|(x, y)| x * y).sum();
        Ok((self.temperature * dot, Vec::new()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::types::UserId;

    #[test]
    fn cached_scorer_equals_uncached_model() {
        let items: Vec<ItemId> = (0..10).map(ItemId).collect();
        let config = ModelConfig {
            embedding_dim: 4,
            item_tower_layers: vec![6, 4],
            user_head_layers: vec![8, 5, 1],
            seed: 3,
            ..ModelConfig::default()
        };
        let model = TrainedModel::init(&items, config).unwrap();
        let cached = CachedModelScorer::new(&model).unwrap();
        let user = UserFeatures::new(UserId(1), vec![ItemId(2), ItemId(7), ItemId(2)]);
        for &i in &items {
            let (l1, r1) = model.score_user_item(&user, i).unwrap();
            let (l2, r2) = cached.score_user_item(&user, i).unwrap();
            assert_eq!(l1.to_bits(), l2.to_bits());
            assert_eq!(r1, r2);
            let (p1, q1) = model.score_item_pair(ItemId(0), i).unwrap();
            let (p2, q2) = cached.score_item_pair(ItemId(0), i).unwrap();
            assert_eq!(p1.to_bits(), p2.to_bits());
            assert_eq!(q1, q2);
        }
    }

    #[test]
    fn dot_product_scorer_basics() {
        let mut table = EmbeddingTable::new(2).unwrap();
        table.insert(ItemId(1), vec![1.0, 0.0]).unwrap();
        table.insert(ItemId(2), vec![0.0, 1.0]).unwrap();
        table.insert(ItemId(3), vec![1.0, 0.0]).unwrap();
        let scorer = DotProductScorer::new(&table, 10.0).unwrap();
        let (logit, repr) = scorer.score_item_pair(ItemId(1), ItemId(3)).unwrap();
        assert_eq!(logit, 10.0);
        assert!(repr.is_empty());
        let (logit, _) = scorer.score_item_pair(ItemId(1), ItemId(2)).unwrap();
        assert_eq!(logit, 0.0);
        // User pooling: history {1,3} pools to [1, 0].
        let user = UserFeatures::new(UserId(1), vec![ItemId(1), ItemId(3)]);
        let (logit, _) = scorer.score_user_item(&user, ItemId(1)).unwrap();
        assert_eq!(logit, 10.0);
        assert!(scorer.score_item_pair(ItemId(1), ItemId(9)).is_err());
    }
}

//! Synthetic interaction data with a long-tail popularity profile.
//!
//! Items live in latent clusters with ground-truth embeddings; users carry
//! cluster affinities; interactions are drawn ∝ affinity × Zipf popularity.
//! The generator emits both oracle embeddings (noise-free) and observed
//! embeddings whose per-item noise scales with 1/sqrt(1 + count), so
//! index-only experiments can bypass training: rarely-seen items get
//! unreliable observed positions, exactly the regime uncertainty-aware
//! indexing targets.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::stable_hash::derive_seed;
use crate::types::{
    CategoryId, EmbeddingTable, EventType, GroundTruth, Interaction, InteractionLog, ItemId,
    UserId,
};

/// Full description of one synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_users: u64,
    pub num_items: u64,
    pub num_categories: u64,
    /// Popularity-weight exponent: weight = rank^(−zipf_exponent); 0 means
    /// uniform.
    pub zipf_exponent: f64,
    pub num_clusters: u64,
    /// Distance of each cluster center from the origin; centers in random
    /// directions are near-orthogonal, so this also sets their spacing.
    pub cluster_separation: f64,
    pub embedding_dim: usize,
    pub events_per_user: u64,
    /// Base observation noise; per-item scale is noise_scale/sqrt(1+count).
    pub noise_scale: f64,
    /// Ground-truth preferred items kept per user (unseen items only).
    pub truth_per_user: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_users: 400,
            num_items: 2000,
            num_categories: 40,
            zipf_exponent: 1.0,
            num_clusters: 4,
            cluster_separation: 4.0,
            embedding_dim: 16,
            events_per_user: 30,
            noise_scale: 1.2,
            truth_per_user: 20,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_items == 0 {
            return Err(Error::Config("spec needs at least one item".into()));
        }
        if self.num_users == 0 {
            return Err(Error::Config("spec needs at least one user".into()));
        }
        if self.num_categories == 0 || self.num_clusters == 0 {
            return Err(Error::Config("categories and clusters must be ≥ 1".into()));
        }
        if self.num_clusters > self.num_categories {
            return Err(Error::Config(format!(
                "{} clusters cannot share {} categories: each cluster needs a home block",
                self.num_clusters, self.num_categories
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be ≥ 1".into()));
        }
        if self.events_per_user < 2 {
            return Err(Error::Config(
                "events_per_user must be ≥ 2 so leave-one-out splits exist".into(),
            ));
        }
        if !self.zipf_exponent.is_finite() || self.zipf_exponent < 0.0 {
            return Err(Error::Config("zipf_exponent must be ≥ 0".into()));
        }
        if !self.cluster_separation.is_finite() || self.cluster_separation < 0.0 {
            return Err(Error::Config("cluster_separation must be ≥ 0".into()));
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(Error::Config("noise_scale must be ≥ 0".into()));
        }
        if self.truth_per_user == 0 {
            return Err(Error::Config("truth_per_user must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Everything a downstream experiment needs, including artifacts that let
/// it skip training entirely.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub log: InteractionLog,
    /// Per-user preferred items by oracle affinity, excluding items the
    /// user already interacted with.
    pub truth: GroundTruth,
    pub oracle_embeddings: EmbeddingTable,
    pub observed_embeddings: EmbeddingTable,
    pub categories: BTreeMap<ItemId, CategoryId>,
    /// Realized interaction count per item (0 for never-drawn items).
    pub item_counts: BTreeMap<ItemId, u64>,
}

/// The noise law: observation noise shrinks with evidence.
pub fn noise_scale_for(base: f64, count: u64) -> f64 {
    base / (1.0 + count as f64).sqrt()
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Deterministic synthetic dataset for the spec's seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let items: Vec<ItemId> = (0..spec.num_items).map(ItemId).collect();
    let users: Vec<UserId> = (0..spec.num_users).map(UserId).collect();
    let k = spec.num_clusters as usize;
    let dim = spec.embedding_dim;

    // Popularity: a seeded rank permutation, weight = rank^(−s).
    let mut rank_of: Vec<usize> = (0..items.len()).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth/popularity"));
        rank_of.shuffle(&mut rng);
    }
    let popularity: Vec<f64> = rank_of
        .iter()
        .map(|&rank| ((rank + 1) as f64).powf(-spec.zipf_exponent))
        .collect();

    // Cluster membership and centers.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth/clusters"));
    let cluster_of: Vec<usize> = items.iter().map(|_| rng.random_range(0..k)).collect();
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let v = standard_normal_vec(&mut rng, dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x / norm * spec.cluster_separation).collect()
        })
        .collect();

    // Oracle item embeddings: center + unit jitter.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth/item-emb"));
    let mut oracle = EmbeddingTable::new(dim)?;
    let mut oracle_f64: Vec<Vec<f64>> = Vec::with_capacity(items.len());
    for (idx, &item) in items.iter().enumerate() {
        let jitter = standard_normal_vec(&mut rng, dim);
        let v: Vec<f64> = centers[cluster_of[idx]]
            .iter()
            .zip(&jitter)
            .map(|(c, j)| c + j)
            .collect();
        oracle.insert(item, v.iter().map(|&x| x as f32).collect())?;
        oracle_f64.push(v);
    }

    // Categories: each category's home cluster is cate % k; items pick from
    // their cluster's home block 90% of the time.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth/categories"));
    let home_block: Vec<Vec<u64>> = (0..k as u64)
        .map(|j| (0..spec.num_categories).filter(|c| c % spec.num_clusters == j).collect())
        .collect();
    let mut categories = BTreeMap::new();
    for (idx, &item) in items.iter().enumerate() {
        let cate = if rng.random_range(0.0..1.0) < 0.9 {
            let block = &home_block[cluster_of[idx]];
            block[rng.random_range(0..block.len())]
        } else {
            rng.random_range(0..spec.num_categories)
        };
        categories.insert(item, CategoryId(cate));
    }

    // Users: a primary cluster plus an oracle embedding near its center.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth/users"));
    let primary: Vec<usize> = users.iter().map(|_| rng.random_range(0..k)).collect();
    let user_emb: Vec<Vec<f64>> = users
        .iter()
        .enumerate()
        .map(|(u, _)| {
            let jitter = standard_normal_vec(&mut rng, dim);
            centers[primary[u]]
                .iter()
                .zip(&jitter)
                .map(|(c, j)| c + 0.5 * j)
                .collect()
        })
        .collect();

    // Interactions: item weight = popularity × affinity(user, cluster).
    const PRIMARY_AFFINITY: f64 = 8.0;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth/events"));
    let mut interactions = Vec::with_capacity((spec.num_users * spec.events_per_user) as usize);
    for (u, &user) in users.iter().enumerate() {
        let mut prefix = Vec::with_capacity(items.len());
        let mut acc = 0.0;
        for idx in 0..items.len() {
            let affinity = if cluster_of[idx] == primary[u] { PRIMARY_AFFINITY } else { 1.0 };
            acc += popularity[idx] * affinity;
            prefix.push(acc);
        }
        let total = acc;
        for t in 1..=spec.events_per_user {
            let draw = rng.random_range(0.0..total);
            let idx = prefix.partition_point(|&p| p <= draw).min(items.len() - 1);
            let event = if rng.random_range(0.0..1.0) < 0.9 {
                EventType::Click
            } else {
                EventType::Purchase
            };
            interactions.push(Interaction {
                user,
                item: items[idx],
                category: categories[&items[idx]],
                timestamp: t,
                event,
            });
        }
    }
    let log = InteractionLog::from_interactions(interactions);

    // Realized counts drive the observation-noise law.
    let mut item_counts: BTreeMap<ItemId, u64> = items.iter().map(|&i| (i, 0)).collect();
    for (item, count) in log.item_counts() {
        item_counts.insert(item, count);
    }

    // Observed embeddings: oracle + count-scaled noise.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth/noise"));
    let mut observed = EmbeddingTable::new(dim)?;
    for (idx, &item) in items.iter().enumerate() {
        let scale = noise_scale_for(spec.noise_scale, item_counts[&item]);
        let noise = standard_normal_vec(&mut rng, dim);
        let v: Vec<f32> = oracle_f64[idx]
            .iter()
            .zip(&noise)
            .map(|(o, n)| (o + scale * n) as f32)
            .collect();
        observed.insert(item, v)?;
    }

    // Truth: the user's top unseen items by oracle dot product.
    let mut truth: GroundTruth = BTreeMap::new();
    let seen: BTreeMap<UserId, std::collections::BTreeSet<ItemId>> = {
        let mut m: BTreeMap<UserId, std::collections::BTreeSet<ItemId>> = BTreeMap::new();
        for i in log.interactions() {
            m.entry(i.user).or_default().insert(i.item);
        }
        m
    };
    for (u, &user) in users.iter().enumerate() {
        let seen_items = seen.get(&user);
        let mut scored: Vec<(f64, ItemId)> = items
            .iter()
            .enumerate()
            .filter(|(_, item)| seen_items.map(|s| !s.contains(item)).unwrap_or(true))
            .map(|(idx, &item)| {
                let dot: f64 = user_emb[u]
                    .iter()
                    .zip(&oracle_f64[idx])
                    .map(|(a, b)| a * b)
                    .sum();
                (dot, item)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        truth.insert(
            user,
            scored.iter().take(spec.truth_per_user).map(|&(_, i)| i).collect(),
        );
    }

    Ok(SyntheticData {
        log,
        truth,
        oracle_embeddings: oracle,
        observed_embeddings: observed,
        categories,
        item_counts,
    })
}

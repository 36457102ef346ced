//! Hierarchical navigable-small-world index over an embedding table.
//!
//! Construction follows the standard recipe: geometric layer assignment,
//! greedy descent through upper layers, a beam search of width
//! `ef_construction` at and below the insertion layer, and closest-first
//! neighbor selection. Every edge carries (raw L2 distance, variance,
//! weighted distance); fresh builds set variance 0 and weighted = raw, and
//! the reweighting pass replaces both.
//!
//! The graph is directed after budget trimming. All tie-breaks are by item
//! id ascending, and builds are bit-reproducible under a fixed seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{BinReader, BinWriter};
use crate::types::{EmbeddingTable, ItemId};

/// One directed edge with its payloads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub to: ItemId,
    /// L2 distance between the two endpoint embeddings.
    pub raw: f64,
    /// Item-pair variance written by the reweighting pass (0 until then).
    pub variance: f64,
    /// raw · min(m_cap, 1 + alpha · variance); equals raw until reweighted.
    pub weighted: f64,
}

/// Provenance of a reweight+prune pass, persisted with the index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReweightProvenance {
    pub alpha: f64,
    pub m_cap: f64,
    pub n_prime: u32,
}

type Adjacency = BTreeMap<ItemId, Vec<Edge>>;

/// Layered small-world graph plus the embeddings it indexes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredGraphIndex {
    n: usize,
    ef_construction: usize,
    seed: u64,
    max_layer: usize,
    entry_point: ItemId,
    /// Highest layer each item appears on.
    top_layer: BTreeMap<ItemId, usize>,
    /// layers[l] is the adjacency of layer l; every item with top layer ≥ l
    /// has an entry (possibly empty).
    layers: Vec<Adjacency>,
    embeddings: EmbeddingTable,
    provenance: Option<ReweightProvenance>,
    /// Config hash of the producing run (0 when built in-library).
    config_hash: u64,
}

/// L2 distance between a query vector and a stored f32 embedding, summed in
/// f64. Exposed so brute-force oracles share the exact arithmetic.
pub fn l2_distance(query: &[f64], stored: &[f32]) -> f64 {
    debug_assert_eq!(query.len(), stored.len());
    let mut acc = 0.0;
    for (q, s) in query.iter().zip(stored) {
        let d = q - *s as f64;
        acc += d * d;
    }
    acc.sqrt()
}

/// (distance, id) with a total order: distance ascending, then id.
#[derive(Debug, Clone, Copy, PartialEq)]
struct DistId(f64, ItemId);

impl Eq for DistId {}

impl PartialOrd for DistId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for DistId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Builds an index over all items of the table.
///
/// Layer of each item ~ floor(−ln(U) · m_L) with m_L = 1/ln(n); insertion
/// order is a seeded shuffle so id-correlated geometry cannot bias the
/// graph.
pub fn build_index(
    embeddings: &EmbeddingTable,
    n: usize,
    ef_construction: usize,
    seed: u64,
) -> Result<LayeredGraphIndex> {
    if n < 2 {
        return Err(Error::Config(format!("neighbor budget n must be ≥ 2, got {n}")));
    }
    if ef_construction == 0 {
        return Err(Error::Config("ef_construction must be positive".into()));
    }
    if embeddings.is_empty() {
        return Err(Error::Validation("cannot index an empty embedding table".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m_l = 1.0 / (n as f64).ln();
    let ids: Vec<ItemId> = embeddings.ids().collect();
    // Draw layers in sorted-id order, then shuffle the insertion order.
    let mut assigned: Vec<(ItemId, usize)> = ids
        .iter()
        .map(|&id| {
            let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]: ln is finite
            (id, (-u.ln() * m_l).floor() as usize)
        })
        .collect();
    use rand::seq::SliceRandom;
    assigned.shuffle(&mut rng);

    let mut index = LayeredGraphIndex {
        n,
        ef_construction,
        seed,
        max_layer: 0,
        entry_point: assigned[0].0,
        top_layer: BTreeMap::new(),
        layers: Vec::new(),
        embeddings: embeddings.clone(),
        provenance: None,
        config_hash: 0,
    };
    for &(id, layer) in &assigned {
        index.insert(id, layer);
    }
    Ok(index)
}

impl LayeredGraphIndex {
    fn register(&mut self, id: ItemId, top: usize) {
        while self.layers.len() <= top {
            self.layers.push(BTreeMap::new());
        }
        self.top_layer.insert(id, top);
        for l in 0..=top {
            self.layers[l].entry(id).or_default();
        }
    }

    fn vector(&self, id: ItemId) -> &[f32] {
        self.embeddings.get(id).expect("indexed item has embedding")
    }

    fn dist_to(&self, query: &[f64], id: ItemId) -> f64 {
        l2_distance(query, self.vector(id))
    }

    fn budget(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.n
        } else {
            self.n
        }
    }

    fn insert(&mut self, id: ItemId, layer: usize) {
        if self.top_layer.is_empty() {
            self.register(id, layer);
            self.entry_point = id;
            self.max_layer = layer;
            return;
        }
        let query: Vec<f64> = self.vector(id).iter().map(|&v| v as f64).collect();
        let old_max = self.max_layer;
        self.register(id, layer);

        let mut ep = self.entry_point;
        // Greedy descent through layers above the item's top layer.
        let mut lc = old_max;
        while lc > layer.min(old_max) {
            ep = self.greedy_step(&query, ep, lc);
            lc -= 1;
        }
        // Beam search and linking at the item's layers.
        let mut entries = vec![ep];
        for l in (0..=layer.min(old_max)).rev() {
            let found = self.search_layer(&query, &entries, self.ef_construction, l);
            let neighbors: Vec<DistId> = found.iter().take(self.n).copied().collect();
            for &DistId(d, nb) in &neighbors {
                self.link(l, id, nb, d);
                self.link(l, nb, id, d);
            }
            entries = found.iter().map(|di| di.1).collect();
        }
        if layer > old_max {
            self.entry_point = id;
            self.max_layer = layer;
        }
    }

    /// Adds the directed edge from → to, keeping the list sorted by
    /// (weighted, id) and trimmed to the layer budget.
    fn link(&mut self, layer: usize, from: ItemId, to: ItemId, raw: f64) {
        if from == to {
            return;
        }
        let budget = self.budget(layer);
        let list = self.layers[layer].get_mut(&from).expect("registered node");
        if list.iter().any(|e| e.to == to) {
            return;
        }
        let edge = Edge {
            to,
            raw,
            variance: 0.0,
            weighted: raw,
        };
        let pos = list
            .binary_search_by(|e| {
                e.weighted
                    .total_cmp(&edge.weighted)
                    .then(e.to.cmp(&edge.to))
            })
            .unwrap_err();
        list.insert(pos, edge);
        list.truncate(budget);
    }

    /// One greedy walk at `layer`: repeatedly move to the strictly closest
    /// neighbor until no improvement.
    fn greedy_step(&self, query: &[f64], mut ep: ItemId, layer: usize) -> ItemId {
        let mut best = self.dist_to(query, ep);
        loop {
            let mut improved = false;
            for edge in self.neighbors(layer, ep) {
                let d = self.dist_to(query, edge.to);
                if DistId(d, edge.to) < DistId(best, ep) {
                    best = d;
                    ep = edge.to;
                    improved = true;
                }
            }
            if !improved {
                return ep;
            }
        }
    }

    /// Best-first beam search at one layer; returns up to `ef` closest
    /// items, ascending (distance, id).
    fn search_layer(&self, query: &[f64], entries: &[ItemId], ef: usize, layer: usize) -> Vec<DistId> {
        let mut visited: BTreeSet<ItemId> = BTreeSet::new();
        let mut frontier: BinaryHeap<std::cmp::Reverse<DistId>> = BinaryHeap::new();
        let mut found: BinaryHeap<DistId> = BinaryHeap::new(); // max-heap, cap ef
        for &e in entries {
            if visited.insert(e) {
                let d = DistId(self.dist_to(query, e), e);
                frontier.push(std::cmp::Reverse(d));
                found.push(d);
            }
        }
        while found.len() > ef {
            found.pop();
        }
        while let Some(std::cmp::Reverse(current)) = frontier.pop() {
            if found.len() >= ef {
                if let Some(&worst) = found.peek() {
                    if current > worst {
                        break;
                    }
                }
            }
            for edge in self.neighbors(layer, current.1) {
                if visited.insert(edge.to) {
                    let d = DistId(self.dist_to(query, edge.to), edge.to);
                    if found.len() < ef || d < *found.peek().expect("non-empty") {
                        frontier.push(std::cmp::Reverse(d));
                        found.push(d);
                        if found.len() > ef {
                            found.pop();
                        }
                    }
                }
            }
        }
        let mut out = found.into_vec();
        out.sort();
        out
    }

    /// k nearest stored items to `query`, ascending (distance, id).
    pub fn knn_search(&self, query: &[f64], k: usize, ef_search: usize) -> Result<Vec<(ItemId, f64)>> {
        if self.top_layer.is_empty() {
            return Ok(Vec::new());
        }
        if ef_search < k {
            return Err(Error::Config(format!(
                "ef_search {ef_search} must be ≥ k {k}"
            )));
        }
        if query.len() != self.embeddings.dim() {
            return Err(Error::Validation(format!(
                "query dim {} does not match index dim {}",
                query.len(),
                self.embeddings.dim()
            )));
        }
        let mut ep = self.entry_point;
        for layer in (1..=self.max_layer).rev() {
            ep = self.greedy_step(query, ep, layer);
        }
        let found = self.search_layer(query, &[ep], ef_search.max(1), 0);
        Ok(found
            .into_iter()
            .take(k)
            .map(|DistId(d, id)| (id, d))
            .collect())
    }

    pub fn neighbors(&self, layer: usize, item: ItemId) -> &[Edge] {
        self.layers
            .get(layer)
            .and_then(|adj| adj.get(&item))
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn contains_at_layer(&self, layer: usize, item: ItemId) -> bool {
        self.layers
            .get(layer)
            .map(|adj| adj.contains_key(&item))
            .unwrap_or(false)
    }

    pub fn items_at_layer(&self, layer: usize) -> impl Iterator<Item = ItemId> + '_ {
        self.layers
            .get(layer)
            .into_iter()
            .flat_map(|adj| adj.keys().copied())
    }

    pub fn entry_point(&self) -> ItemId {
        self.entry_point
    }

    pub fn max_layer(&self) -> usize {
        self.max_layer
    }

    pub fn num_items(&self) -> usize {
        self.top_layer.len()
    }

    pub fn build_n(&self) -> usize {
        self.n
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.embeddings
    }

    pub fn provenance(&self) -> Option<&ReweightProvenance> {
        self.provenance.as_ref()
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    pub fn set_config_hash(&mut self, hash: u64) {
        self.config_hash = hash;
    }

    pub(crate) fn set_provenance(&mut self, p: ReweightProvenance) {
        self.provenance = Some(p);
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Adjacency] {
        &mut self.layers
    }

    /// Largest absolute deviation between stored raw distances and distances
    /// recomputed from the embeddings.
    pub fn audit_distances(&self) -> f64 {
        let mut max_dev: f64 = 0.0;
        for adj in &self.layers {
            for (&from, edges) in adj {
                let q: Vec<f64> = self.vector(from).iter().map(|&v| v as f64).collect();
                for e in edges {
                    let expect = self.dist_to(&q, e.to);
                    max_dev = max_dev.max((expect - e.raw).abs());
                }
            }
        }
        max_dev
    }

    /// Checks structural invariants: every referenced id exists at its
    /// layer, membership is downward-closed, budgets hold, payloads are
    /// non-negative.
    pub fn audit_structure(&self) -> Result<()> {
        for (&id, &top) in &self.top_layer {
            for l in 0..=top {
                if !self.contains_at_layer(l, id) {
                    return Err(Error::Validation(format!(
                        "item {id} has top layer {top} but is missing at layer {l}"
                    )));
                }
            }
        }
        for (l, adj) in self.layers.iter().enumerate() {
            for (&from, edges) in adj {
                if self.top_layer.get(&from).copied().unwrap_or(0) < l {
                    return Err(Error::Validation(format!(
                        "item {from} appears above its top layer at {l}"
                    )));
                }
                if edges.len() > self.budget(l) {
                    return Err(Error::Validation(format!(
                        "item {from} exceeds the layer-{l} budget: {}",
                        edges.len()
                    )));
                }
                for e in edges {
                    if !self.contains_at_layer(l, e.to) {
                        return Err(Error::Validation(format!(
                            "edge {from}→{} references an item absent from layer {l}",
                            e.to
                        )));
                    }
                    if e.weighted < 0.0 || e.raw < 0.0 || e.variance < 0.0 {
                        return Err(Error::Validation(format!(
                            "edge {from}→{} carries a negative payload",
                            e.to
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Fraction of items reachable from the entry point over directed
    /// layer-`layer` edges.
    pub fn reachable_fraction(&self, layer: usize) -> f64 {
        let total = self.layers.get(layer).map(|a| a.len()).unwrap_or(0);
        if total == 0 {
            return 1.0;
        }
        let mut seen = BTreeSet::new();
        let mut stack = vec![self.entry_point];
        seen.insert(self.entry_point);
        while let Some(cur) = stack.pop() {
            for e in self.neighbors(layer, cur) {
                if seen.insert(e.to) {
                    stack.push(e.to);
                }
            }
        }
        seen.len() as f64 / total as f64
    }

}

const UHNW_MAGIC: &[u8; 4] = b"UHNW";
const UHNW_VERSION: u32 = 1;

/// Writes the graph structure and edge payloads (f32) with a trailing CRC32.
/// Embeddings are not duplicated into the index file; they live in the
/// embedding artifact the index was built from.
pub fn save_index(index: &LayeredGraphIndex, path: &Path) -> Result<()> {
    let mut w = BinWriter::create(path)?;
    w.bytes(UHNW_MAGIC)?;
    w.u32(UHNW_VERSION)?;
    w.u32(index.embeddings.dim() as u32)?;
    w.u64(index.top_layer.len() as u64)?;
    w.u32(index.n as u32)?;
    w.u32(index.ef_construction as u32)?;
    w.u64(index.seed)?;
    w.u32(index.max_layer as u32)?;
    w.u64(index.entry_point.0)?;
    match &index.provenance {
        Some(p) => {
            w.bytes(&[1])?;
            w.f64(p.alpha)?;
            w.f64(p.m_cap)?;
            w.u32(p.n_prime)?;
        }
        None => w.bytes(&[0])?,
    }
    w.u64(index.config_hash)?;
    // Layer table: item → top layer, id ascending.
    for (&id, &top) in &index.top_layer {
        w.u64(id.0)?;
        w.u32(top as u32)?;
    }
    // Adjacency blocks, layer-major, node id ascending.
    for adj in &index.layers {
        w.u64(adj.len() as u64)?;
        for (&id, edges) in adj {
            w.u64(id.0)?;
            w.u32(edges.len() as u32)?;
            for e in edges {
                w.u64(e.to.0)?;
                w.f32(e.raw as f32)?;
                w.f32(e.variance as f32)?;
                w.f32(e.weighted as f32)?;
            }
        }
    }
    let crc = w.crc();
    w.u32(crc)?;
    w.flush()
}

/// Loads an index file and attaches the embeddings it was built over. The
/// trailing CRC32 is verified before any parsing; the embedding table must
/// cover exactly the indexed ids at the declared dimension.
pub fn load_index(path: &Path, embeddings: &EmbeddingTable) -> Result<LayeredGraphIndex> {
    let mut r = BinReader::open(path)?;
    verify_crc(&r, path)?;
    r.expect_magic(UHNW_MAGIC)?;
    let version = r.u32()?;
    if version != UHNW_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported index file version {version}",
            path.display()
        )));
    }
    let dim = r.u32()? as usize;
    let count = r.u64()? as usize;
    let n = r.u32()? as usize;
    let ef_construction = r.u32()? as usize;
    let seed = r.u64()?;
    let max_layer = r.u32()? as usize;
    let entry_point = ItemId(r.u64()?);
    let mut flag = [0u8; 1];
    r.bytes(&mut flag)?;
    let provenance = if flag[0] == 1 {
        Some(ReweightProvenance {
            alpha: r.f64()?,
            m_cap: r.f64()?,
            n_prime: r.u32()?,
        })
    } else {
        None
    };
    let config_hash = r.u64()?;
    if embeddings.dim() != dim {
        return Err(Error::Validation(format!(
            "embedding table dim {} does not match index dim {dim}",
            embeddings.dim()
        )));
    }
    let mut top_layer = BTreeMap::new();
    for _ in 0..count {
        let id = ItemId(r.u64()?);
        let top = r.u32()? as usize;
        if embeddings.get(id).is_none() {
            return Err(Error::Validation(format!(
                "index references item {id} absent from the embedding table"
            )));
        }
        top_layer.insert(id, top);
    }
    if embeddings.len() != count {
        return Err(Error::Validation(format!(
            "embedding table has {} items, index has {count}",
            embeddings.len()
        )));
    }
    let mut layers = Vec::with_capacity(max_layer + 1);
    for _ in 0..=max_layer {
        let nodes = r.u64()? as usize;
        let mut adj: Adjacency = BTreeMap::new();
        for _ in 0..nodes {
            let id = ItemId(r.u64()?);
            let degree = r.u32()? as usize;
            let mut edges = Vec::with_capacity(degree);
            for _ in 0..degree {
                edges.push(Edge {
                    to: ItemId(r.u64()?),
                    raw: r.f32()? as f64,
                    variance: r.f32()? as f64,
                    weighted: r.f32()? as f64,
                });
            }
            adj.insert(id, edges);
        }
        layers.push(adj);
    }
    // Only the CRC should remain.
    if r.remaining()? != 4 {
        return Err(Error::Corruption(format!(
            "{}: malformed adjacency section",
            path.display()
        )));
    }
    let index = LayeredGraphIndex {
        n,
        ef_construction,
        seed,
        max_layer,
        entry_point,
        top_layer,
        layers,
        embeddings: embeddings.clone(),
        provenance,
        config_hash,
    };
    index.audit_structure()?;
    Ok(index)
}

fn verify_crc(r: &BinReader, path: &Path) -> Result<()> {
    let total = r.remaining()?;
    if total < 4 {
        return Err(Error::Corruption(format!(
            "{}: too short for a checksummed index file",
            path.display()
        )));
    }
    let body = r.peek_all();
    let stored = u32::from_le_bytes(body[total - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&body[..total - 4]);
    if stored != computed {
        return Err(Error::Corruption(format!(
            "{}: CRC32 mismatch (stored {stored:08x}, computed {computed:08x})",
            path.display()
        )));
    }
    Ok(())
}

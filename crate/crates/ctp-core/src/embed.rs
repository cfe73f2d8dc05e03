//! Self-supervised node embeddings for centroid collection: a two-layer
//! GraphSAGE encoder over the full graph trained with a random-walk
//! skip-gram objective and degree-based negative sampling. This is a
//! preprocessing step; its output table can be cached to disk keyed by
//! (graph hash, config hash).

use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, RandomWalk};
use crate::tensor::checkpoint::{self, EMBEDDING_MAGIC};
use crate::tensor::layers::{sage_layer, xavier_uniform};
use crate::tensor::{
    adam_step, AdamHyper, AdamState, BoundParams, ParamSet, Real, Tape, Tensor, Topology, Var,
};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    /// Embedding dimension (matches the prompt model's `d`).
    pub d: usize,
    pub walks_per_node: usize,
    pub walk_length: usize,
    pub window: usize,
    /// Negative samples per positive pair (Q).
    pub negatives: usize,
    /// Negative distribution exponent: P_n(v) proportional to deg(v)^pn_power.
    pub pn_power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            d: 64,
            walks_per_node: 5,
            walk_length: 8,
            window: 2,
            negatives: 5,
            pn_power: 0.75,
            epochs: 5,
            batch_size: 2048,
            lr: 3e-3,
            weight_decay: 0.0,
        }
    }
}

impl EmbedConfig {
    pub fn hash_hex(&self) -> String {
        checkpoint::sha256_hex_bytes(serde_json::to_string(self).unwrap().as_bytes())
    }
}

/// One skip-gram training example: a center node, a co-occurring
/// positive, and Q negatives.
#[derive(Clone, Debug)]
pub struct PairEntry {
    pub u: NodeId,
    pub v: NodeId,
    pub negatives: Vec<NodeId>,
}

#[derive(Clone, Debug, Default)]
pub struct PairBatch {
    pub entries: Vec<PairEntry>,
}

/// Per-node embedding table with provenance.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub values: Tensor<f32>,
    pub graph_hash: String,
    pub config_hash: String,
}

impl EmbeddingTable {
    pub fn d(&self) -> usize {
        self.values.cols()
    }

    pub fn node_count(&self) -> usize {
        self.values.rows()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "topology": Topology { d_in: 0, d: self.d(), prompt_etypes: 0, heads: 0 },
            "graph_hash": self.graph_hash,
            "config_hash": self.config_hash,
        });
        let mut ps: ParamSet<f32> = ParamSet::new(Topology {
            d_in: 0,
            d: self.d(),
            prompt_etypes: 0,
            heads: 0,
        });
        ps.insert("embeddings", self.values.clone());
        let bytes = checkpoint::encode(&EMBEDDING_MAGIC, &meta.to_string(), &ps);
        std::fs::write(path, bytes).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<EmbeddingTable> {
        let (_, config_json, tensors) = checkpoint::decode_file(path, &EMBEDDING_MAGIC)?;
        let meta: serde_json::Value = serde_json::from_str(&config_json)
            .map_err(|e| Error::Checkpoint(format!("bad embedding metadata: {e}")))?;
        let values = tensors
            .into_iter()
            .find(|(n, _)| n == "embeddings")
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint("embedding table missing".to_string()))?;
        Ok(EmbeddingTable {
            values,
            graph_hash: meta["graph_hash"].as_str().unwrap_or_default().to_string(),
            config_hash: meta["config_hash"].as_str().unwrap_or_default().to_string(),
        })
    }
}

/// Enumerate ordered co-occurrences within `window` positions along
/// each walk, shuffle, chunk into batches of `batch_size`, and attach
/// `q` negatives per pair drawn from P_n(v) ~ deg(v)^pn_power
/// (deg^0 := 1, so pn_power = 0 is uniform over all nodes).
pub fn build_pair_batches(
    g: &Graph,
    walks: &[RandomWalk],
    window: usize,
    q: usize,
    pn_power: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<PairBatch>> {
    if walks.is_empty() {
        return Err(Error::Sampling("no walks to build pairs from".to_string()));
    }
    if window == 0 || q == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument(
            "window, negatives, and batch size must be >= 1".to_string(),
        ));
    }
    let mut pairs: Vec<(NodeId, NodeId)> = Vec::new();
    for walk in walks {
        let len = walk.nodes.len();
        for i in 0..len {
            let lo = i.saturating_sub(window);
            let hi = (i + window).min(len - 1);
            for j in lo..=hi {
                if j != i {
                    pairs.push((walk.nodes[i], walk.nodes[j]));
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);

    let weights: Vec<f64> = (0..g.node_count())
        .map(|n| (g.degree(n as NodeId) as f64).powf(pn_power))
        .collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::Sampling(format!("negative distribution: {e}")))?;

    let mut batches = Vec::new();
    for chunk in pairs.chunks(batch_size) {
        let entries = chunk
            .iter()
            .map(|&(u, v)| PairEntry {
                u,
                v,
                negatives: (0..q).map(|_| dist.sample(&mut rng) as NodeId).collect(),
            })
            .collect();
        batches.push(PairBatch { entries });
    }
    Ok(batches)
}

/// Skip-gram loss with negative sampling, averaged over batch entries:
/// `-log sigma(h_u . h_v) - Q * mean_n log sigma(-h_u . h_n)` per entry.
pub fn skipgram_loss<'t, T: Real>(emb: Var<'t, T>, batch: &PairBatch) -> Result<Var<'t, T>> {
    if batch.entries.is_empty() {
        return Err(Error::Sampling("empty pair batch".to_string()));
    }
    let q = batch.entries[0].negatives.len();
    let us: Vec<usize> = batch.entries.iter().map(|e| e.u as usize).collect();
    let vs: Vec<usize> = batch.entries.iter().map(|e| e.v as usize).collect();
    let mut us_rep = Vec::with_capacity(us.len() * q);
    let mut negs = Vec::with_capacity(us.len() * q);
    for e in &batch.entries {
        debug_assert_eq!(e.negatives.len(), q);
        for &n in &e.negatives {
            us_rep.push(e.u as usize);
            negs.push(n as usize);
        }
    }

    let u = emb.gather_rows(&us)?;
    let v = emb.gather_rows(&vs)?;
    let pos = u.mul(v)?.row_sums()?;
    let pos_term = pos.log_sigmoid()?.mean_all()?;

    let ur = emb.gather_rows(&us_rep)?;
    let n = emb.gather_rows(&negs)?;
    let neg_dots = ur.mul(n)?.row_sums()?.scale(-T::ONE)?;
    let neg_term = neg_dots.log_sigmoid()?.mean_all()?.scale(T::from_f64(q as f64))?;

    pos_term.add(neg_term)?.scale(-T::ONE)
}

pub struct PretrainResult {
    pub table: EmbeddingTable,
    /// Loss per optimization step, for diagnostics.
    pub losses: Vec<f64>,
    /// Set when the 10-step moving average fails to decrease over the
    /// first 50 steps.
    pub divergence_flag: bool,
}

fn embedder_params(d_in: usize, d: usize, seed: u64) -> ParamSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topo = Topology {
        d_in,
        d,
        prompt_etypes: 0,
        heads: 0,
    };
    let mut ps = ParamSet::new(topo);
    ps.insert("pre_gnn.l1.w_self", xavier_uniform(d_in, d, &mut rng));
    ps.insert("pre_gnn.l1.w_neigh", xavier_uniform(d_in, d, &mut rng));
    ps.insert("pre_gnn.l2.w_self", xavier_uniform(d, d, &mut rng));
    ps.insert("pre_gnn.l2.w_neigh", xavier_uniform(d, d, &mut rng));
    ps
}

// Every layer output is unit-normalized per row, GraphSAGE convention.
// Removing the scale direction from the loss keeps the skip-gram's
// negative pressure from shrinking the relu stack into the zero state.
fn forward_embeddings<'t>(
    tape: &'t Tape<f32>,
    g: &Graph,
    agg_edges: &[(usize, usize)],
    bound: &BoundParams<'t, f32>,
) -> Result<Var<'t, f32>> {
    let feats = tape.constant(g.features().clone());
    let n = g.node_count();
    let h1 = sage_layer(
        feats,
        agg_edges,
        n,
        bound.get("pre_gnn.l1.w_self")?,
        bound.get("pre_gnn.l1.w_neigh")?,
    )?
    .l2_normalize_rows()?;
    sage_layer(
        h1,
        agg_edges,
        n,
        bound.get("pre_gnn.l2.w_self")?,
        bound.get("pre_gnn.l2.w_neigh")?,
    )?
    .l2_normalize_rows()
}

fn undirected_pairs(g: &Graph) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(g.edges().len() * 2);
    for e in g.edges() {
        out.push((e.src as usize, e.dst as usize));
        out.push((e.dst as usize, e.src as usize));
    }
    out
}

/// Train the embedder and return the per-node table. Deterministic in
/// `seed`; `epochs = 0` returns the untrained forward pass.
pub fn pretrain(g: &Graph, cfg: &EmbedConfig, seed: u64) -> Result<PretrainResult> {
    if g.node_count() == 0 {
        return Err(Error::InvalidGraph("empty graph".to_string()));
    }
    let mut params = embedder_params(g.feature_dim(), cfg.d, mix(seed, 0));
    let agg_edges = undirected_pairs(g);
    let walks = crate::graph::sample_walks(g, cfg.walks_per_node, cfg.walk_length, mix(seed, 1))?;

    let mut state = AdamState::new(AdamHyper {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamHyper::default()
    });
    let mut losses = Vec::new();

    for epoch in 0..cfg.epochs {
        if walks.is_empty() {
            break; // graph with no edges: nothing to contrast, keep init
        }
        let batches = build_pair_batches(
            g,
            &walks,
            cfg.window,
            cfg.negatives,
            cfg.pn_power,
            cfg.batch_size,
            mix(seed, 2 + epoch as u64),
        )?;
        for batch in &batches {
            let tape = Tape::new();
            let bound = BoundParams::bind(&tape, &params);
            let emb = forward_embeddings(&tape, g, &agg_edges, &bound)?;
            let loss = skipgram_loss(emb, batch)?;
            losses.push(loss.value().item() as f64);
            tape.backward(loss)?;
            adam_step(&mut params, &bound.grads(&tape), &mut state)?;
        }
    }

    let tape = Tape::inference();
    let bound = BoundParams::bind(&tape, &params);
    let emb = forward_embeddings(&tape, g, &agg_edges, &bound)?;
    let table = EmbeddingTable {
        values: emb.value(),
        graph_hash: g.hash_hex(),
        config_hash: cfg.hash_hex(),
    };
    let divergence_flag = !moving_average_decreases(&losses, 10, 50);
    Ok(PretrainResult {
        table,
        losses,
        divergence_flag,
    })
}

fn moving_average_decreases(losses: &[f64], win: usize, horizon: usize) -> bool {
    let n = losses.len().min(horizon);
    if n < 2 * win {
        return true; // too short to judge
    }
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let mut prev = avg(&losses[0..win]);
    let mut i = win;
    while i + win <= n {
        let cur = avg(&losses[i..i + win]);
        if cur > prev {
            return false;
        }
        prev = cur;
        i += win;
    }
    true
}

fn mix(seed: u64, tag: u64) -> u64 {
    crate::graph::mix_seed(seed, &[tag])
}

/// Cache-aware wrapper around [`pretrain`]: when `cache_dir` is given,
/// a table whose (graph hash, config hash) matches is loaded instead of
/// recomputed, and fresh tables are written back.
pub fn pretrain_cached(
    g: &Graph,
    cfg: &EmbedConfig,
    seed: u64,
    cache_dir: Option<&Path>,
) -> Result<EmbeddingTable> {
    let graph_hash = g.hash_hex();
    let config_hash = cfg.hash_hex();
    let key = checkpoint::sha256_hex_bytes(
        format!("{graph_hash}:{config_hash}:{seed}").as_bytes(),
    );
    let cache_path = cache_dir.map(|d| d.join(format!("emb-{}.ctpe", &key[..16])));
    if let Some(path) = &cache_path {
        if path.exists() {
            let table = EmbeddingTable::load(path)?;
            if table.graph_hash == graph_hash && table.config_hash == config_hash {
                return Ok(table);
            }
        }
    }
    let result = pretrain(g, cfg, seed)?;
    if let Some(path) = &cache_path {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.display().to_string(),
                source: e,
            })?;
        }
        result.table.save(path)?;
    }
    Ok(result.table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gen_planted_partition, sample_walks};

    #[test]
    fn window_one_enumerates_ordered_cooccurrences() {
        let g = gen_planted_partition(2, 2, 0.9, 0.1, 2, 1.0, 1).unwrap();
        let walk = RandomWalk { nodes: vec![0, 1, 2] };
        let batches = build_pair_batches(&g, &[walk], 1, 1, 0.75, 100, 7).unwrap();
        let mut pairs: Vec<(u32, u32)> = batches[0].entries.iter().map(|e| (e.u, e.v)).collect();
        pairs.sort_unstable();
        assert_eq!(pairs, vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
    }

    #[test]
    fn every_entry_carries_q_negatives() {
        let g = gen_planted_partition(2, 10, 0.5, 0.1, 2, 1.0, 1).unwrap();
        let walks = sample_walks(&g, 1, 5, 3).unwrap();
        let batches = build_pair_batches(&g, &walks, 2, 3, 0.75, 64, 7).unwrap();
        for b in &batches {
            assert!(b.entries.iter().all(|e| e.negatives.len() == 3));
        }
    }

    #[test]
    fn empty_walk_list_is_an_error() {
        let g = gen_planted_partition(2, 2, 0.9, 0.1, 2, 1.0, 1).unwrap();
        assert!(build_pair_batches(&g, &[], 1, 1, 0.75, 10, 1).is_err());
    }

    #[test]
    fn zero_power_negatives_are_uniform() {
        // Chi-square-style check: each node's frequency over 1e5 draws
        // within 3 sigma of the multinomial expectation.
        let g = gen_planted_partition(2, 25, 0.3, 0.05, 2, 1.0, 2).unwrap();
        let n = g.node_count();
        let walk = RandomWalk { nodes: vec![0, 1] };
        let total_entries = 50_000usize; // 2 negatives each -> 1e5 draws
        let walks: Vec<RandomWalk> = (0..total_entries / 2).map(|_| walk.clone()).collect();
        let batches = build_pair_batches(&g, &walks, 1, 2, 0.0, 10_000, 3).unwrap();
        let mut counts = vec![0usize; n];
        let mut draws = 0usize;
        for b in &batches {
            for e in &b.entries {
                for &neg in &e.negatives {
                    counts[neg as usize] += 1;
                    draws += 1;
                }
            }
        }
        assert!(draws >= 100_000);
        let p = 1.0 / n as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        let expected = draws as f64 * p;
        for (node, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expected).abs() <= 3.0 * sigma,
                "node {node}: {c} vs {expected:.1} (sigma {sigma:.1})"
            );
        }
    }

    #[test]
    fn skipgram_zero_embeddings_is_two_ln_two() {
        let tape: Tape<f64> = Tape::new();
        let emb = tape.constant(Tensor::zeros(4, 8));
        let batch = PairBatch {
            entries: vec![PairEntry { u: 0, v: 1, negatives: vec![2] }],
        };
        let loss = skipgram_loss(emb, &batch).unwrap().value().item();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn skipgram_saturates_to_zero() {
        // Strongly aligned positive, strongly separated negative.
        let tape: Tape<f64> = Tape::new();
        let emb = tape.constant(Tensor::new(
            3,
            2,
            vec![30.0, 0.0, 30.0, 0.0, -30.0, 0.0],
        ));
        let batch = PairBatch {
            entries: vec![PairEntry { u: 0, v: 1, negatives: vec![2] }],
        };
        let loss = skipgram_loss(emb, &batch).unwrap().value().item();
        assert!(loss.abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn skipgram_is_nonnegative() {
        let tape: Tape<f64> = Tape::new();
        let emb = tape.constant(Tensor::new(
            3,
            2,
            vec![0.3, -0.7, 1.2, 0.4, -0.9, 0.2],
        ));
        let batch = PairBatch {
            entries: vec![
                PairEntry { u: 0, v: 1, negatives: vec![2, 1] },
                PairEntry { u: 2, v: 0, negatives: vec![1, 1] },
            ],
        };
        let loss = skipgram_loss(emb, &batch).unwrap().value().item();
        assert!(loss >= 0.0);
    }

    #[test]
    fn pretrain_zero_epochs_is_untrained_forward_and_deterministic() {
        let g = gen_planted_partition(2, 10, 0.4, 0.05, 4, 1.0, 3).unwrap();
        let cfg = EmbedConfig {
            d: 8,
            epochs: 0,
            ..EmbedConfig::default()
        };
        let r1 = pretrain(&g, &cfg, 11).unwrap();
        let r2 = pretrain(&g, &cfg, 11).unwrap();
        assert_eq!(r1.table.values, r2.table.values);
        assert!(r1.losses.is_empty());
    }

    #[test]
    fn pretrain_separates_communities() {
        let g = gen_planted_partition(4, 50, 0.2, 0.02, 16, 1.0, 7).unwrap();
        // Q=1: with only 4 communities, larger Q makes same-community
        // negatives frequent enough that the degenerate zero embedding
        // becomes optimal.
        let cfg = EmbedConfig {
            d: 16,
            epochs: 10,
            batch_size: 1024,
            negatives: 1,
            ..EmbedConfig::default()
        };
        let result = pretrain(&g, &cfg, 5).unwrap();
        let t = &result.table.values;
        let cos = |a: &[f32], b: &[f32]| {
            let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
            let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot / (na * nb)
            }
        };
        let mut intra = (0.0f64, 0usize);
        let mut inter = (0.0f64, 0usize);
        let per = 50usize;
        for i in (0..200).step_by(7) {
            for j in (i + 1..200).step_by(5) {
                let c = cos(t.row(i), t.row(j)) as f64;
                if i / per == j / per {
                    intra = (intra.0 + c, intra.1 + 1);
                } else {
                    inter = (inter.0 + c, inter.1 + 1);
                }
            }
        }
        let intra_mean = intra.0 / intra.1 as f64;
        let inter_mean = inter.0 / inter.1 as f64;
        assert!(
            intra_mean > inter_mean,
            "intra {intra_mean:.4} <= inter {inter_mean:.4}"
        );
    }

    #[test]
    fn pretrain_loss_moving_average_decreases() {
        let g = gen_planted_partition(3, 40, 0.2, 0.03, 8, 1.0, 9).unwrap();
        let cfg = EmbedConfig {
            d: 16,
            epochs: 4,
            batch_size: 512,
            ..EmbedConfig::default()
        };
        let result = pretrain(&g, &cfg, 2).unwrap();
        assert!(result.losses.len() >= 20);
        assert!(
            !result.divergence_flag,
            "first losses {:?}",
            &result.losses[..result.losses.len().min(50)]
        );
        assert!(result.table.values.all_finite());
    }

    #[test]
    fn cache_roundtrip_and_reuse() {
        let g = gen_planted_partition(2, 8, 0.5, 0.1, 4, 1.0, 1).unwrap();
        let cfg = EmbedConfig {
            d: 8,
            epochs: 1,
            batch_size: 256,
            ..EmbedConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let t1 = pretrain_cached(&g, &cfg, 3, Some(dir.path())).unwrap();
        let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 1);
        let t2 = pretrain_cached(&g, &cfg, 3, Some(dir.path())).unwrap();
        assert_eq!(t1.values, t2.values);
        assert_eq!(t1.graph_hash, g.hash_hex());
    }
}

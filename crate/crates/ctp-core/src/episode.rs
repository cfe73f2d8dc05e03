//! Centroid collection and m-way episode assembly, in pseudo-label mode
//! (pretraining, label = centroid identity) and true-label mode
//! (downstream evaluation).

#![allow(clippy::needless_range_loop)]

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{khop_subgraph, mix_seed, ClassId, Graph, NodeId, Subgraph};
use crate::tensor::Tensor;

/// Retries before an undersized centroid neighborhood falls back to
/// sampling with replacement (which flags the episode as degenerate).
pub const CENTROID_RETRIES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Node,
    Link,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Pseudo,
    True,
}

/// A node (node classification) or an endpoint pair (link tasks).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum EpisodeInput {
    Node(NodeId),
    Pair(NodeId, NodeId),
}

impl EpisodeInput {
    pub fn nodes(&self) -> Vec<NodeId> {
        match *self {
            EpisodeInput::Node(n) => vec![n],
            EpisodeInput::Pair(a, b) => vec![a, b],
        }
    }
}

/// One m-way episode. `support` and `queries` are slot-major: the
/// first `shots` support entries belong to `classes[0]`, and so on.
#[derive(Clone, Debug, serde::Serialize)]
pub struct Episode {
    pub task_kind: TaskKind,
    pub label_mode: LabelMode,
    pub classes: Vec<ClassId>,
    pub support: Vec<EpisodeInput>,
    pub queries: Vec<EpisodeInput>,
    pub shots: usize,
    pub queries_per_class: usize,
    /// Set when the with-replacement fallback fired; tests treat this
    /// as a failure unless explicitly allowed.
    pub degenerate: bool,
    pub seed: u64,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.classes.len()
    }

    /// Class slot (0..m) of each support entry, slot-major.
    pub fn support_slots(&self) -> Vec<usize> {
        (0..self.ways())
            .flat_map(|c| std::iter::repeat_n(c, self.shots))
            .collect()
    }

    pub fn query_slots(&self) -> Vec<usize> {
        (0..self.ways())
            .flat_map(|c| std::iter::repeat_n(c, self.queries_per_class))
            .collect()
    }

    fn check_balance(&self) -> Result<()> {
        if self.support.len() != self.shots * self.ways()
            || self.queries.len() != self.queries_per_class * self.ways()
        {
            return Err(Error::Sampling(format!(
                "unbalanced episode: {} support, {} queries for {} ways",
                self.support.len(),
                self.queries.len(),
                self.ways()
            )));
        }
        Ok(())
    }
}

/// Representative centroid set: k-means cluster representatives plus a
/// uniform random supplement.
#[derive(Clone, Debug)]
pub struct CentroidSet {
    pub nodes: Vec<NodeId>,
    pub from_cluster: Vec<bool>,
    pub alpha: f64,
    pub k: usize,
}

impl CentroidSet {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Seeded permutation of the set; done once before partitioning
    /// into per-batch pools.
    pub fn shuffled(&self, seed: u64) -> CentroidSet {
        let mut idx: Vec<usize> = (0..self.nodes.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        CentroidSet {
            nodes: idx.iter().map(|&i| self.nodes[i]).collect(),
            from_cluster: idx.iter().map(|&i| self.from_cluster[i]).collect(),
            alpha: self.alpha,
            k: self.k,
        }
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct KmeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig {
            restarts: 8,
            max_iter: 50,
            tol: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KmeansResult {
    pub assignments: Vec<usize>,
    pub means: Vec<Vec<f64>>,
    pub sse: f64,
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding, best of `restarts` by SSE.
/// Empty clusters are re-seeded to the point farthest from its current
/// center.
pub fn kmeans(points: &Tensor<f32>, k: usize, cfg: &KmeansConfig, seed: u64) -> Result<KmeansResult> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".to_string()));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs at least k={k} points, got {n}"
        )));
    }
    let data: Vec<Vec<f64>> = (0..n)
        .map(|i| points.row(i).iter().map(|&v| v as f64).collect())
        .collect();

    let mut best: Option<KmeansResult> = None;
    for restart in 0..cfg.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[restart as u64]));
        let mut means = plus_plus_init(&data, k, &mut rng);
        let mut assignments = vec![0usize; n];
        for _ in 0..cfg.max_iter {
            for (i, p) in data.iter().enumerate() {
                assignments[i] = nearest_mean(p, &means).0;
            }
            let mut counts = vec![0usize; k];
            let d = data[0].len();
            let mut sums = vec![vec![0.0f64; d]; k];
            for (i, p) in data.iter().enumerate() {
                counts[assignments[i]] += 1;
                for (s, &v) in sums[assignments[i]].iter_mut().zip(p) {
                    *s += v;
                }
            }
            let mut shift: f64 = 0.0;
            for c in 0..k {
                if counts[c] == 0 {
                    // farthest point from its own center takes over
                    let far = (0..n)
                        .max_by(|&a, &b| {
                            let da = dist_sq(&data[a], &means[assignments[a]]);
                            let db = dist_sq(&data[b], &means[assignments[b]]);
                            da.partial_cmp(&db).unwrap()
                        })
                        .unwrap();
                    shift = shift.max(dist_sq(&means[c], &data[far]).sqrt());
                    means[c] = data[far].clone();
                    assignments[far] = c;
                } else {
                    let new_mean: Vec<f64> =
                        sums[c].iter().map(|s| s / counts[c] as f64).collect();
                    shift = shift.max(dist_sq(&means[c], &new_mean).sqrt());
                    means[c] = new_mean;
                }
            }
            if shift < cfg.tol {
                break;
            }
        }
        for (i, p) in data.iter().enumerate() {
            assignments[i] = nearest_mean(p, &means).0;
        }
        let sse: f64 = data
            .iter()
            .enumerate()
            .map(|(i, p)| dist_sq(p, &means[assignments[i]]))
            .sum();
        if best.as_ref().is_none_or(|b| sse < b.sse) {
            best = Some(KmeansResult {
                assignments: assignments.clone(),
                means,
                sse,
            });
        }
    }
    Ok(best.unwrap())
}

fn nearest_mean(p: &[f64], means: &[Vec<f64>]) -> (usize, f64) {
    let mut bi = 0;
    let mut bd = f64::INFINITY;
    for (i, m) in means.iter().enumerate() {
        let d = dist_sq(p, m);
        if d < bd {
            bd = d;
            bi = i;
        }
    }
    (bi, bd)
}

fn plus_plus_init(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut means = Vec::with_capacity(k);
    means.push(data[rng.gen_range(0..n)].clone());
    while means.len() < k {
        let d2: Vec<f64> = data.iter().map(|p| nearest_mean(p, &means).1).collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        means.push(data[next].clone());
    }
    means
}

/// Collect `total` centroids: `floor(alpha * total)` k-means cluster
/// representatives (the member nearest each cluster mean), the rest
/// uniform without replacement from the remaining nodes.
pub fn collect_centroids(
    emb: &Tensor<f32>,
    total: usize,
    alpha: f64,
    kmeans_cfg: &KmeansConfig,
    seed: u64,
) -> Result<CentroidSet> {
    let n = emb.rows();
    if total > n {
        return Err(Error::Sampling(format!(
            "cannot collect {total} centroids from {n} nodes"
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must be in [0,1], got {alpha}")));
    }
    let k = (alpha * total as f64).floor() as usize;
    let mut nodes: Vec<NodeId> = Vec::with_capacity(total);
    let mut chosen = vec![false; n];

    if k > 0 {
        let km = kmeans(emb, k, kmeans_cfg, mix_seed(seed, &[1]))?;
        for c in 0..k {
            // Nearest member of the cluster; next-nearest if somehow
            // already taken.
            let mut members: Vec<usize> = (0..n).filter(|&i| km.assignments[i] == c).collect();
            members.sort_by(|&a, &b| {
                let da = dist_sq(
                    &emb.row(a).iter().map(|&v| v as f64).collect::<Vec<_>>(),
                    &km.means[c],
                );
                let db = dist_sq(
                    &emb.row(b).iter().map(|&v| v as f64).collect::<Vec<_>>(),
                    &km.means[c],
                );
                da.partial_cmp(&db).unwrap()
            });
            let pick = members.iter().find(|&&i| !chosen[i]).copied().ok_or_else(|| {
                Error::Sampling(format!("cluster {c} has no unchosen member"))
            })?;
            chosen[pick] = true;
            nodes.push(pick as NodeId);
        }
    }

    let remaining: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
    let need = total - nodes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[2]));
    let picks = rand::seq::index::sample(&mut rng, remaining.len(), need);
    let mut extra: Vec<usize> = picks.iter().map(|i| remaining[i]).collect();
    extra.sort_unstable();
    for i in extra {
        nodes.push(i as NodeId);
    }

    let mut from_cluster = vec![true; k];
    from_cluster.extend(std::iter::repeat_n(false, total - k));
    Ok(CentroidSet {
        nodes,
        from_cluster,
        alpha,
        k,
    })
}

/// Uniform random centroid set (the clustering-off ablation path).
pub fn collect_centroids_random(
    node_count: usize,
    total: usize,
    seed: u64,
) -> Result<CentroidSet> {
    if total > node_count {
        return Err(Error::Sampling(format!(
            "cannot collect {total} centroids from {node_count} nodes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[3]));
    let picks = rand::seq::index::sample(&mut rng, node_count, total);
    let mut nodes: Vec<NodeId> = picks.iter().map(|i| i as NodeId).collect();
    nodes.sort_unstable();
    Ok(CentroidSet {
        nodes,
        from_cluster: vec![false; total],
        alpha: 0.0,
        k: 0,
    })
}

/// Where one pretraining pseudo-class came from: the centroid, its
/// neighborhood, and the nodes touched by its sampled inputs. Feeds the
/// protection plan.
#[derive(Clone, Debug)]
pub struct ClassOrigin {
    pub centroid: NodeId,
    pub subgraph: Subgraph,
    pub example_nodes: Vec<NodeId>,
    pub query_nodes: Vec<NodeId>,
}

pub struct PretrainEpisode {
    pub episode: Episode,
    /// Per class slot, aligned with `episode.classes`.
    pub origins: Vec<ClassOrigin>,
}

#[allow(clippy::too_many_arguments)]
pub fn sample_pretrain_episode(
    g: &Graph,
    centroids: &CentroidSet,
    batch_index: usize,
    pool_size: usize,
    m: usize,
    s: usize,
    n: usize,
    h: usize,
    fanout_cap: Option<usize>,
    task_kind: TaskKind,
    seed: u64,
) -> Result<PretrainEpisode> {
    if pool_size < m {
        return Err(Error::Sampling(format!(
            "per-batch centroid pool {pool_size} smaller than m={m}"
        )));
    }
    let lo = batch_index * pool_size;
    let hi = lo + pool_size;
    if hi > centroids.len() {
        return Err(Error::Sampling(format!(
            "batch {batch_index} needs centroids [{lo}..{hi}) but only {} exist",
            centroids.len()
        )));
    }
    let pool = &centroids.nodes[lo..hi];
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[batch_index as u64]));
    let mut order: Vec<NodeId> = pool.to_vec();
    order.shuffle(&mut rng);

    // Inputs already claimed by earlier slots; neighborhoods overlap,
    // and one input must not carry two pseudo-labels.
    let mut used: std::collections::HashSet<EpisodeInput> = std::collections::HashSet::new();
    let mut support = Vec::with_capacity(m * s);
    let mut queries = Vec::with_capacity(m * n);
    let mut origins = Vec::with_capacity(m);
    let mut degenerate = false;
    let mut cursor = 0usize;
    let mut retries = 0usize;
    let mut best_fallback: Option<(NodeId, Subgraph, Vec<EpisodeInput>)> = None;

    while origins.len() < m {
        let slot = origins.len();
        let (o, sub, units, with_replacement) =
            if cursor >= order.len() || retries > CENTROID_RETRIES + m {
                // Out of candidates: reuse the largest neighborhood seen,
                // sampling with replacement.
                let (o, sub, units) = best_fallback.clone().ok_or_else(|| {
                    Error::Sampling("no usable centroid neighborhoods in pool".to_string())
                })?;
                degenerate = true;
                (o, sub, units, true)
            } else {
                let o = order[cursor];
                cursor += 1;
                let sub = khop_subgraph(g, o, h, fanout_cap, mix_seed(seed, &[o as u64, 17]))?;
                let units: Vec<EpisodeInput> = episode_units(g, &sub, task_kind)
                    .into_iter()
                    .filter(|u| !used.contains(u))
                    .collect();
                if units.len() < s + n {
                    retries += 1;
                    if !units.is_empty()
                        && best_fallback
                            .as_ref()
                            .is_none_or(|(_, _, u)| units.len() > u.len())
                    {
                        best_fallback = Some((o, sub, units));
                    }
                    continue;
                }
                (o, sub, units, false)
            };

        let mut draw_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[slot as u64, 29]));
        let picks: Vec<EpisodeInput> = if with_replacement {
            (0..s + n)
                .map(|_| units[draw_rng.gen_range(0..units.len())])
                .collect()
        } else {
            rand::seq::index::sample(&mut draw_rng, units.len(), s + n)
                .iter()
                .map(|i| units[i])
                .collect()
        };
        used.extend(picks.iter().copied());
        let ex: Vec<EpisodeInput> = picks[..s].to_vec();
        let qu: Vec<EpisodeInput> = picks[s..].to_vec();
        origins.push(ClassOrigin {
            centroid: o,
            subgraph: sub,
            example_nodes: ex.iter().flat_map(|x| x.nodes()).collect(),
            query_nodes: qu.iter().flat_map(|x| x.nodes()).collect(),
        });
        support.extend(ex);
        queries.extend(qu);
    }

    let episode = Episode {
        task_kind,
        label_mode: LabelMode::Pseudo,
        classes: (0..m as u32).collect(),
        support,
        queries,
        shots: s,
        queries_per_class: n,
        degenerate,
        seed,
    };
    episode.check_balance()?;
    Ok(PretrainEpisode { episode, origins })
}

/// Sampleable inputs of a centroid neighborhood: its nodes (node task)
/// or its distinct endpoint pairs (link task).
fn episode_units(g: &Graph, sub: &Subgraph, task_kind: TaskKind) -> Vec<EpisodeInput> {
    match task_kind {
        TaskKind::Node => sub.nodes.iter().map(|&x| EpisodeInput::Node(x)).collect(),
        TaskKind::Link => {
            let _ = g;
            let mut pairs: Vec<(NodeId, NodeId)> = sub
                .edges
                .iter()
                .map(|&(ls, _, ld)| (sub.nodes[ls as usize], sub.nodes[ld as usize]))
                .collect();
            pairs.sort_unstable();
            pairs.dedup();
            pairs.into_iter().map(|(a, b)| EpisodeInput::Pair(a, b)).collect()
        }
    }
}

/// True-label episode over the target graph: m uniformly chosen classes
/// with `k_shots` support and `n` query inputs each, disjoint.
pub fn sample_downstream_episode(
    g: &Graph,
    m: usize,
    k_shots: usize,
    n: usize,
    task_kind: TaskKind,
    seed: u64,
) -> Result<Episode> {
    if k_shots == 0 {
        return Err(Error::Sampling(
            "at least one support example per class required".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let need = k_shots + n;

    let (class_ids, pools): (Vec<ClassId>, Vec<Vec<EpisodeInput>>) = match task_kind {
        TaskKind::Node => {
            let mut per_class: std::collections::BTreeMap<ClassId, Vec<EpisodeInput>> =
                std::collections::BTreeMap::new();
            for (node, class) in g.labeled_nodes() {
                per_class.entry(class).or_default().push(EpisodeInput::Node(node));
            }
            per_class.into_iter().unzip()
        }
        TaskKind::Link => {
            let mut pair_rels: std::collections::HashMap<(NodeId, NodeId), Vec<ClassId>> =
                std::collections::HashMap::new();
            for e in g.edges() {
                let rels = pair_rels.entry((e.src, e.dst)).or_default();
                if !rels.contains(&e.rel) {
                    rels.push(e.rel);
                }
            }
            let mut per_class: std::collections::BTreeMap<ClassId, Vec<EpisodeInput>> =
                std::collections::BTreeMap::new();
            let mut items: Vec<(&(NodeId, NodeId), &Vec<ClassId>)> = pair_rels.iter().collect();
            items.sort_unstable_by_key(|(pair, _)| **pair);
            for (&(src, dst), rels) in items {
                // Pairs carrying several relation types are ambiguous
                // as classification inputs; skip them.
                if rels.len() == 1 {
                    per_class
                        .entry(rels[0])
                        .or_default()
                        .push(EpisodeInput::Pair(src, dst));
                }
            }
            per_class.into_iter().unzip()
        }
    };

    let eligible: Vec<usize> = (0..class_ids.len())
        .filter(|&i| pools[i].len() >= need)
        .collect();
    if eligible.len() < m {
        let deficient: Vec<String> = (0..class_ids.len())
            .filter(|&i| pools[i].len() < need)
            .map(|i| format!("class {} has {} (< {need})", class_ids[i], pools[i].len()))
            .collect();
        return Err(Error::Sampling(format!(
            "need {m} classes with at least {need} inputs, found {}; {}",
            eligible.len(),
            deficient.join("; ")
        )));
    }

    let chosen_classes: Vec<usize> = rand::seq::index::sample(&mut rng, eligible.len(), m)
        .iter()
        .map(|i| eligible[i])
        .collect();

    let mut support = Vec::with_capacity(m * k_shots);
    let mut queries = Vec::with_capacity(m * n);
    let mut classes = Vec::with_capacity(m);
    for &ci in &chosen_classes {
        classes.push(class_ids[ci]);
        let pool = &pools[ci];
        let picks = rand::seq::index::sample(&mut rng, pool.len(), need);
        let picked: Vec<EpisodeInput> = picks.iter().map(|i| pool[i]).collect();
        support.extend_from_slice(&picked[..k_shots]);
        queries.extend_from_slice(&picked[k_shots..]);
    }

    let episode = Episode {
        task_kind,
        label_mode: LabelMode::True,
        classes,
        support,
        queries,
        shots: k_shots,
        queries_per_class: n,
        degenerate: false,
        seed,
    };
    episode.check_balance()?;
    Ok(episode)
}

//! Per-input context graphs and the balanced augmentation strategy:
//! protection sets computed on the centroid neighborhood, node dropping
//! and feature masking applied only to unprotected candidates, with
//! mask records kept for attribute reconstruction.

use std::collections::{HashMap, HashSet};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::episode::EpisodeInput;
use crate::error::{Error, Result};
use crate::graph::{khop_subgraph, mix_seed, Graph, NodeId, Subgraph};
use crate::tensor::Tensor;

/// Nodes of one centroid neighborhood exempt from augmentation: the
/// centroid, every sampled example/query node, and a p-fraction of the
/// remaining neighborhood.
#[derive(Clone, Debug)]
pub struct ProtectionPlan {
    pub centroid: NodeId,
    pub v_protect: HashSet<NodeId>,
    pub p: f64,
    pub v_remain: Vec<NodeId>,
}

impl ProtectionPlan {
    /// Minimal plan protecting only the given targets; this is the
    /// fully independent augmentation path used when balanced
    /// augmentation is ablated away.
    pub fn targets_only(targets: &[NodeId]) -> ProtectionPlan {
        ProtectionPlan {
            centroid: targets.first().copied().unwrap_or(0),
            v_protect: targets.iter().copied().collect(),
            p: 0.0,
            v_remain: Vec::new(),
        }
    }
}

/// V_protect = {o} ∪ examples ∪ queries ∪ V^(p), where V^(p) is a
/// seeded uniform sample of floor(p * |V_remain|) nodes from
/// V_remain = V_o minus the first three parts.
pub fn build_protection_plan(
    g_o: &Subgraph,
    examples: &[NodeId],
    queries: &[NodeId],
    p: f64,
    seed: u64,
) -> Result<ProtectionPlan> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("p must be in [0,1], got {p}")));
    }
    let node_set: HashSet<NodeId> = g_o.nodes.iter().copied().collect();
    for &x in examples.iter().chain(queries) {
        if !node_set.contains(&x) {
            return Err(Error::Sampling(format!(
                "input node {x} is not in the centroid subgraph"
            )));
        }
    }
    let mut v_protect: HashSet<NodeId> = HashSet::new();
    v_protect.insert(g_o.anchor);
    v_protect.extend(examples.iter().copied());
    v_protect.extend(queries.iter().copied());

    let mut v_remain: Vec<NodeId> = g_o
        .nodes
        .iter()
        .copied()
        .filter(|n| !v_protect.contains(n))
        .collect();
    v_remain.sort_unstable();

    let take = (p * v_remain.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, v_remain.len(), take);
    for i in picks {
        v_protect.insert(v_remain[i]);
    }
    Ok(ProtectionPlan {
        centroid: g_o.anchor,
        v_protect,
        p,
        v_remain,
    })
}

/// Context graph of one input: its h-hop neighborhood (the union of
/// both endpoints' neighborhoods for pair inputs), a local feature
/// copy, and the augmentation record.
#[derive(Clone, Debug)]
pub struct ContextGraph {
    pub sub: Subgraph,
    /// Parent-graph ids of the classified node(s); always present and
    /// never augmented.
    pub targets: Vec<NodeId>,
    /// Local feature rows aligned with `sub.nodes` (masked rows zeroed).
    pub features: Tensor<f32>,
    pub dropped: HashSet<NodeId>,
    pub masked: HashSet<NodeId>,
    pub original_masked_features: HashMap<NodeId, Vec<f32>>,
}

impl ContextGraph {
    pub fn len(&self) -> usize {
        self.sub.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sub.is_empty()
    }

    pub fn target_locals(&self) -> Vec<usize> {
        self.targets
            .iter()
            .map(|&t| self.sub.local_of(t).expect("target present in context"))
            .collect()
    }

    /// Aggregation edge list (both directions) in local indices.
    pub fn agg_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.sub.edges.len() * 2);
        for &(ls, _, ld) in &self.sub.edges {
            out.push((ls as usize, ld as usize));
            out.push((ld as usize, ls as usize));
        }
        out
    }

    /// Local indices of masked nodes, in context order.
    pub fn masked_locals(&self) -> Vec<usize> {
        self.sub
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| self.masked.contains(n))
            .map(|(i, _)| i)
            .collect()
    }

    /// Original feature rows of the masked nodes, in `masked_locals`
    /// order. `None` when nothing is masked.
    pub fn masked_original_matrix(&self) -> Option<Tensor<f32>> {
        let locals = self.masked_locals();
        if locals.is_empty() {
            return None;
        }
        let d = self.features.cols();
        let mut data = Vec::with_capacity(locals.len() * d);
        for &i in &locals {
            let node = self.sub.nodes[i];
            data.extend_from_slice(&self.original_masked_features[&node]);
        }
        Some(Tensor::new(locals.len(), d, data))
    }

    pub fn debug_json(&self) -> serde_json::Value {
        let mut dropped: Vec<_> = self.dropped.iter().copied().collect();
        dropped.sort_unstable();
        let mut masked: Vec<_> = self.masked.iter().copied().collect();
        masked.sort_unstable();
        serde_json::json!({
            "nodes": self.sub.nodes,
            "edges": self.sub.edges,
            "targets": self.targets,
            "dropped": dropped,
            "masked": masked,
        })
    }
}

fn local_features(g: &Graph, nodes: &[NodeId]) -> Tensor<f32> {
    let d = g.feature_dim();
    let mut data = Vec::with_capacity(nodes.len() * d);
    for &n in nodes {
        data.extend_from_slice(g.feature_row(n));
    }
    Tensor::new(nodes.len(), d, data)
}

/// Extract the unaugmented context of an input. Pair inputs take the
/// union of both endpoints' h-hop neighborhoods with edges re-induced
/// over the union; both endpoints are targets at hop 0.
pub fn build_context(
    g: &Graph,
    x: EpisodeInput,
    h: usize,
    fanout_cap: Option<usize>,
    seed: u64,
) -> Result<ContextGraph> {
    let (sub, targets) = match x {
        EpisodeInput::Node(n) => (khop_subgraph(g, n, h, fanout_cap, seed)?, vec![n]),
        EpisodeInput::Pair(a, b) => {
            let sa = khop_subgraph(g, a, h, fanout_cap, mix_seed(seed, &[0]))?;
            let sb = khop_subgraph(g, b, h, fanout_cap, mix_seed(seed, &[1]))?;
            let mut nodes = sa.nodes.clone();
            let mut hops = sa.hops.clone();
            let mut pos: HashMap<NodeId, usize> =
                nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
            for (i, &n) in sb.nodes.iter().enumerate() {
                match pos.get(&n) {
                    Some(&at) => hops[at] = hops[at].min(sb.hops[i]),
                    None => {
                        pos.insert(n, nodes.len());
                        nodes.push(n);
                        hops.push(sb.hops[i]);
                    }
                }
            }
            (crate::graph::induce_subgraph(g, nodes, hops, a), vec![a, b])
        }
    };
    let features = local_features(g, &sub.nodes);
    Ok(ContextGraph {
        sub,
        targets,
        features,
        dropped: HashSet::new(),
        masked: HashSet::new(),
        original_masked_features: HashMap::new(),
    })
}

/// Apply node dropping then feature masking to the candidate nodes
/// (context nodes outside the protection plan; targets always exempt).
/// Dropped nodes lose their incident edges; masked nodes keep structure
/// but have their feature rows zeroed, with originals recorded. A node
/// is never both dropped and masked. Deterministic in `seed`.
pub fn augment(
    ctx: &ContextGraph,
    plan: &ProtectionPlan,
    drop_rate: f64,
    mask_rate: f64,
    seed: u64,
) -> Result<ContextGraph> {
    for (name, rate) in [("drop_rate", drop_rate), ("mask_rate", mask_rate)] {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("{name} must be in [0,1], got {rate}")));
        }
    }
    let targets: HashSet<NodeId> = ctx.targets.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut dropped: HashSet<NodeId> = HashSet::new();
    let mut masked: HashSet<NodeId> = HashSet::new();
    for &node in &ctx.sub.nodes {
        if plan.v_protect.contains(&node) || targets.contains(&node) {
            continue;
        }
        if rng.gen::<f64>() < drop_rate {
            dropped.insert(node);
        } else if rng.gen::<f64>() < mask_rate {
            masked.insert(node);
        }
    }

    // Rebuild the surviving structure, preserving node order.
    let mut keep_local: Vec<usize> = Vec::with_capacity(ctx.sub.len());
    let mut new_nodes = Vec::new();
    let mut new_hops = Vec::new();
    let mut remap: HashMap<u32, u32> = HashMap::new();
    for (i, &node) in ctx.sub.nodes.iter().enumerate() {
        if dropped.contains(&node) {
            continue;
        }
        remap.insert(i as u32, new_nodes.len() as u32);
        keep_local.push(i);
        new_nodes.push(node);
        new_hops.push(ctx.sub.hops[i]);
    }
    let new_edges: Vec<(u32, u32, u32)> = ctx
        .sub
        .edges
        .iter()
        .filter_map(|&(ls, rel, ld)| {
            match (remap.get(&ls), remap.get(&ld)) {
                (Some(&a), Some(&b)) => Some((a, rel, b)),
                _ => None,
            }
        })
        .collect();

    let d = ctx.features.cols();
    let mut data = Vec::with_capacity(new_nodes.len() * d);
    let mut originals = ctx.original_masked_features.clone();
    for (&node, &old_local) in new_nodes.iter().zip(&keep_local) {
        if masked.contains(&node) {
            originals.insert(node, ctx.features.row(old_local).to_vec());
            data.extend(std::iter::repeat_n(0.0f32, d));
        } else {
            data.extend_from_slice(ctx.features.row(old_local));
        }
    }

    let mut all_dropped = ctx.dropped.clone();
    all_dropped.extend(dropped);
    let mut all_masked = ctx.masked.clone();
    all_masked.extend(masked);

    for t in &ctx.targets {
        debug_assert!(new_nodes.contains(t), "target {t} lost in augmentation");
    }

    Ok(ContextGraph {
        sub: Subgraph {
            nodes: new_nodes,
            edges: new_edges,
            hops: new_hops,
            anchor: ctx.sub.anchor,
        },
        targets: ctx.targets.clone(),
        features: Tensor::new(ctx.sub.len() - all_dropped.len(), d, data),
        dropped: all_dropped,
        masked: all_masked,
        original_masked_features: originals,
    })
}

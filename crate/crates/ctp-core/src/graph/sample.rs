//! Neighborhood extraction and random-walk sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mix_seed, Graph, NodeId, RandomWalk, Subgraph};
use crate::error::{Error, Result};
use crate::exec;

/// BFS neighborhood of `anchor` up to `h` hops. When a node exposes
/// more than `fanout_cap` unvisited neighbors, a seeded uniform sample
/// of `fanout_cap` is expanded instead (`None` = unlimited). Edges are
/// induced over the selected nodes.
pub fn khop_subgraph(
    g: &Graph,
    anchor: NodeId,
    h: usize,
    fanout_cap: Option<usize>,
    seed: u64,
) -> Result<Subgraph> {
    if anchor as usize >= g.node_count() {
        return Err(Error::InvalidArgument(format!(
            "anchor {anchor} out of range for {} nodes",
            g.node_count()
        )));
    }
    if h == 0 {
        return Err(Error::InvalidArgument("hop count must be >= 1".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[anchor as u64]));
    let mut selected: Vec<NodeId> = vec![anchor];
    let mut hops: Vec<u16> = vec![0];
    let mut visited = std::collections::HashSet::new();
    visited.insert(anchor);
    let mut frontier = vec![anchor];

    for hop in 1..=h {
        let mut next = Vec::new();
        for &u in &frontier {
            let mut fresh: Vec<NodeId> = g
                .neighbors(u)
                .iter()
                .copied()
                .filter(|v| !visited.contains(v))
                .collect();
            if let Some(cap) = fanout_cap {
                if fresh.len() > cap {
                    fresh.partial_shuffle(&mut rng, cap);
                    fresh.truncate(cap);
                    fresh.sort_unstable();
                }
            }
            for v in fresh {
                visited.insert(v);
                selected.push(v);
                hops.push(hop as u16);
                next.push(v);
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }

    Ok(induce(g, selected, hops, anchor))
}

/// Build a subgraph from an explicit node selection, inducing all
/// parent edges with both endpoints selected.
pub(crate) fn induce(g: &Graph, nodes: Vec<NodeId>, hops: Vec<u16>, anchor: NodeId) -> Subgraph {
    let local: std::collections::HashMap<NodeId, u32> = nodes
        .iter()
        .enumerate()
        .map(|(i, &n)| (n, i as u32))
        .collect();
    let mut edge_ids: Vec<u32> = nodes
        .iter()
        .flat_map(|&n| g.incident_edges(n).iter().copied())
        .collect();
    edge_ids.sort_unstable();
    edge_ids.dedup();
    let mut edges = Vec::new();
    for eid in edge_ids {
        let e = &g.edges()[eid as usize];
        if let (Some(&ls), Some(&ld)) = (local.get(&e.src), local.get(&e.dst)) {
            edges.push((ls, e.rel, ld));
        }
    }
    Subgraph {
        nodes,
        edges,
        hops,
        anchor,
    }
}

/// Uniform random walks: `walks_per_node` walks of `walk_length` nodes
/// from every non-isolated node. Isolated nodes emit nothing. Walks are
/// seeded per (node, walk index), so the output is identical whether
/// the nodes are processed in parallel or sequentially.
pub fn sample_walks(
    g: &Graph,
    walks_per_node: usize,
    walk_length: usize,
    seed: u64,
) -> Result<Vec<RandomWalk>> {
    if walk_length < 2 {
        return Err(Error::InvalidArgument(
            "walk length must be >= 2".to_string(),
        ));
    }
    let n = g.node_count();
    let per_node: Vec<Vec<RandomWalk>> = exec::map_indexed(n, |node| {
        let node = node as NodeId;
        if g.is_isolated(node) {
            return Vec::new();
        }
        (0..walks_per_node)
            .map(|w| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(seed, &[node as u64, w as u64]));
                let mut nodes = Vec::with_capacity(walk_length);
                let mut cur = node;
                nodes.push(cur);
                for _ in 1..walk_length {
                    let nbrs = g.neighbors(cur);
                    cur = nbrs[rng.gen_range(0..nbrs.len())];
                    nodes.push(cur);
                }
                RandomWalk { nodes }
            })
            .collect()
    });
    Ok(per_node.into_iter().flatten().collect())
}

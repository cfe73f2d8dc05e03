//! Graph representation, file ingestion, synthetic generation, and
//! neighborhood/walk sampling. The single source of structural truth
//! for the rest of the pipeline.

mod generate;
mod io;
mod sample;

pub use generate::{gen_planted_partition, gen_relational};
pub use io::{load_graph, save_graph};
pub(crate) use sample::induce as induce_subgraph;
pub use sample::{khop_subgraph, sample_walks};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = u32;
pub type RelId = u32;
pub type ClassId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub rel: RelId,
    pub dst: NodeId,
}

/// Typed-edge attributed graph with dense integer ids. Immutable after
/// construction and safe to share across threads for concurrent reads.
#[derive(Clone, Debug)]
pub struct Graph {
    features: Tensor<f32>,
    edges: Vec<Edge>,
    relation_count: usize,
    node_labels: Vec<Option<ClassId>>,
    class_count: usize,
    /// Distinct neighbors per node (sorted), ignoring edge direction.
    neighbors: Vec<Vec<NodeId>>,
    /// Incident edge ids per node, both directions.
    incident: Vec<Vec<u32>>,
    /// Original string ids, kept for reporting and round-trip saves.
    node_names: Vec<String>,
    relation_names: Vec<String>,
    class_names: Vec<String>,
}

impl Graph {
    /// Build a graph from dense parts, validating the invariants:
    /// endpoints and relations in range, finite features, no self-loops.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        features: Tensor<f32>,
        edges: Vec<Edge>,
        relation_count: usize,
        node_labels: Vec<Option<ClassId>>,
        class_count: usize,
        node_names: Vec<String>,
        relation_names: Vec<String>,
        class_names: Vec<String>,
    ) -> Result<Graph> {
        let n = features.rows();
        if node_labels.len() != n {
            return Err(Error::InvalidGraph(format!(
                "{} label slots for {} nodes",
                node_labels.len(),
                n
            )));
        }
        if !features.all_finite() {
            return Err(Error::InvalidGraph("non-finite feature value".to_string()));
        }
        for (i, e) in edges.iter().enumerate() {
            if e.src as usize >= n || e.dst as usize >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge {i} endpoint out of range ({} or {} >= {n})",
                    e.src, e.dst
                )));
            }
            if e.rel as usize >= relation_count {
                return Err(Error::InvalidGraph(format!(
                    "edge {i} relation {} >= relation count {relation_count}",
                    e.rel
                )));
            }
            if e.src == e.dst {
                return Err(Error::InvalidGraph(format!("edge {i} is a self-loop")));
            }
        }
        let mut neighbors: Vec<Vec<NodeId>> = vec![Vec::new(); n];
        let mut incident: Vec<Vec<u32>> = vec![Vec::new(); n];
        for (i, e) in edges.iter().enumerate() {
            neighbors[e.src as usize].push(e.dst);
            neighbors[e.dst as usize].push(e.src);
            incident[e.src as usize].push(i as u32);
            incident[e.dst as usize].push(i as u32);
        }
        for list in neighbors.iter_mut() {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Graph {
            features,
            edges,
            relation_count,
            node_labels,
            class_count,
            neighbors,
            incident,
            node_names,
            relation_names,
            class_names,
        })
    }

    pub fn node_count(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor<f32> {
        &self.features
    }

    pub fn feature_row(&self, node: NodeId) -> &[f32] {
        self.features.row(node as usize)
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn relation_count(&self) -> usize {
        self.relation_count
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn label_of(&self, node: NodeId) -> Option<ClassId> {
        self.node_labels[node as usize]
    }

    pub fn labeled_nodes(&self) -> impl Iterator<Item = (NodeId, ClassId)> + '_ {
        self.node_labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|c| (i as NodeId, c)))
    }

    /// Distinct neighbors of a node (both edge directions), sorted.
    pub fn neighbors(&self, node: NodeId) -> &[NodeId] {
        &self.neighbors[node as usize]
    }

    pub fn incident_edges(&self, node: NodeId) -> &[u32] {
        &self.incident[node as usize]
    }

    pub fn degree(&self, node: NodeId) -> usize {
        self.incident[node as usize].len()
    }

    pub fn is_isolated(&self, node: NodeId) -> bool {
        self.neighbors[node as usize].is_empty()
    }

    pub fn node_name(&self, node: NodeId) -> &str {
        &self.node_names[node as usize]
    }

    pub fn node_names(&self) -> &[String] {
        &self.node_names
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// SHA-256 over the structural content, hex-encoded. Used as a
    /// cache key for derived artifacts.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.node_count() as u64).to_le_bytes());
        h.update((self.feature_dim() as u64).to_le_bytes());
        h.update((self.relation_count as u64).to_le_bytes());
        for v in self.features.data() {
            h.update(v.to_le_bytes());
        }
        for e in &self.edges {
            h.update(e.src.to_le_bytes());
            h.update(e.rel.to_le_bytes());
            h.update(e.dst.to_le_bytes());
        }
        for l in &self.node_labels {
            match l {
                None => h.update([0u8]),
                Some(c) => {
                    h.update([1u8]);
                    h.update(c.to_le_bytes());
                }
            }
        }
        crate::tensor::checkpoint::hex(&h.finalize())
    }
}

/// Connected neighborhood extracted around an anchor. Node ids are
/// parent-graph ids; edges use local indices into `nodes`.
#[derive(Clone, Debug, serde::Serialize)]
pub struct Subgraph {
    /// Parent-graph ids; the anchor is first.
    pub nodes: Vec<NodeId>,
    /// Induced edges as (local src, relation, local dst).
    pub edges: Vec<(u32, RelId, u32)>,
    /// Hop distance from the anchor, aligned with `nodes`.
    pub hops: Vec<u16>,
    pub anchor: NodeId,
}

impl Subgraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn local_of(&self, parent: NodeId) -> Option<usize> {
        self.nodes.iter().position(|&n| n == parent)
    }

    pub fn contains(&self, parent: NodeId) -> bool {
        self.nodes.contains(&parent)
    }
}

/// Fixed-length uniform random walk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RandomWalk {
    pub nodes: Vec<NodeId>,
}

impl RandomWalk {
    pub fn start(&self) -> NodeId {
        self.nodes[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Stable seed derivation for independent sampling streams.
pub(crate) fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        x ^= p.wrapping_mul(0xbf58_476d_1ce4_e5b9).rotate_left(31);
        // splitmix64 finalizer
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x = z ^ (z >> 31);
    }
    x
}

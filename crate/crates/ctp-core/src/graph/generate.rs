//! Synthetic graph generators: a planted-partition community graph for
//! node tasks and a grouped relational graph for link tasks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Edge, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn unit_direction(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    v
}

/// Planted-partition community graph. Every node gets the community id
/// as its label; features are a per-community mean (a random unit
/// direction scaled by `feature_shift`) plus unit Gaussian noise.
/// Deterministic in `seed`.
pub fn gen_planted_partition(
    communities: usize,
    nodes_per_community: usize,
    p_in: f64,
    p_out: f64,
    d_in: usize,
    feature_shift: f64,
    seed: u64,
) -> Result<Graph> {
    if communities < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 communities, got {communities}"
        )));
    }
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) || p_out >= p_in {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}"
        )));
    }
    let n = communities * nodes_per_community;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let means: Vec<Vec<f64>> = (0..communities)
        .map(|_| {
            unit_direction(d_in, &mut rng)
                .into_iter()
                .map(|x| x * feature_shift)
                .collect()
        })
        .collect();

    let mut feats = Vec::with_capacity(n * d_in);
    let mut labels = Vec::with_capacity(n);
    for node in 0..n {
        let c = node / nodes_per_community;
        for &mean in &means[c] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            feats.push((mean + noise) as f32);
        }
        labels.push(Some(c as u32));
    }

    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let same = i / nodes_per_community == j / nodes_per_community;
            let p = if same { p_in } else { p_out };
            if rng.gen::<f64>() < p {
                edges.push(Edge {
                    src: i as NodeId,
                    rel: 0,
                    dst: j as NodeId,
                });
            }
        }
    }

    Graph::build(
        Tensor::new(n, d_in, feats),
        edges,
        1,
        labels,
        communities,
        (0..n).map(|i| i.to_string()).collect(),
        vec!["0".to_string()],
        (0..communities).map(|c| c.to_string()).collect(),
    )
}

/// Fraction of relational edges drawn between arbitrary entities rather
/// than the relation's preferred group pair.
const RELATIONAL_NOISE: f64 = 0.1;

/// Relational graph where each relation type preferentially connects
/// one latent entity group to the next, so the relation is statistically
/// predictable from endpoint context. Entity features encode the group.
/// Deterministic in `seed`.
pub fn gen_relational(
    entities: usize,
    relation_count: usize,
    edges: usize,
    d_in: usize,
    seed: u64,
) -> Result<Graph> {
    if relation_count < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 relations, got {relation_count}"
        )));
    }
    if entities < 2 * relation_count {
        return Err(Error::InvalidArgument(format!(
            "need at least {} entities for {relation_count} relations",
            2 * relation_count
        )));
    }
    let capacity = entities * (entities - 1);
    let per_rel_base = edges / relation_count;
    if per_rel_base + 1 > capacity {
        return Err(Error::InvalidArgument(format!(
            "{edges} edges over {relation_count} relations exceeds simple-graph capacity {capacity} per relation"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // A disjoint pair of latent groups per relation; relation r prefers
    // group 2r -> 2r+1, so each relation has a unique group signature.
    let groups = 2 * relation_count;
    let group_of = |e: usize| e * groups / entities;
    let members: Vec<Vec<usize>> = (0..groups)
        .map(|g| (0..entities).filter(|&e| group_of(e) == g).collect())
        .collect();

    let means: Vec<Vec<f64>> = (0..groups).map(|_| unit_direction(d_in, &mut rng)).collect();
    let mut feats = Vec::with_capacity(entities * d_in);
    for e in 0..entities {
        let g = group_of(e);
        for &mean in &means[g] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            feats.push((mean + noise) as f32);
        }
    }

    let mut edge_list = Vec::with_capacity(edges);
    let mut seen = std::collections::HashSet::new();
    for r in 0..relation_count {
        let quota = per_rel_base + usize::from(r < edges % relation_count);
        let src_group = &members[2 * r];
        let dst_group = &members[2 * r + 1];
        let mut placed = 0;
        let mut attempts = 0;
        while placed < quota {
            attempts += 1;
            if attempts > quota * 1000 {
                return Err(Error::InvalidArgument(format!(
                    "relation {r}: cannot place {quota} distinct edges"
                )));
            }
            let (src, dst) = if rng.gen::<f64>() < RELATIONAL_NOISE {
                (rng.gen_range(0..entities), rng.gen_range(0..entities))
            } else {
                (
                    src_group[rng.gen_range(0..src_group.len())],
                    dst_group[rng.gen_range(0..dst_group.len())],
                )
            };
            if src == dst || !seen.insert((src, r, dst)) {
                continue;
            }
            edge_list.push(Edge {
                src: src as NodeId,
                rel: r as u32,
                dst: dst as NodeId,
            });
            placed += 1;
        }
    }

    Graph::build(
        Tensor::new(entities, d_in, feats),
        edge_list,
        relation_count,
        vec![None; entities],
        0,
        (0..entities).map(|i| i.to_string()).collect(),
        (0..relation_count).map(|r| r.to_string()).collect(),
        vec![],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_partition_has_requested_shape() {
        let g = gen_planted_partition(4, 50, 0.2, 0.02, 16, 1.0, 7).unwrap();
        assert_eq!(g.node_count(), 200);
        assert_eq!(g.class_count(), 4);
        assert_eq!(g.relation_count(), 1);
        assert!(g.labeled_nodes().count() == 200);
    }

    #[test]
    fn planted_partition_is_deterministic_in_seed() {
        let g1 = gen_planted_partition(4, 50, 0.2, 0.02, 16, 1.0, 7).unwrap();
        let g2 = gen_planted_partition(4, 50, 0.2, 0.02, 16, 1.0, 7).unwrap();
        assert_eq!(g1.edges(), g2.edges());
        assert_eq!(g1.features(), g2.features());
        let g3 = gen_planted_partition(4, 50, 0.2, 0.02, 16, 1.0, 8).unwrap();
        assert_ne!(g1.edges(), g3.edges());
    }

    #[test]
    fn intra_community_density_is_near_p_in() {
        let g = gen_planted_partition(4, 50, 0.2, 0.02, 16, 1.0, 7).unwrap();
        let per = 50usize;
        let mut intra = 0usize;
        for e in g.edges() {
            if e.src as usize / per == e.dst as usize / per {
                intra += 1;
            }
        }
        // Possible intra pairs: 4 communities * C(50,2)
        let possible = 4 * (per * (per - 1) / 2);
        let density = intra as f64 / possible as f64;
        assert!((density - 0.2).abs() < 0.03, "density {density}");
    }

    #[test]
    fn rejects_inverted_probabilities() {
        assert!(gen_planted_partition(4, 10, 0.1, 0.2, 4, 1.0, 1).is_err());
        assert!(gen_planted_partition(4, 10, 0.1, 0.1, 4, 1.0, 1).is_err());
    }

    #[test]
    fn zero_shift_features_are_community_uninformative() {
        let g = gen_planted_partition(2, 200, 0.05, 0.01, 16, 0.0, 11).unwrap();
        let d = g.feature_dim();
        let mut mean_a = vec![0.0f64; d];
        let mut mean_b = vec![0.0f64; d];
        for node in 0..g.node_count() {
            let target = if node < 200 { &mut mean_a } else { &mut mean_b };
            for (j, v) in g.feature_row(node as u32).iter().enumerate() {
                target[j] += *v as f64 / 200.0;
            }
        }
        let dist_sq: f64 = mean_a
            .iter()
            .zip(&mean_b)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        // Means of 200 unit-Gaussian samples differ by ~N(0, 2/200) per
        // dim; expected squared distance is 2d/200 = 0.16. Loose bound.
        assert!(dist_sq < 0.6, "squared mean distance {dist_sq}");
    }

    #[test]
    fn relational_covers_all_relations() {
        let g = gen_relational(100, 5, 400, 16, 3).unwrap();
        assert_eq!(g.relation_count(), 5);
        assert_eq!(g.edges().len(), 400);
        let mut hist = vec![0usize; 5];
        for e in g.edges() {
            hist[e.rel as usize] += 1;
        }
        assert!(hist.iter().all(|&c| c > 0), "{hist:?}");
    }

    #[test]
    fn relational_seed_changes_edges() {
        let g1 = gen_relational(100, 5, 400, 16, 3).unwrap();
        let g2 = gen_relational(100, 5, 400, 16, 4).unwrap();
        assert_ne!(g1.edges(), g2.edges());
        let g3 = gen_relational(100, 5, 400, 16, 3).unwrap();
        assert_eq!(g1.edges(), g3.edges());
    }

    #[test]
    fn relational_capacity_overflow_errors() {
        assert!(gen_relational(10, 2, 10_000, 4, 1).is_err());
    }
}

//! Property tests for the structural invariants: save/load identity,
//! neighborhood monotonicity, protection soundness, episode balance,
//! and the nearest-neighbor reduction of the prompt scorer.

use proptest::prelude::*;

use ctp_core::context::{augment, build_context, build_protection_plan, ProtectionPlan};
use ctp_core::episode::{
    sample_downstream_episode, sample_pretrain_episode, CentroidSet, EpisodeInput, TaskKind,
};
use ctp_core::graph::{gen_planted_partition, khop_subgraph, load_graph, save_graph};
use ctp_core::prompt::{build_prompt_graph, predict, refine_and_score, PROMPT_ETYPES};
use ctp_core::tensor::{BoundParams, ParamSet, Tape, Tensor, Topology};

fn small_graph_strategy() -> impl Strategy<Value = (usize, usize, f64, f64, u64)> {
    (2usize..5, 8usize..20, 0.1f64..0.4, 0.01f64..0.05, any::<u64>())
        .prop_filter("p_out < p_in", |(_, _, pi, po, _)| po < pi)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn save_then_load_is_identity((c, per, p_in, p_out, seed) in small_graph_strategy()) {
        let g = gen_planted_partition(c, per, p_in, p_out, 6, 1.0, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_graph(&g, dir.path()).unwrap();
        let back = load_graph(dir.path()).unwrap();
        prop_assert_eq!(back.node_count(), g.node_count());
        prop_assert_eq!(back.edges(), g.edges());
        prop_assert!(back.features() == g.features());
        for n in 0..g.node_count() as u32 {
            prop_assert_eq!(back.label_of(n), g.label_of(n));
        }
    }

    #[test]
    fn khop_grows_with_h((c, per, p_in, p_out, seed) in small_graph_strategy(), anchor_pick in any::<u32>(), h in 1usize..4) {
        let g = gen_planted_partition(c, per, p_in, p_out, 4, 1.0, seed).unwrap();
        let anchor = anchor_pick % g.node_count() as u32;
        let small = khop_subgraph(&g, anchor, h, None, 7).unwrap();
        let big = khop_subgraph(&g, anchor, h + 1, None, 7).unwrap();
        let big_set: std::collections::HashSet<_> = big.nodes.iter().collect();
        prop_assert!(small.nodes.iter().all(|n| big_set.contains(n)));
        prop_assert!(small.hops.iter().all(|&d| d as usize <= h));
        prop_assert_eq!(small.nodes[0], anchor);
    }

    #[test]
    fn augmentation_never_touches_protected_nodes(
        (c, per, p_in, p_out, seed) in small_graph_strategy(),
        p in 0.0f64..1.0,
        drop_rate in 0.0f64..0.9,
        mask_rate in 0.0f64..0.9,
        aug_seed in any::<u64>(),
    ) {
        let g = gen_planted_partition(c, per, p_in, p_out, 4, 1.0, seed).unwrap();
        let anchor = (seed % g.node_count() as u64) as u32;
        let sub = khop_subgraph(&g, anchor, 2, Some(10), 3).unwrap();
        let examples: Vec<u32> = sub.nodes.iter().copied().take(2).collect();
        let queries: Vec<u32> = sub.nodes.iter().copied().skip(2).take(2).collect();
        let plan = build_protection_plan(&sub, &examples, &queries, p, 11).unwrap();
        let ctx = build_context(&g, EpisodeInput::Node(examples[0]), 2, Some(10), 13).unwrap();
        let aug = augment(&ctx, &plan, drop_rate, mask_rate, aug_seed).unwrap();
        for n in &plan.v_protect {
            prop_assert!(!aug.dropped.contains(n));
            prop_assert!(!aug.masked.contains(n));
        }
        for t in &aug.targets {
            prop_assert!(aug.sub.contains(*t));
        }
        prop_assert!(aug.dropped.is_disjoint(&aug.masked));
        // mask records restore the original rows exactly
        for (node, original) in &aug.original_masked_features {
            prop_assert_eq!(original.as_slice(), g.feature_row(*node));
        }
    }

    #[test]
    fn episodes_are_always_class_balanced(
        (c, per, p_in, p_out, seed) in small_graph_strategy(),
        m in 2usize..4,
        s in 1usize..3,
        n in 1usize..3,
    ) {
        let g = gen_planted_partition(c.max(3), per.max(12), p_in, p_out, 4, 1.0, seed).unwrap();
        // downstream
        if c.max(3) >= m {
            if let Ok(ep) = sample_downstream_episode(&g, m, s, n, TaskKind::Node, seed) {
                prop_assert_eq!(ep.support.len(), m * s);
                prop_assert_eq!(ep.queries.len(), m * n);
                let sup: std::collections::HashSet<_> = ep.support.iter().collect();
                prop_assert!(ep.queries.iter().all(|q| !sup.contains(q)));
            }
        }
        // pretraining
        let total = (m * 3).min(g.node_count());
        let centroids = CentroidSet {
            nodes: (0..total as u32).collect(),
            from_cluster: vec![false; total],
            alpha: 0.0,
            k: 0,
        };
        let pe = sample_pretrain_episode(
            &g, &centroids, 0, total, m, s, n, 2, Some(10), TaskKind::Node, seed,
        ).unwrap();
        prop_assert_eq!(pe.episode.support.len(), m * s);
        prop_assert_eq!(pe.episode.queries.len(), m * n);
        if !pe.episode.degenerate {
            let sup: std::collections::HashSet<_> = pe.episode.support.iter().collect();
            prop_assert!(pe.episode.queries.iter().all(|q| !sup.contains(q)));
        }
    }

    #[test]
    fn logits_always_within_cosine_range(seed in any::<u64>()) {
        let d = 5;
        let m = 3;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let params = random_prompt_params(d, &mut rng);
        let tape: Tape<f64> = Tape::new();
        let bound = BoundParams::bind(&tape, &params);
        let ex = tape.constant(random_matrix(m * 2, d, &mut rng));
        let qu = tape.constant(random_matrix(m * 2, d, &mut rng));
        let pg = build_prompt_graph(ex, qu, &[0, 1, 2], 2, 2).unwrap();
        let score = refine_and_score(&pg, &bound).unwrap();
        for v in score.logits.value().data() {
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(v));
        }
    }

    /// With the meta-layer forced to the identity and one example per
    /// class, the scorer must agree with a plain nearest-example-by-
    /// cosine classifier.
    #[test]
    fn identity_refinement_reduces_to_nearest_example(seed in any::<u64>()) {
        let d = 6;
        let m = 4;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ex_t = random_matrix(m, d, &mut rng);
        let qu_t = random_matrix(2 * m, d, &mut rng);

        let params = zero_attention_params(d);
        let tape: Tape<f64> = Tape::new();
        let bound = BoundParams::bind(&tape, &params);
        let ex = tape.constant(ex_t.clone());
        let qu = tape.constant(qu_t.clone());
        let pg = build_prompt_graph(ex, qu, &[0, 1, 2, 3], 1, 2).unwrap();
        let score = refine_and_score(&pg, &bound).unwrap();
        let preds = predict(&score.logits.value());

        // independent nearest-neighbor oracle
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) }
        };
        for (q, &pred) in preds.iter().enumerate() {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..m {
                let v = cos(qu_t.row(q), ex_t.row(c));
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            prop_assert_eq!(pred, best, "query {}", q);
        }
    }

    #[test]
    fn targets_only_plan_matches_flag_semantics(seed in any::<u64>()) {
        // The ablation path protects exactly the targets.
        let plan = ProtectionPlan::targets_only(&[3, 9]);
        prop_assert_eq!(plan.v_protect.len(), 2);
        prop_assert!(plan.v_protect.contains(&3) && plan.v_protect.contains(&9));
        let _ = seed;
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor<f64> {
    use rand::Rng;
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

fn random_prompt_params(d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> ParamSet<f64> {
    let topo = Topology { d_in: d, d, prompt_etypes: PROMPT_ETYPES, heads: 1 };
    let mut ps = ParamSet::new(topo);
    ps.insert("ref_attn.w_src", random_matrix(d, d, rng).with_grad());
    ps.insert("ref_attn.w_dst", random_matrix(d, d, rng).with_grad());
    ps.insert("ref_attn.w_val", random_matrix(d, d, rng).with_grad());
    ps.insert("ref_attn.att", random_matrix(3 * d, 1, rng).with_grad());
    ps.insert("ref_attn.etype", random_matrix(PROMPT_ETYPES, d, rng).with_grad());
    ps
}

fn zero_attention_params(d: usize) -> ParamSet<f64> {
    let topo = Topology { d_in: d, d, prompt_etypes: PROMPT_ETYPES, heads: 1 };
    let mut ps = ParamSet::new(topo);
    ps.insert("ref_attn.w_src", Tensor::zeros(d, d).with_grad());
    ps.insert("ref_attn.w_dst", Tensor::zeros(d, d).with_grad());
    ps.insert("ref_attn.w_val", Tensor::zeros(d, d).with_grad());
    ps.insert("ref_attn.att", Tensor::zeros(3 * d, 1).with_grad());
    ps.insert("ref_attn.etype", Tensor::zeros(PROMPT_ETYPES, d).with_grad());
    ps
}

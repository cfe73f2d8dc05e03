//! The finite-difference gradient suite, shared between the
//! developer-granularity `gradcheck` target and the acceptance gate.


#![allow(clippy::type_complexity)]

use super::{check_grad, check_param_grads, random_tensor};
use std::collections::BTreeMap;

use ctp_core::context::{augment, build_context, build_protection_plan};
use ctp_core::embed::{skipgram_loss, PairBatch, PairEntry};
use ctp_core::episode::{sample_pretrain_episode, CentroidSet, TaskKind};
use ctp_core::graph::{gen_planted_partition, Graph};
use ctp_core::objectives::{attr_loss, ce_loss, orth_loss, total_loss};
use ctp_core::prompt::{
    build_prompt_graph, encode_context, init_prompt_params, input_embedding, refine_and_score,
};
use ctp_core::tensor::layers::{sage_layer, typed_attention_layer, AttentionVars};
use ctp_core::tensor::{BoundParams, ParamSet, Tape, Tensor, Topology, Var};

const PROBES: usize = 20;

/// Gradient-check one single-input op: `build` maps the leaf var to a
/// var whose `sum_all` (after squaring to make reductions non-trivial)
/// serves as the loss.
fn check_unary_op(
    name: &str,
    input: Tensor<f64>,
    build: impl Fn(Var<'_, f64>) -> Var<'_, f64>,
) {
    let forward = |t: &Tensor<f64>| -> f64 {
        let tape = Tape::new();
        let x = tape.leaf(&t.clone().with_grad());
        let out = build(x);
        out.mul(out).unwrap().sum_all().unwrap().value().item()
    };
    let tape = Tape::new();
    let x = tape.leaf(&input.clone().with_grad());
    let out = build(x);
    let loss = out.mul(out).unwrap().sum_all().unwrap();
    tape.backward(loss).unwrap();
    let analytic = tape.grad(x).unwrap();
    check_grad(name, &input, &analytic, PROBES, 0xA11CE, forward);
}

pub fn elementwise_and_reduction_ops() {
    check_unary_op("relu", random_tensor(4, 5, 1), |x| x.relu().unwrap());
    check_unary_op("leaky_relu", random_tensor(4, 5, 2), |x| {
        x.leaky_relu(0.2).unwrap()
    });
    check_unary_op("sigmoid", random_tensor(4, 5, 3), |x| x.sigmoid().unwrap());
    check_unary_op("log_sigmoid", random_tensor(4, 5, 4), |x| {
        x.log_sigmoid().unwrap()
    });
    check_unary_op("log", random_tensor(4, 5, 5).map(|v| v.abs() + 0.5), |x| {
        x.log().unwrap()
    });
    check_unary_op("softmax_rows", random_tensor(4, 5, 6), |x| {
        x.softmax_rows().unwrap()
    });
    check_unary_op("l2_normalize_rows", random_tensor(4, 5, 7), |x| {
        x.l2_normalize_rows().unwrap()
    });
    check_unary_op("mean_rows", random_tensor(4, 5, 8), |x| x.mean_rows().unwrap());
    check_unary_op("max_rows", random_tensor(4, 5, 9), |x| x.max_rows().unwrap());
    check_unary_op("row_sums", random_tensor(4, 5, 10), |x| x.row_sums().unwrap());
    check_unary_op("mean_all", random_tensor(4, 5, 11), |x| x.mean_all().unwrap());
    check_unary_op("scale", random_tensor(4, 5, 12), |x| x.scale(1.7).unwrap());
    check_unary_op("transpose", random_tensor(4, 5, 13), |x| x.transpose().unwrap());
    check_unary_op("gather_rows", random_tensor(5, 3, 14), |x| {
        x.gather_rows(&[0, 2, 2, 4]).unwrap()
    });
    check_unary_op("scatter_sum", random_tensor(5, 3, 15), |x| {
        x.scatter_sum(&[0, 1, 1, 3, 3], 4).unwrap()
    });
    check_unary_op("dropout", random_tensor(6, 6, 16), |x| {
        x.dropout(0.4, 99).unwrap()
    });
    check_unary_op("segment_softmax", random_tensor(6, 1, 17), |x| {
        x.segment_softmax(&[0, 0, 1, 1, 1, 2]).unwrap()
    });
}

pub fn binary_op_gradients_flow_to_both_sides() {
    let a0 = random_tensor(3, 4, 20);
    let b0 = random_tensor(4, 2, 21);

    // matmul w.r.t. both operands
    let forward = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
        let tape = Tape::new();
        let av = tape.leaf(&a.clone().with_grad());
        let bv = tape.leaf(&b.clone().with_grad());
        let out = av.matmul(bv).unwrap();
        out.mul(out).unwrap().sum_all().unwrap().value().item()
    };
    let tape = Tape::new();
    let av = tape.leaf(&a0.clone().with_grad());
    let bv = tape.leaf(&b0.clone().with_grad());
    let out = av.matmul(bv).unwrap();
    let loss = out.mul(out).unwrap().sum_all().unwrap();
    tape.backward(loss).unwrap();
    check_grad("matmul/a", &a0, &tape.grad(av).unwrap(), PROBES, 22, |t| forward(t, &b0));
    check_grad("matmul/b", &b0, &tape.grad(bv).unwrap(), PROBES, 23, |t| forward(&a0, t));

    // add, sub, mul, broadcasts, concat, cosine
    type Combine = for<'a> fn(Var<'a, f64>, Var<'a, f64>) -> Var<'a, f64>;
    let cases: Vec<(&str, (usize, usize), (usize, usize), Combine)> = vec![
        ("add", (3, 4), (3, 4), |a, b| a.add(b).unwrap()),
        ("sub", (3, 4), (3, 4), |a, b| a.sub(b).unwrap()),
        ("mul", (3, 4), (3, 4), |a, b| a.mul(b).unwrap()),
        ("add_row_broadcast", (3, 4), (1, 4), |a, b| {
            a.add_row_broadcast(b).unwrap()
        }),
        ("mul_col_broadcast", (3, 4), (3, 1), |a, b| {
            a.mul_col_broadcast(b).unwrap()
        }),
        ("concat_rows", (2, 4), (3, 4), |a, b| {
            Var::concat_rows(a.tape(), &[a, b]).unwrap()
        }),
        ("concat_cols", (3, 2), (3, 4), |a, b| {
            Var::concat_cols(a.tape(), &[a, b]).unwrap()
        }),
        ("cosine_rows", (3, 4), (2, 4), |a, b| a.cosine_rows(b).unwrap()),
    ];
    for (name, sa, sb, combine) in cases {
        let a0 = random_tensor(sa.0, sa.1, 31);
        let b0 = random_tensor(sb.0, sb.1, 32);
        let forward = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let tape = Tape::new();
            let av = tape.leaf(&a.clone().with_grad());
            let bv = tape.leaf(&b.clone().with_grad());
            let out = combine(av, bv);
            out.mul(out).unwrap().sum_all().unwrap().value().item()
        };
        let tape = Tape::new();
        let av = tape.leaf(&a0.clone().with_grad());
        let bv = tape.leaf(&b0.clone().with_grad());
        let out = combine(av, bv);
        let loss = out.mul(out).unwrap().sum_all().unwrap();
        tape.backward(loss).unwrap();
        check_grad(&format!("{name}/a"), &a0, &tape.grad(av).unwrap(), PROBES, 33, |t| {
            forward(t, &b0)
        });
        check_grad(&format!("{name}/b"), &b0, &tape.grad(bv).unwrap(), PROBES, 34, |t| {
            forward(&a0, t)
        });
    }
}

pub fn sage_layer_matches_finite_differences() {
    let feats = random_tensor(6, 3, 40);
    let w_self = random_tensor(3, 4, 41);
    let w_neigh = random_tensor(3, 4, 42);
    let edges = vec![(0usize, 1usize), (1, 0), (1, 2), (2, 1), (3, 4), (4, 3), (2, 5), (5, 2)];

    let forward = |f: &Tensor<f64>, ws: &Tensor<f64>, wn: &Tensor<f64>| -> f64 {
        let tape = Tape::new();
        let fv = tape.leaf(&f.clone().with_grad());
        let wsv = tape.leaf(&ws.clone().with_grad());
        let wnv = tape.leaf(&wn.clone().with_grad());
        let out = sage_layer(fv, &edges, 6, wsv, wnv).unwrap();
        out.mul(out).unwrap().sum_all().unwrap().value().item()
    };
    let tape = Tape::new();
    let fv = tape.leaf(&feats.clone().with_grad());
    let wsv = tape.leaf(&w_self.clone().with_grad());
    let wnv = tape.leaf(&w_neigh.clone().with_grad());
    let out = sage_layer(fv, &edges, 6, wsv, wnv).unwrap();
    let loss = out.mul(out).unwrap().sum_all().unwrap();
    tape.backward(loss).unwrap();
    check_grad("sage/feats", &feats, &tape.grad(fv).unwrap(), PROBES, 43, |t| {
        forward(t, &w_self, &w_neigh)
    });
    check_grad("sage/w_self", &w_self, &tape.grad(wsv).unwrap(), PROBES, 44, |t| {
        forward(&feats, t, &w_neigh)
    });
    check_grad("sage/w_neigh", &w_neigh, &tape.grad(wnv).unwrap(), PROBES, 45, |t| {
        forward(&feats, &w_self, t)
    });
}

pub fn typed_attention_matches_finite_differences() {
    let d = 4;
    let states = random_tensor(5, d, 50);
    let names = ["w_src", "w_dst", "w_val", "att", "etype"];
    let tensors = [
        random_tensor(d, d, 51),
        random_tensor(d, d, 52),
        random_tensor(d, d, 53),
        random_tensor(3 * d, 1, 54),
        random_tensor(3, d, 55),
    ];
    let edges = vec![(0usize, 0usize, 1usize), (2, 1, 1), (3, 2, 4), (1, 0, 4), (4, 1, 0)];

    let run = |states_t: &Tensor<f64>, ts: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let sv = tape.leaf(&states_t.clone().with_grad());
        let params = AttentionVars {
            w_src: tape.leaf(&ts[0].clone().with_grad()),
            w_dst: tape.leaf(&ts[1].clone().with_grad()),
            w_val: tape.leaf(&ts[2].clone().with_grad()),
            att: tape.leaf(&ts[3].clone().with_grad()),
            etype_emb: tape.leaf(&ts[4].clone().with_grad()),
        };
        let out = typed_attention_layer(sv, &edges, &params).unwrap();
        out.mul(out).unwrap().sum_all().unwrap().value().item()
    };

    let tape = Tape::new();
    let sv = tape.leaf(&states.clone().with_grad());
    let vars = [
        tape.leaf(&tensors[0].clone().with_grad()),
        tape.leaf(&tensors[1].clone().with_grad()),
        tape.leaf(&tensors[2].clone().with_grad()),
        tape.leaf(&tensors[3].clone().with_grad()),
        tape.leaf(&tensors[4].clone().with_grad()),
    ];
    let params = AttentionVars {
        w_src: vars[0],
        w_dst: vars[1],
        w_val: vars[2],
        att: vars[3],
        etype_emb: vars[4],
    };
    let out = typed_attention_layer(sv, &edges, &params).unwrap();
    let loss = out.mul(out).unwrap().sum_all().unwrap();
    tape.backward(loss).unwrap();

    check_grad("attn/states", &states, &tape.grad(sv).unwrap(), PROBES, 56, |t| {
        run(t, &tensors)
    });
    for i in 0..5 {
        let analytic = tape.grad(vars[i]).unwrap();
        check_grad(
            &format!("attn/{}", names[i]),
            &tensors[i],
            &analytic,
            PROBES,
            57 + i as u64,
            |t| {
                let mut ts = tensors.clone();
                ts[i] = t.clone();
                run(&states, &ts)
            },
        );
    }
}

pub fn loss_terms_match_finite_differences() {
    // skip-gram
    let emb = random_tensor(8, 5, 60);
    let batch = PairBatch {
        entries: vec![
            PairEntry { u: 0, v: 3, negatives: vec![5, 6] },
            PairEntry { u: 2, v: 1, negatives: vec![7, 4] },
            PairEntry { u: 6, v: 6, negatives: vec![0, 2] },
        ],
    };
    let forward = |t: &Tensor<f64>| -> f64 {
        let tape = Tape::new();
        let e = tape.leaf(&t.clone().with_grad());
        skipgram_loss(e, &batch).unwrap().value().item()
    };
    let tape = Tape::new();
    let e = tape.leaf(&emb.clone().with_grad());
    let loss = skipgram_loss(e, &batch).unwrap();
    tape.backward(loss).unwrap();
    check_grad("skipgram", &emb, &tape.grad(e).unwrap(), PROBES, 61, forward);

    // cross-entropy over logits
    let logits = random_tensor(6, 3, 62);
    let truth = vec![0usize, 2, 1, 1, 0, 2];
    let forward = |t: &Tensor<f64>| -> f64 {
        let tape = Tape::new();
        let l = tape.leaf(&t.clone().with_grad());
        ce_loss(l, &truth).unwrap().value().item()
    };
    let tape = Tape::new();
    let l = tape.leaf(&logits.clone().with_grad());
    let loss = ce_loss(l, &truth).unwrap();
    tape.backward(loss).unwrap();
    check_grad("ce", &logits, &tape.grad(l).unwrap(), PROBES, 63, forward);

    // orthogonality penalty
    let labels = random_tensor(4, 6, 64);
    let forward = |t: &Tensor<f64>| -> f64 {
        let tape = Tape::new();
        let l = tape.leaf(&t.clone().with_grad());
        orth_loss(l).unwrap().value().item()
    };
    let tape = Tape::new();
    let lv = tape.leaf(&labels.clone().with_grad());
    let loss = orth_loss(lv).unwrap();
    tape.backward(loss).unwrap();
    check_grad("orth", &labels, &tape.grad(lv).unwrap(), PROBES, 65, forward);

    // attribute reconstruction
    let pred = random_tensor(3, 4, 66);
    let orig = random_tensor(3, 4, 67);
    let forward = |t: &Tensor<f64>| -> f64 {
        let tape = Tape::new();
        let p = tape.leaf(&t.clone().with_grad());
        attr_loss(&tape, &[(p, orig.clone())]).unwrap().value().item()
    };
    let tape = Tape::new();
    let p = tape.leaf(&pred.clone().with_grad());
    let loss = attr_loss(&tape, &[(p, orig.clone())]).unwrap();
    tape.backward(loss).unwrap();
    check_grad("attr", &pred, &tape.grad(p).unwrap(), PROBES, 68, forward);
}

/// The fixed tiny episode of the acceptance gate: m=3, s=2, n=2, d=8,
/// 10-node contexts, full total loss, every parameter checked.
pub fn end_to_end_total_loss_matches_finite_differences() {
    let (graph, contexts, episode) = tiny_episode();
    let topo = Topology {
        d_in: graph.feature_dim(),
        d: 8,
        prompt_etypes: 3,
        heads: 1,
    };
    let params = init_prompt_params(&topo, 1234).to_f64();

    let loss_of = |ps: &ParamSet<f64>| -> f64 {
        episode_total_loss(ps, &contexts, &episode)
    };

    let (grads, loss0) = episode_grads(&params, &contexts, &episode);
    assert!(loss0.is_finite());
    check_param_grads("end_to_end", &params, &grads, 10, 0xE2E, loss_of);
}

/// The same end-to-end check in 32-bit mode at the coarser tolerance.
pub fn end_to_end_total_loss_f32_tolerance() {
    let (graph, contexts, episode) = tiny_episode();
    let topo = Topology {
        d_in: graph.feature_dim(),
        d: 8,
        prompt_etypes: 3,
        heads: 1,
    };
    let params64 = init_prompt_params(&topo, 1234).to_f64();
    let (grads64, _) = episode_grads(&params64, &contexts, &episode);

    // 32-bit analytic gradients against the 64-bit reference.
    let params32 = params64.to_f32();
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, &params32);
    let loss = episode_loss_var(&tape, &bound, &contexts, &episode);
    tape.backward(loss).unwrap();
    let grads32 = bound.grads(&tape);
    for (name, g64) in &grads64 {
        let g32 = &grads32[name];
        for i in 0..g64.rows() {
            for j in 0..g64.cols() {
                let a = g64.get(i, j);
                let b = g32.get(i, j) as f64;
                let err = super::rel_err(a, b);
                assert!(err < 1e-3, "{name}[{i},{j}]: f64 {a:.4e} vs f32 {b:.4e} ({err:.2e})");
            }
        }
    }
}

type TinyEpisode = (Graph, Vec<ctp_core::context::ContextGraph>, ctp_core::episode::Episode);

fn tiny_episode() -> TinyEpisode {
    let graph = gen_planted_partition(3, 12, 0.35, 0.05, 4, 1.0, 77).unwrap();
    let centroids = CentroidSet {
        nodes: vec![2, 14, 26, 5, 20, 33],
        from_cluster: vec![false; 6],
        alpha: 0.0,
        k: 0,
    };
    let pe = sample_pretrain_episode(
        &graph,
        &centroids,
        0,
        6,
        3, // m
        2, // s
        2, // n
        1,
        Some(9), // 10-node contexts
        TaskKind::Node,
        4242,
    )
    .unwrap();
    let mut contexts = Vec::new();
    for (i, x) in pe.episode.support.iter().chain(&pe.episode.queries).enumerate() {
        let slot = if i < 6 { i / 2 } else { (i - 6) / 2 };
        let origin = &pe.origins[slot];
        let ctx = build_context(&graph, *x, 1, Some(9), 1000 + i as u64).unwrap();
        let plan = build_protection_plan(
            &origin.subgraph,
            &origin.example_nodes,
            &origin.query_nodes,
            0.3,
            2000 + slot as u64,
        )
        .unwrap();
        contexts.push(augment(&ctx, &plan, 0.15, 0.3, 3000 + i as u64).unwrap());
    }
    (graph, contexts, pe.episode)
}

fn episode_loss_var<'t, T: ctp_core::tensor::Real>(
    tape: &'t Tape<T>,
    bound: &BoundParams<'t, T>,
    contexts: &[ctp_core::context::ContextGraph],
    episode: &ctp_core::episode::Episode,
) -> Var<'t, T> {
    let mut embs = Vec::new();
    let mut attr_items = Vec::new();
    for ctx in contexts {
        let out = encode_context(tape, ctx, bound, None).unwrap();
        if let (Some(pred), Some(orig)) = (out.attr_pred, ctx.masked_original_matrix()) {
            let orig_t = Tensor::new(
                orig.rows(),
                orig.cols(),
                orig.data().iter().map(|&v| T::from_f64(v as f64)).collect(),
            );
            attr_items.push((pred, orig_t));
        }
        embs.push(input_embedding(ctx, &out, bound).unwrap());
    }
    let n_support = episode.support.len();
    let ex = Var::concat_rows(tape, &embs[..n_support]).unwrap();
    let qu = Var::concat_rows(tape, &embs[n_support..]).unwrap();
    let pg = build_prompt_graph(ex, qu, &episode.classes, episode.shots, episode.queries_per_class)
        .unwrap();
    let score = refine_and_score(&pg, bound).unwrap();
    let ce = ce_loss(score.logits.scale(T::from_f64(5.0)).unwrap(), &episode.query_slots()).unwrap();
    let orth = orth_loss(score.refined_labels).unwrap();
    let attr = attr_loss(tape, &attr_items).unwrap();
    let (tot, _) = total_loss(ce, orth, attr, 0.3).unwrap();
    tot
}

fn episode_total_loss(
    params: &ParamSet<f64>,
    contexts: &[ctp_core::context::ContextGraph],
    episode: &ctp_core::episode::Episode,
) -> f64 {
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, params);
    episode_loss_var(&tape, &bound, contexts, episode).value().item()
}

fn episode_grads(
    params: &ParamSet<f64>,
    contexts: &[ctp_core::context::ContextGraph],
    episode: &ctp_core::episode::Episode,
) -> (BTreeMap<String, Tensor<f64>>, f64) {
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, params);
    let loss = episode_loss_var(&tape, &bound, contexts, episode);
    let value = loss.value().item();
    tape.backward(loss).unwrap();
    (bound.grads(&tape), value)
}

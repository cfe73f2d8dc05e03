//! The prompt network: context encoding, pair-input projection,
//! averaged label-node initialization, prompt-graph assembly, typed
//! attention refinement, and cosine scoring.

use rand_chacha::ChaCha8Rng;

use crate::context::ContextGraph;
use crate::error::{Error, Result};
use crate::graph::ClassId;
use crate::tensor::layers::{sage_layer, typed_attention_layer, xavier_uniform, AttentionVars};
use crate::tensor::{BoundParams, ParamSet, Real, Tape, Tensor, Topology, Var};

/// Prompt-graph edge types: example-to-own-label, example-to-other-label,
/// query-to-label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptEdgeKind {
    Match = 0,
    NonMatch = 1,
    Query = 2,
}

pub const PROMPT_ETYPES: usize = 3;

/// Fresh prompt-model parameters for the given topology. Names are
/// stable; their lexicographic order defines the checkpoint layout.
pub fn init_prompt_params(topology: &Topology, seed: u64) -> ParamSet<f32> {
    let mut rng = rand::SeedableRng::seed_from_u64(seed);
    let rng: &mut ChaCha8Rng = &mut rng;
    let (d_in, d) = (topology.d_in, topology.d);
    let mut ps = ParamSet::new(topology.clone());
    ps.insert("init_gnn.w_self", xavier_uniform(d_in, d, rng));
    ps.insert("init_gnn.w_neigh", xavier_uniform(d_in, d, rng));
    ps.insert("pair_agg.w_self", xavier_uniform(d, d, rng));
    ps.insert("pair_agg.w_neigh", xavier_uniform(d, d, rng));
    ps.insert("pair.proj", xavier_uniform(3 * d, d, rng));
    ps.insert("pair.bias", Tensor::zeros(1, d).with_grad());
    ps.insert("attr_mlp.w1", xavier_uniform(d, d, rng));
    ps.insert("attr_mlp.b1", Tensor::zeros(1, d).with_grad());
    ps.insert("attr_mlp.w2", xavier_uniform(d, d_in, rng));
    ps.insert("attr_mlp.b2", Tensor::zeros(1, d_in).with_grad());
    ps.insert("ref_attn.w_src", xavier_uniform(d, d, rng));
    ps.insert("ref_attn.w_dst", xavier_uniform(d, d, rng));
    // Zero-initialized value path: refinement starts as the identity
    // and grows only where the loss asks for it.
    ps.insert("ref_attn.w_val", Tensor::zeros(d, d).with_grad());
    ps.insert("ref_attn.att", Tensor::zeros(3 * d, 1).with_grad());
    ps.insert("ref_attn.etype", xavier_uniform(PROMPT_ETYPES, d, rng));
    ps
}

/// Context encoding result: per-node embeddings, target positions, and
/// attribute reconstructions for masked nodes.
pub struct EncoderOutput<'t, T: Real> {
    pub node_embs: Var<'t, T>,
    pub target_locals: Vec<usize>,
    /// MLP(E_v) for masked nodes, row-aligned with `masked_locals`.
    pub attr_pred: Option<Var<'t, T>>,
    pub masked_locals: Vec<usize>,
}

/// One GraphSAGE layer over the context's local features and edges.
/// `dropout` (rate, seed) applies to node embeddings during training;
/// rate 0 is the identity.
pub fn encode_context<'t, T: Real>(
    tape: &'t Tape<T>,
    ctx: &ContextGraph,
    bound: &BoundParams<'t, T>,
    dropout: Option<(f64, u64)>,
) -> Result<EncoderOutput<'t, T>> {
    let n = ctx.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty context graph".to_string()));
    }
    let feats = tape.constant(convert(&ctx.features));
    let mut embs = sage_layer(
        feats,
        &ctx.agg_edges(),
        n,
        bound.get("init_gnn.w_self")?,
        bound.get("init_gnn.w_neigh")?,
    )?;
    if let Some((rate, seed)) = dropout {
        if rate > 0.0 {
            embs = embs.dropout(rate, seed)?;
        }
    }
    let masked_locals = ctx.masked_locals();
    let attr_pred = if masked_locals.is_empty() {
        None
    } else {
        let hidden = embs
            .gather_rows(&masked_locals)?
            .matmul(bound.get("attr_mlp.w1")?)?
            .add_row_broadcast(bound.get("attr_mlp.b1")?)?
            .relu()?;
        Some(
            hidden
                .matmul(bound.get("attr_mlp.w2")?)?
                .add_row_broadcast(bound.get("attr_mlp.b2")?)?,
        )
    };
    Ok(EncoderOutput {
        node_embs: embs,
        target_locals: ctx.target_locals(),
        attr_pred,
        masked_locals,
    })
}

fn convert<T: Real>(t: &Tensor<f32>) -> Tensor<T> {
    Tensor::new(
        t.rows(),
        t.cols(),
        t.data().iter().map(|&v| T::from_f64(v as f64)).collect(),
    )
}

/// d-dimensional embedding of one input from its encoded context:
/// the target row for node inputs, the 3d->d projection of
/// (target1, target2, max-pool) for pair inputs after a second
/// aggregation pass over the targets.
pub fn input_embedding<'t, T: Real>(
    ctx: &ContextGraph,
    out: &EncoderOutput<'t, T>,
    bound: &BoundParams<'t, T>,
) -> Result<Var<'t, T>> {
    match out.target_locals.len() {
        1 => out.node_embs.gather_rows(&[out.target_locals[0]]),
        2 => project_pair(ctx, out, bound),
    n => Err(Error::InvalidArgument(format!(
            "expected 1 or 2 targets, got {n}"
        ))),
    }
}

/// `W^T (h_v1 || h_v2 || h_max) + b` with a second sage aggregation
/// applied to the targets first and column-wise max pooling over the
/// whole context.
pub fn project_pair<'t, T: Real>(
    ctx: &ContextGraph,
    out: &EncoderOutput<'t, T>,
    bound: &BoundParams<'t, T>,
) -> Result<Var<'t, T>> {
    if out.target_locals.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "pair projection needs exactly 2 targets, got {}",
            out.target_locals.len()
        )));
    }
    let second = sage_layer(
        out.node_embs,
        &ctx.agg_edges(),
        ctx.len(),
        bound.get("pair_agg.w_self")?,
        bound.get("pair_agg.w_neigh")?,
    )?;
    let h_v1 = second.gather_rows(&[out.target_locals[0]])?;
    let h_v2 = second.gather_rows(&[out.target_locals[1]])?;
    let h_max = out.node_embs.max_rows()?;
    let tape = h_v1.tape();
    let cat = Var::concat_cols(tape, &[h_v1, h_v2, h_max])?;
    cat.matmul(bound.get("pair.proj")?)?
        .add_row_broadcast(bound.get("pair.bias")?)
}

/// Label-node initialization: row c is the mean of class c's example
/// embeddings. Examples are slot-major with `shots` per class.
pub fn init_labels<'t, T: Real>(
    example_embs: Var<'t, T>,
    m: usize,
    shots: usize,
) -> Result<Var<'t, T>> {
    if m == 0 || shots == 0 {
        return Err(Error::InvalidArgument("empty class or shot count".to_string()));
    }
    if example_embs.rows() != m * shots {
        return Err(Error::ShapeMismatch {
            op: "init_labels",
            detail: format!("{} example rows for {m} classes x {shots} shots", example_embs.rows()),
        });
    }
    let inv = T::from_f64(1.0 / shots as f64);
    let mut data = vec![T::ZERO; m * m * shots];
    for c in 0..m {
        for i in 0..shots {
            data[c * (m * shots) + c * shots + i] = inv;
        }
    }
    let avg = example_embs.tape().constant(Tensor::new(m, m * shots, data));
    avg.matmul(example_embs)
}

/// Bipartite prompt structure: context embeddings linked to label
/// embeddings by typed edges. Messages flow both directions over every
/// edge during refinement.
pub struct PromptGraph<'t, T: Real> {
    pub example_embs: Var<'t, T>,
    pub query_embs: Var<'t, T>,
    pub label_embs: Var<'t, T>,
    /// (context row, kind, label row); context rows index examples
    /// first, then queries.
    pub edges: Vec<(usize, PromptEdgeKind, usize)>,
    pub classes: Vec<ClassId>,
    pub shots: usize,
    pub queries_per_class: usize,
}

/// Wire the prompt graph: every example gets one MATCH edge to its own
/// class's label node and NONMATCH edges to the others; every query
/// gets a QUERY edge to each label node. Label rows come from
/// [`init_labels`].
pub fn build_prompt_graph<'t, T: Real>(
    example_embs: Var<'t, T>,
    query_embs: Var<'t, T>,
    classes: &[ClassId],
    shots: usize,
    queries_per_class: usize,
) -> Result<PromptGraph<'t, T>> {
    let m = classes.len();
    if example_embs.rows() != m * shots || query_embs.rows() != m * queries_per_class {
        return Err(Error::ShapeMismatch {
            op: "build_prompt_graph",
            detail: format!(
                "{} examples, {} queries for m={m}, s={shots}, n={queries_per_class}",
                example_embs.rows(),
                query_embs.rows()
            ),
        });
    }
    let label_embs = init_labels(example_embs, m, shots)?;
    let n_ex = m * shots;
    let mut edges = Vec::new();
    for e in 0..n_ex {
        let own = e / shots;
        for c in 0..m {
            let kind = if c == own {
                PromptEdgeKind::Match
            } else {
                PromptEdgeKind::NonMatch
            };
            edges.push((e, kind, c));
        }
    }
    for q in 0..m * queries_per_class {
        for c in 0..m {
            edges.push((n_ex + q, PromptEdgeKind::Query, c));
        }
    }
    Ok(PromptGraph {
        example_embs,
        query_embs,
        label_embs,
        edges,
        classes: classes.to_vec(),
        shots,
        queries_per_class,
    })
}

pub struct ScoreOutput<'t, T: Real> {
    /// Cosine logits, one row per query, one column per class slot.
    pub logits: Var<'t, T>,
    pub refined_labels: Var<'t, T>,
    pub refined_queries: Var<'t, T>,
}

/// One typed-attention pass over the prompt graph, then cosine
/// similarity of each refined query against each refined label.
pub fn refine_and_score<'t, T: Real>(
    pg: &PromptGraph<'t, T>,
    bound: &BoundParams<'t, T>,
) -> Result<ScoreOutput<'t, T>> {
    let m = pg.classes.len();
    let n_ex = pg.example_embs.rows();
    let n_qu = pg.query_embs.rows();
    let tape = pg.example_embs.tape();
    let states = Var::concat_rows(tape, &[pg.example_embs, pg.query_embs, pg.label_embs])?;

    let label_base = n_ex + n_qu;
    let mut typed_edges = Vec::with_capacity(pg.edges.len() * 2);
    for &(ctx, kind, label) in &pg.edges {
        let etype = kind as usize;
        typed_edges.push((ctx, etype, label_base + label));
        typed_edges.push((label_base + label, etype, ctx));
    }

    let params = AttentionVars {
        w_src: bound.get("ref_attn.w_src")?,
        w_dst: bound.get("ref_attn.w_dst")?,
        w_val: bound.get("ref_attn.w_val")?,
        att: bound.get("ref_attn.att")?,
        etype_emb: bound.get("ref_attn.etype")?,
    };
    let refined = typed_attention_layer(states, &typed_edges, &params)?;

    let query_rows: Vec<usize> = (n_ex..n_ex + n_qu).collect();
    let label_rows: Vec<usize> = (label_base..label_base + m).collect();
    let refined_queries = refined.gather_rows(&query_rows)?;
    let refined_labels = refined.gather_rows(&label_rows)?;
    let logits = refined_queries.cosine_rows(refined_labels)?;
    Ok(ScoreOutput {
        logits,
        refined_labels,
        refined_queries,
    })
}

/// Argmax per query row; ties resolve to the lowest class index.
pub fn predict<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

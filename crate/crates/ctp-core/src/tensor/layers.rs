//! Neural layers composed from tape primitives: GraphSAGE-style
//! convolution and edge-typed attention message passing.

#![allow(clippy::needless_range_loop)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::Var;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Negative slope of the leaky-relu in attention scores.
pub const ATTN_LEAKY_SLOPE: f64 = 0.2;

/// Mean over in-neighbors per node: `out[v] = mean_{(u,v) in edges} x[u]`.
/// Nodes with no incoming edge get a zero row.
pub fn neighbor_mean<'t, T: Real>(
    x: Var<'t, T>,
    edges: &[(usize, usize)],
    n_nodes: usize,
) -> Result<Var<'t, T>> {
    let tape = x.tape();
    let srcs: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let dsts: Vec<usize> = edges.iter().map(|e| e.1).collect();
    let mut deg = vec![0usize; n_nodes];
    for &d in &dsts {
        if d >= n_nodes {
            return Err(Error::IndexOutOfBounds {
                op: "neighbor_mean",
                index: d,
                bound: n_nodes,
            });
        }
        deg[d] += 1;
    }
    let inv_deg = Tensor::new(
        n_nodes,
        1,
        deg.iter()
            .map(|&d| {
                if d == 0 {
                    T::ZERO
                } else {
                    T::from_f64(1.0 / d as f64)
                }
            })
            .collect(),
    );
    let gathered = x.gather_rows(&srcs)?;
    let summed = gathered.scatter_sum(&dsts, n_nodes)?;
    summed.mul_col_broadcast(tape.constant(inv_deg))
}

/// One GraphSAGE layer with mean aggregation:
/// `out_v = relu(x_v W_self + mean_{u in N(v)} x_u W_neigh)`.
///
/// `edges` are directed aggregation edges; pass both directions for an
/// undirected graph. Isolated nodes use a zero neighbor term.
pub fn sage_layer<'t, T: Real>(
    x: Var<'t, T>,
    edges: &[(usize, usize)],
    n_nodes: usize,
    w_self: Var<'t, T>,
    w_neigh: Var<'t, T>,
) -> Result<Var<'t, T>> {
    if x.rows() != n_nodes {
        return Err(Error::ShapeMismatch {
            op: "sage_layer",
            detail: format!("{} feature rows for {} nodes", x.rows(), n_nodes),
        });
    }
    let own = x.matmul(w_self)?;
    let agg = neighbor_mean(x, edges, n_nodes)?.matmul(w_neigh)?;
    own.add(agg)?.relu()
}

/// Parameters of one edge-typed attention layer, as tape vars.
pub struct AttentionVars<'t, T: Real> {
    pub w_src: Var<'t, T>,
    pub w_dst: Var<'t, T>,
    pub w_val: Var<'t, T>,
    /// Score vector over `[W_src h_src || W_dst h_dst || e_type]`.
    pub att: Var<'t, T>,
    /// One learned embedding row per edge type.
    pub etype_emb: Var<'t, T>,
}

/// Edge-typed single-head attention with a residual self term.
///
/// Per directed edge (src, etype, dst), the score is
/// `leaky_relu(att^T [W_src h_src || W_dst h_dst || e_type])`; incoming
/// scores are softmax-normalized per destination and weight the
/// value-projected source states. Nodes with no incoming edges pass
/// through unchanged.
pub fn typed_attention_layer<'t, T: Real>(
    states: Var<'t, T>,
    edges: &[(usize, usize, usize)],
    params: &AttentionVars<'t, T>,
) -> Result<Var<'t, T>> {
    let n = states.rows();
    let etype_count = params.etype_emb.rows();
    for &(src, etype, dst) in edges {
        if etype >= etype_count {
            return Err(Error::UnknownEdgeType {
                etype,
                count: etype_count,
            });
        }
        if src >= n || dst >= n {
            return Err(Error::IndexOutOfBounds {
                op: "typed_attention_layer",
                index: src.max(dst),
                bound: n,
            });
        }
    }
    if edges.is_empty() {
        return Ok(states);
    }
    let tape = states.tape();

    // Segment softmax needs incoming edges grouped per destination.
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by_key(|&i| edges[i].2);
    let srcs: Vec<usize> = order.iter().map(|&i| edges[i].0).collect();
    let etys: Vec<usize> = order.iter().map(|&i| edges[i].1).collect();
    let dsts: Vec<usize> = order.iter().map(|&i| edges[i].2).collect();

    let h_src = states.gather_rows(&srcs)?;
    let h_dst = states.gather_rows(&dsts)?;
    let e_emb = params.etype_emb.gather_rows(&etys)?;

    let score_in = Var::concat_cols(
        tape,
        &[h_src.matmul(params.w_src)?, h_dst.matmul(params.w_dst)?, e_emb],
    )?;
    let scores = score_in
        .matmul(params.att)?
        .leaky_relu(T::from_f64(ATTN_LEAKY_SLOPE))?;
    let weights = scores.segment_softmax(&dsts)?;

    let messages = h_src.matmul(params.w_val)?.mul_col_broadcast(weights)?;
    let agg = messages.scatter_sum(&dsts, n)?;
    states.add(agg)
}

/// Xavier/Glorot uniform initialization.
pub fn xavier_uniform<T: Real>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(rows, cols, data).with_grad()
}

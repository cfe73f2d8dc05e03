//! The three training objectives and their weighted combination:
//! cross-entropy over cosine logits, the orthogonality penalty on label
//! embeddings, and attribute reconstruction for masked nodes.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Reported values of one training step.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub orth: f64,
    pub attr: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Mean over queries of `-log softmax(logits)[truth]`.
pub fn ce_loss<'t, T: Real>(logits: Var<'t, T>, truth_slots: &[usize]) -> Result<Var<'t, T>> {
    let (rows, cols) = (logits.rows(), logits.cols());
    if truth_slots.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "ce_loss",
            detail: format!("{rows} logit rows but {} labels", truth_slots.len()),
        });
    }
    let mut onehot = vec![T::ZERO; rows * cols];
    for (i, &c) in truth_slots.iter().enumerate() {
        if c >= cols {
            return Err(Error::IndexOutOfBounds {
                op: "ce_loss",
                index: c,
                bound: cols,
            });
        }
        onehot[i * cols + c] = T::ONE;
    }
    let mask = logits.tape().constant(Tensor::new(rows, cols, onehot));
    logits
        .softmax_rows()?
        .mul(mask)?
        .row_sums()?
        .log()?
        .mean_all()?
        .scale(-T::ONE)
}

/// Sum of squared pairwise dot products of the L2-normalized label
/// rows over ordered pairs i != j. Zero rows normalize to zero.
pub fn orth_loss<'t, T: Real>(label_embs: Var<'t, T>) -> Result<Var<'t, T>> {
    let m = label_embs.rows();
    let normed = label_embs.l2_normalize_rows()?;
    let gram = normed.matmul(normed.transpose()?)?;
    let mut mask = vec![T::ONE; m * m];
    for i in 0..m {
        mask[i * m + i] = T::ZERO;
    }
    let mask = label_embs.tape().constant(Tensor::new(m, m, mask));
    gram.mul(gram)?.mul(mask)?.sum_all()
}

/// Attribute reconstruction: per context, the mean squared error
/// between original features and predictions over that context's
/// masked nodes; averaged over contexts that have masked nodes.
/// Contexts without masked nodes are excluded; an empty batch is 0.
pub fn attr_loss<'t, T: Real>(
    tape: &'t Tape<T>,
    items: &[(Var<'t, T>, Tensor<T>)],
) -> Result<Var<'t, T>> {
    let mut per_context: Option<Var<'t, T>> = None;
    let mut count = 0usize;
    for (pred, original) in items {
        if pred.rows() == 0 {
            continue;
        }
        if pred.rows() != original.rows() || pred.cols() != original.cols() {
            return Err(Error::ShapeMismatch {
                op: "attr_loss",
                detail: format!(
                    "{}x{} prediction vs {}x{} original",
                    pred.rows(),
                    pred.cols(),
                    original.rows(),
                    original.cols()
                ),
            });
        }
        let diff = pred.sub(tape.constant(original.clone()))?;
        let mse = diff.mul(diff)?.mean_all()?;
        per_context = Some(match per_context {
            None => mse,
            Some(acc) => acc.add(mse)?,
        });
        count += 1;
    }
    match per_context {
        None => Ok(tape.constant(Tensor::scalar(T::ZERO))),
        Some(sum) => sum.scale(T::from_f64(1.0 / count as f64)),
    }
}

/// `total = ce + lambda * orth + attr`, with the scalar values reported.
pub fn total_loss<'t, T: Real>(
    ce: Var<'t, T>,
    orth: Var<'t, T>,
    attr: Var<'t, T>,
    lambda: f64,
) -> Result<(Var<'t, T>, LossBreakdown)> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    let total = ce.add(orth.scale(T::from_f64(lambda))?)?.add(attr)?;
    let breakdown = LossBreakdown {
        ce: ce.value().item().to_f64(),
        orth: orth.value().item().to_f64(),
        attr: attr.value().item().to_f64(),
        total: total.value().item().to_f64(),
        lambda,
    };
    Ok((total, breakdown))
}

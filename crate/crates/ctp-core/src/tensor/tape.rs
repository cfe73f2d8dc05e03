//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records every forward op; [`Var`] is a cheap handle into it.
//! Calling [`Tape::backward`] once populates gradients for all leaves
//! created with `requires_grad`. Inference tapes skip gradient recording
//! entirely and refuse `backward`, so an evaluation pass cannot build
//! gradients by construction.

// Indexed loops are the house style in the numeric kernels, and the op
// vocabulary (add/sub/mul) intentionally mirrors tensor-library naming.
#![allow(clippy::needless_range_loop, clippy::should_implement_trait)]

use std::cell::{Cell, RefCell};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tensor, NORM_EPS};
use crate::error::{Error, Result};

type BackFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>>>;

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<usize>,
    back: Option<BackFn<T>>,
    needs_grad: bool,
}

/// Records a forward computation for one backward sweep.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
    recording: bool,
    done: Cell<bool>,
}

/// Handle to a tape node. Copyable; all ops go through the owning tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
    rows: usize,
    cols: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}[{}x{}]", self.id, self.rows, self.cols)
    }
}

impl<T: Real> Tape<T> {
    /// Tape that records backward functions for training.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            recording: true,
            done: Cell::new(false),
        }
    }

    /// Forward-only tape: no backward functions are stored and
    /// `backward` is an error. Used for evaluation.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            recording: false,
            done: Cell::new(false),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn push(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        needs_grad: bool,
        back: Option<BackFn<T>>,
    ) -> Var<'_, T> {
        let rows = value.rows();
        let cols = value.cols();
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let record = self.recording && needs_grad;
        nodes.push(Node {
            value,
            parents: if record { parents } else { Vec::new() },
            back: if record { back } else { None },
            needs_grad: record,
        });
        Var {
            tape: self,
            id,
            rows,
            cols,
        }
    }

    /// Leaf node; participates in gradients iff the tensor was marked
    /// with `requires_grad`.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        let needs = t.requires_grad();
        self.push(t.clone(), vec![], needs, None)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, vec![], false, None)
    }

    fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Run the backward sweep from a scalar loss. Errors if the loss is
    /// not 1x1, the tape is inference-only, backward already ran, or a
    /// non-finite gradient appears.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        if !self.recording {
            return Err(Error::Backward(
                "backward on an inference tape".to_string(),
            ));
        }
        if self.done.get() {
            return Err(Error::Backward(
                "backward already called on this tape; record a new forward pass".to_string(),
            ));
        }
        if loss.rows != 1 || loss.cols != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got {}x{}",
                loss.rows, loss.cols
            )));
        }
        self.done.set(true);

        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(T::ONE));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(grad_out) = grads[id].clone() else {
                continue;
            };
            let Some(back) = &node.back else { continue };
            let parent_grads = back(&grad_out);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[*pid].needs_grad {
                    continue;
                }
                if !pg.all_finite() {
                    return Err(Error::Backward("non-finite gradient".to_string()));
                }
                grads[*pid] = Some(match grads[*pid].take() {
                    None => pg,
                    Some(acc) => add_tensors(&acc, &pg),
                });
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the loss w.r.t. a leaf. Zero tensor if the leaf did
    /// not participate in the loss. `None` before `backward` ran or for
    /// non-grad nodes.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        if !self.done.get() {
            return None;
        }
        if !self.nodes.borrow()[var.id].needs_grad {
            return None;
        }
        Some(
            self.grads.borrow()[var.id]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(var.rows, var.cols)),
        )
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

fn add_tensors<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(a.rows(), b.rows());
    debug_assert_eq!(a.cols(), b.cols());
    Tensor::new(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect(),
    )
}

fn shape_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(Error::ShapeMismatch { op, detail })
}

impl<'t, T: Real> Var<'t, T> {
    pub fn rows(self) -> usize {
        self.rows
    }

    pub fn cols(self) -> usize {
        self.cols
    }

    pub fn value(self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn tape(self) -> &'t Tape<T> {
        self.tape
    }

    fn same_tape(self, other: Var<'t, T>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Backward(format!("{op}: operands from different tapes")))
        }
    }

    fn unary(
        self,
        op: &'static str,
        out: Tensor<T>,
        back: impl Fn(&Tensor<T>) -> Tensor<T> + 'static,
    ) -> Result<Var<'t, T>> {
        let out = out.check_finite(op)?;
        let needs = self.tape.nodes.borrow()[self.id].needs_grad;
        Ok(self.tape.push(
            out,
            vec![self.id],
            needs,
            Some(Box::new(move |g| vec![back(g)])),
        ))
    }

    /// Matrix product `self @ rhs`.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(rhs, "matmul")?;
        if self.cols != rhs.rows {
            return shape_err(
                "matmul",
                format!("{}x{} @ {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            );
        }
        let a = self.value();
        let b = rhs.value();
        let out = matmul_raw(&a, &b).check_finite("matmul")?;
        let needs = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].needs_grad || nodes[rhs.id].needs_grad
        };
        let (ac, bc) = (a.clone(), b.clone());
        Ok(self.tape.push(
            out,
            vec![self.id, rhs.id],
            needs,
            Some(Box::new(move |g| {
                vec![matmul_nt_raw(g, &bc), matmul_tn_raw(&ac, g)]
            })),
        ))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let v = self.value();
        let (r, c) = (v.rows(), v.cols());
        let mut data = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v.get(i, j);
            }
        }
        self.unary("transpose", Tensor::new(c, r, data), move |g| {
            let mut gd = vec![T::ZERO; r * c];
            for i in 0..c {
                for j in 0..r {
                    gd[j * c + i] = g.get(i, j);
                }
            }
            Tensor::new(r, c, gd)
        })
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_elementwise("add", rhs, |a, b| a + b, |g, _, _| g.clone(), |g, _, _| g.clone())
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_elementwise(
            "sub",
            rhs,
            |a, b| a - b,
            |g, _, _| g.clone(),
            |g, _, _| g.map(|v| -v),
        )
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_elementwise(
            "mul",
            rhs,
            |a, b| a * b,
            |g, _, b| elementwise(g, b, |x, y| x * y),
            |g, a, _| elementwise(g, a, |x, y| x * y),
        )
    }

    #[allow(clippy::type_complexity)]
    fn binary_elementwise(
        self,
        op: &'static str,
        rhs: Var<'t, T>,
        f: fn(T, T) -> T,
        da: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T> + 'static,
        db: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T> + 'static,
    ) -> Result<Var<'t, T>> {
        self.same_tape(rhs, op)?;
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return shape_err(
                op,
                format!("{}x{} vs {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            );
        }
        let a = self.value();
        let b = rhs.value();
        let out = elementwise(&a, &b, f).check_finite(op)?;
        let needs = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].needs_grad || nodes[rhs.id].needs_grad
        };
        Ok(self.tape.push(
            out,
            vec![self.id, rhs.id],
            needs,
            Some(Box::new(move |g| vec![da(g, &a, &b), db(g, &a, &b)])),
        ))
    }

    pub fn scale(self, c: T) -> Result<Var<'t, T>> {
        let out = self.value().map(|v| v * c);
        self.unary("scale", out, move |g| g.map(|v| v * c))
    }

    /// `self + bias` where bias is a `1 x cols` row added to every row.
    pub fn add_row_broadcast(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(bias, "add_row_broadcast")?;
        if bias.rows != 1 || bias.cols != self.cols {
            return shape_err(
                "add_row_broadcast",
                format!("{}x{} + {}x{}", self.rows, self.cols, bias.rows, bias.cols),
            );
        }
        let a = self.value();
        let b = bias.value();
        let (r, c) = (a.rows(), a.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(a.get(i, j) + b.get(0, j));
            }
        }
        let out = Tensor::new(r, c, data).check_finite("add_row_broadcast")?;
        let needs = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].needs_grad || nodes[bias.id].needs_grad
        };
        Ok(self.tape.push(
            out,
            vec![self.id, bias.id],
            needs,
            Some(Box::new(move |g| {
                let mut bg = vec![T::ZERO; c];
                for i in 0..r {
                    for j in 0..c {
                        bg[j] = bg[j] + g.get(i, j);
                    }
                }
                vec![g.clone(), Tensor::new(1, c, bg)]
            })),
        ))
    }

    /// `self * col` where col is `rows x 1`, scaling each row.
    pub fn mul_col_broadcast(self, col: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(col, "mul_col_broadcast")?;
        if col.cols != 1 || col.rows != self.rows {
            return shape_err(
                "mul_col_broadcast",
                format!("{}x{} * {}x{}", self.rows, self.cols, col.rows, col.cols),
            );
        }
        let a = self.value();
        let b = col.value();
        let (r, c) = (a.rows(), a.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let s = b.get(i, 0);
            for j in 0..c {
                data.push(a.get(i, j) * s);
            }
        }
        let out = Tensor::new(r, c, data).check_finite("mul_col_broadcast")?;
        let needs = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].needs_grad || nodes[col.id].needs_grad
        };
        Ok(self.tape.push(
            out,
            vec![self.id, col.id],
            needs,
            Some(Box::new(move |g| {
                let mut ga = Vec::with_capacity(r * c);
                let mut gb = vec![T::ZERO; r];
                for i in 0..r {
                    let s = b.get(i, 0);
                    for j in 0..c {
                        ga.push(g.get(i, j) * s);
                        gb[i] = gb[i] + g.get(i, j) * a.get(i, j);
                    }
                }
                vec![Tensor::new(r, c, ga), Tensor::new(r, 1, gb)]
            })),
        ))
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let out = a.map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.unary("relu", out, move |g| {
            elementwise(g, &a, |gv, av| if av > T::ZERO { gv } else { T::ZERO })
        })
    }

    pub fn leaky_relu(self, slope: T) -> Result<Var<'t, T>> {
        let a = self.value();
        let out = a.map(|v| if v > T::ZERO { v } else { v * slope });
        self.unary("leaky_relu", out, move |g| {
            elementwise(g, &a, |gv, av| if av > T::ZERO { gv } else { gv * slope })
        })
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        let out = self.value().map(sigmoid_scalar);
        let s = out.clone();
        self.unary("sigmoid", out, move |g| {
            elementwise(g, &s, |gv, sv| gv * sv * (T::ONE - sv))
        })
    }

    /// Elementwise natural log. Non-positive inputs produce a
    /// non-finite error.
    pub fn log(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let out = a.map(|v| v.ln());
        self.unary("log", out, move |g| {
            elementwise(g, &a, |gv, av| gv / av)
        })
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let out = a.map(|v| {
            let x = v.to_f64();
            let r = if x >= 0.0 {
                -(1.0 + (-x).exp()).ln()
            } else {
                x - (1.0 + x.exp()).ln()
            };
            T::from_f64(r)
        });
        self.unary("log_sigmoid", out, move |g| {
            elementwise(g, &a, |gv, av| gv * sigmoid_scalar(-av))
        })
    }

    /// Row-wise softmax (max-shifted).
    pub fn softmax_rows(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        if c == 0 {
            return shape_err("softmax_rows", "zero columns".to_string());
        }
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = a.row(i);
            let mx = row.iter().fold(row[0], |m, &v| m.max_of(v));
            let exps: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
            let sum = exps.iter().fold(T::ZERO, |s, &v| s + v);
            data.extend(exps.into_iter().map(|v| v / sum));
        }
        let out = Tensor::new(r, c, data).check_finite("softmax_rows")?;
        let s = out.clone();
        self.unary("softmax_rows", out, move |g| {
            let mut gd = Vec::with_capacity(r * c);
            for i in 0..r {
                let dot = (0..c).fold(T::ZERO, |acc, j| acc + g.get(i, j) * s.get(i, j));
                for j in 0..c {
                    gd.push(s.get(i, j) * (g.get(i, j) - dot));
                }
            }
            Tensor::new(r, c, gd)
        })
    }

    /// Row-wise L2 normalization. Rows with squared norm at or below the
    /// guard normalize to the zero row (no NaN).
    pub fn l2_normalize_rows(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        let eps = T::from_f64(NORM_EPS);
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = a.row(i);
            let sumsq = row.iter().fold(T::ZERO, |s, &v| s + v * v);
            if sumsq.to_f64() <= eps.to_f64() {
                norms.push(T::ZERO);
                data.extend(std::iter::repeat_n(T::ZERO, c));
            } else {
                let n = sumsq.sqrt();
                norms.push(n);
                data.extend(row.iter().map(|&v| v / n));
            }
        }
        let out = Tensor::new(r, c, data).check_finite("l2_normalize_rows")?;
        let y = out.clone();
        self.unary("l2_normalize_rows", out, move |g| {
            let mut gd = Vec::with_capacity(r * c);
            for i in 0..r {
                let n = norms[i];
                if n == T::ZERO {
                    gd.extend(std::iter::repeat_n(T::ZERO, c));
                    continue;
                }
                let dot = (0..c).fold(T::ZERO, |acc, j| acc + g.get(i, j) * y.get(i, j));
                for j in 0..c {
                    gd.push((g.get(i, j) - y.get(i, j) * dot) / n);
                }
            }
            Tensor::new(r, c, gd)
        })
    }

    /// Column means over all rows -> `1 x cols`.
    pub fn mean_rows(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        if r == 0 {
            return shape_err("mean_rows", "zero rows".to_string());
        }
        let inv = T::from_f64(1.0 / r as f64);
        let mut data = vec![T::ZERO; c];
        for i in 0..r {
            for j in 0..c {
                data[j] = data[j] + a.get(i, j);
            }
        }
        for v in data.iter_mut() {
            *v = *v * inv;
        }
        self.unary("mean_rows", Tensor::new(1, c, data), move |g| {
            let mut gd = Vec::with_capacity(r * c);
            for _ in 0..r {
                for j in 0..c {
                    gd.push(g.get(0, j) * inv);
                }
            }
            Tensor::new(r, c, gd)
        })
    }

    /// Column-wise max over all rows -> `1 x cols`. Gradient routes to
    /// the first maximal row per column.
    pub fn max_rows(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        if r == 0 {
            return shape_err("max_rows", "zero rows".to_string());
        }
        let mut data = Vec::with_capacity(c);
        let mut argmax = Vec::with_capacity(c);
        for j in 0..c {
            let mut best = a.get(0, j);
            let mut bi = 0usize;
            for i in 1..r {
                if a.get(i, j) > best {
                    best = a.get(i, j);
                    bi = i;
                }
            }
            data.push(best);
            argmax.push(bi);
        }
        self.unary("max_rows", Tensor::new(1, c, data), move |g| {
            let mut gd = vec![T::ZERO; r * c];
            for j in 0..c {
                gd[argmax[j] * c + j] = g.get(0, j);
            }
            Tensor::new(r, c, gd)
        })
    }

    /// Per-row sum -> `rows x 1`.
    pub fn row_sums(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        let mut data = Vec::with_capacity(r);
        for i in 0..r {
            data.push(a.row(i).iter().fold(T::ZERO, |s, &v| s + v));
        }
        self.unary("row_sums", Tensor::new(r, 1, data), move |g| {
            let mut gd = Vec::with_capacity(r * c);
            for i in 0..r {
                for _ in 0..c {
                    gd.push(g.get(i, 0));
                }
            }
            Tensor::new(r, c, gd)
        })
    }

    pub fn sum_all(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        let s = a.data().iter().fold(T::ZERO, |acc, &v| acc + v);
        self.unary("sum_all", Tensor::scalar(s), move |g| {
            let gv = g.item();
            Tensor::new(r, c, vec![gv; r * c])
        })
    }

    pub fn mean_all(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        if r * c == 0 {
            return shape_err("mean_all", "empty tensor".to_string());
        }
        let inv = T::from_f64(1.0 / (r * c) as f64);
        let s = a.data().iter().fold(T::ZERO, |acc, &v| acc + v) * inv;
        self.unary("mean_all", Tensor::scalar(s), move |g| {
            let gv = g.item() * inv;
            Tensor::new(r, c, vec![gv; r * c])
        })
    }

    /// Select rows by index -> `idx.len() x cols`.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        for &i in idx {
            if i >= r {
                return Err(Error::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(a.row(i));
        }
        let idx = idx.to_vec();
        let k = idx.len();
        self.unary("gather_rows", Tensor::new(k, c, data), move |g| {
            let mut gd = vec![T::ZERO; r * c];
            for (out_i, &src) in idx.iter().enumerate() {
                for j in 0..c {
                    gd[src * c + j] = gd[src * c + j] + g.get(out_i, j);
                }
            }
            Tensor::new(r, c, gd)
        })
    }

    /// Sum rows into `n_out` buckets by destination id. Buckets with no
    /// contribution are zero rows.
    pub fn scatter_sum(self, dst: &[usize], n_out: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        if dst.len() != r {
            return shape_err(
                "scatter_sum",
                format!("{} rows but {} destinations", r, dst.len()),
            );
        }
        for &d in dst {
            if d >= n_out {
                return Err(Error::IndexOutOfBounds {
                    op: "scatter_sum",
                    index: d,
                    bound: n_out,
                });
            }
        }
        let mut data = vec![T::ZERO; n_out * c];
        for (i, &d) in dst.iter().enumerate() {
            for j in 0..c {
                data[d * c + j] = data[d * c + j] + a.get(i, j);
            }
        }
        let dst = dst.to_vec();
        self.unary("scatter_sum", Tensor::new(n_out, c, data), move |g| {
            let mut gd = Vec::with_capacity(r * c);
            for &d in &dst {
                gd.extend_from_slice(g.row(d));
            }
            Tensor::new(r, c, gd)
        })
    }

    /// Softmax over contiguous segments of a `k x 1` score column.
    /// `segments[i]` is the segment id of row i; ids must be
    /// non-decreasing.
    pub fn segment_softmax(self, segments: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        let k = a.rows();
        if a.cols() != 1 {
            return shape_err("segment_softmax", format!("expected kx1, got {}x{}", k, a.cols()));
        }
        if segments.len() != k {
            return shape_err(
                "segment_softmax",
                format!("{} rows but {} segment ids", k, segments.len()),
            );
        }
        if segments.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument(
                "segment_softmax: segment ids must be sorted".to_string(),
            ));
        }
        let bounds = segment_bounds(segments);
        let mut data = vec![T::ZERO; k];
        for &(lo, hi) in &bounds {
            let mx = (lo..hi).fold(a.get(lo, 0), |m, i| m.max_of(a.get(i, 0)));
            let mut sum = T::ZERO;
            for i in lo..hi {
                let e = (a.get(i, 0) - mx).exp();
                data[i] = e;
                sum = sum + e;
            }
            for v in data[lo..hi].iter_mut() {
                *v = *v / sum;
            }
        }
        let out = Tensor::new(k, 1, data).check_finite("segment_softmax")?;
        let w = out.clone();
        self.unary("segment_softmax", out, move |g| {
            let mut gd = vec![T::ZERO; k];
            for &(lo, hi) in &bounds {
                let dot = (lo..hi).fold(T::ZERO, |acc, i| acc + g.get(i, 0) * w.get(i, 0));
                for i in lo..hi {
                    gd[i] = w.get(i, 0) * (g.get(i, 0) - dot);
                }
            }
            Tensor::new(k, 1, gd)
        })
    }

    /// Inverted dropout. `rate == 0` is the identity; surviving entries
    /// are scaled by `1/(1-rate)`. Mask is deterministic in `seed`.
    pub fn dropout(self, rate: f64, seed: u64) -> Result<Var<'t, T>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0,1), got {rate}"
            )));
        }
        if rate == 0.0 {
            let out = self.value();
            return self.unary("dropout", out, |g| g.clone());
        }
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..r * c)
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::ZERO
                } else {
                    keep
                }
            })
            .collect();
        let mask = Tensor::new(r, c, mask);
        let out = elementwise(&a, &mask, |x, m| x * m);
        self.unary("dropout", out, move |g| elementwise(g, &mask, |x, m| x * m))
    }

    /// Stack a list of equal-width vars vertically.
    pub fn concat_rows(tape: &'t Tape<T>, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        if parts.is_empty() {
            return shape_err("concat_rows", "no inputs".to_string());
        }
        let c = parts[0].cols;
        let mut total = 0;
        for p in parts {
            if p.cols != c {
                return shape_err("concat_rows", format!("widths {} vs {}", c, p.cols));
            }
            total += p.rows;
        }
        let mut data = Vec::with_capacity(total * c);
        let mut row_blocks = Vec::with_capacity(parts.len());
        for p in parts {
            let v = p.value();
            data.extend_from_slice(v.data());
            row_blocks.push(p.rows);
        }
        let needs = {
            let nodes = tape.nodes.borrow();
            parts.iter().any(|p| nodes[p.id].needs_grad)
        };
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(
            Tensor::new(total, c, data),
            ids,
            needs,
            Some(Box::new(move |g| {
                let mut out = Vec::with_capacity(row_blocks.len());
                let mut start = 0;
                for &rb in &row_blocks {
                    let mut part = Vec::with_capacity(rb * c);
                    for i in 0..rb {
                        part.extend_from_slice(g.row(start + i));
                    }
                    out.push(Tensor::new(rb, c, part));
                    start += rb;
                }
                out
            })),
        ))
    }

    /// Stack a list of equal-height vars horizontally.
    pub fn concat_cols(tape: &'t Tape<T>, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        if parts.is_empty() {
            return shape_err("concat_cols", "no inputs".to_string());
        }
        let r = parts[0].rows;
        let mut total = 0;
        for p in parts {
            if p.rows != r {
                return shape_err("concat_cols", format!("heights {} vs {}", r, p.rows));
            }
            total += p.cols;
        }
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in &values {
                data.extend_from_slice(v.row(i));
            }
        }
        let needs = {
            let nodes = tape.nodes.borrow();
            parts.iter().any(|p| nodes[p.id].needs_grad)
        };
        let ids = parts.iter().map(|p| p.id).collect();
        let col_blocks: Vec<usize> = parts.iter().map(|p| p.cols).collect();
        Ok(tape.push(
            Tensor::new(r, total, data),
            ids,
            needs,
            Some(Box::new(move |g| {
                let mut out = Vec::with_capacity(col_blocks.len());
                let mut start = 0;
                for &cb in &col_blocks {
                    let mut part = Vec::with_capacity(r * cb);
                    for i in 0..r {
                        for j in 0..cb {
                            part.push(g.get(i, start + j));
                        }
                    }
                    out.push(Tensor::new(r, cb, part));
                    start += cb;
                }
                out
            })),
        ))
    }

    /// Cosine similarity between every row of `self` and every row of
    /// `rhs` -> `self.rows x rhs.rows`. Zero rows yield similarity 0.
    pub fn cosine_rows(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.l2_normalize_rows()?;
        let b = rhs.l2_normalize_rows()?;
        a.matmul(b.transpose()?)
    }
}

/// A [`super::ParamSet`] bound onto a tape as gradient leaves, keeping
/// the var handles so gradients can be read back by name after
/// `backward`.
pub struct BoundParams<'t, T: Real> {
    vars: std::collections::BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Real> BoundParams<'t, T> {
    pub fn bind(tape: &'t Tape<T>, params: &super::ParamSet<T>) -> Self {
        let mut vars = std::collections::BTreeMap::new();
        for (name, t) in params.iter() {
            vars.insert(name.to_string(), tape.leaf(t));
        }
        BoundParams { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Backward(format!("unbound parameter {name}")))
    }

    /// Gradients per parameter after `backward`. Non-participating
    /// parameters yield zero tensors.
    pub fn grads(&self, tape: &Tape<T>) -> std::collections::BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(name, &var)| {
                let g = tape
                    .grad(var)
                    .unwrap_or_else(|| Tensor::zeros(var.rows(), var.cols()));
                (name.clone(), g)
            })
            .collect()
    }
}

fn segment_bounds(segments: &[usize]) -> Vec<(usize, usize)> {
    let mut bounds = Vec::new();
    let mut start = 0;
    for i in 1..=segments.len() {
        if i == segments.len() || segments[i] != segments[start] {
            bounds.push((start, i));
            start = i;
        }
    }
    bounds
}

fn sigmoid_scalar<T: Real>(v: T) -> T {
    let x = v.to_f64();
    let r = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    T::from_f64(r)
}

fn elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.rows(), b.rows());
    debug_assert_eq!(a.cols(), b.cols());
    Tensor::new(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

pub(crate) fn matmul_raw<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(k, b.rows());
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.get(i, p);
            if av.to_f64() == 0.0 {
                continue;
            }
            let brow = b.row(p);
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    Tensor::new(m, n, out)
}

/// `a @ b^T`
fn matmul_nt_raw<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    debug_assert_eq!(k, b.cols());
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut s = T::ZERO;
            for p in 0..k {
                s = s + arow[p] * brow[p];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(m, n, out)
}

/// `a^T @ b`
fn matmul_tn_raw<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, m) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(k, b.rows());
    let mut out = vec![T::ZERO; m * n];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for i in 0..m {
            let av = arow[i];
            if av.to_f64() == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    Tensor::new(m, n, out)
}

//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use super::{checkpoint::ParamSet, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment estimates plus the step counter.
pub struct AdamState<T: Real> {
    pub hyper: AdamHyper,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(hyper: AdamHyper) -> Self {
        AdamState {
            hyper,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            step: 0,
        }
    }
}

/// One optimization step. Decoupled decay shrinks each parameter by
/// `lr * weight_decay` before the bias-corrected Adam update. Parameters
/// missing from `grads` are treated as zero-gradient.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
) -> Result<()> {
    let h = state.hyper;
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    let (b1, b2) = (T::from_f64(h.beta1), T::from_f64(h.beta2));
    let one_m_b1 = T::from_f64(1.0 - h.beta1);
    let one_m_b2 = T::from_f64(1.0 - h.beta2);
    let decay = T::from_f64(1.0 - h.lr * h.weight_decay);
    let lr = T::from_f64(h.lr);
    let eps = T::from_f64(h.eps);
    let inv_bc1 = T::from_f64(1.0 / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);

    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
    for name in names {
        let p = params.get(&name)?;
        let (rows, cols) = (p.rows(), p.cols());
        let zero;
        let g = match grads.get(&name) {
            Some(g) => {
                if g.rows() != rows || g.cols() != cols {
                    return Err(Error::ShapeMismatch {
                        op: "adam_step",
                        detail: format!(
                            "param {name} is {}x{} but grad is {}x{}",
                            rows,
                            cols,
                            g.rows(),
                            g.cols()
                        ),
                    });
                }
                g
            }
            None => {
                zero = Tensor::zeros(rows, cols);
                &zero
            }
        };
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| vec![T::ZERO; rows * cols]);
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| vec![T::ZERO; rows * cols]);
        let mut out = Vec::with_capacity(rows * cols);
        for (i, (&pv, &gv)) in p.data().iter().zip(g.data()).enumerate() {
            let mi = b1 * m[i] + one_m_b1 * gv;
            let vi = b2 * v[i] + one_m_b2 * gv * gv;
            m[i] = mi;
            v[i] = vi;
            let m_hat = mi * inv_bc1;
            let v_hat = vi * inv_bc2;
            let decayed = pv * decay;
            out.push(decayed - lr * m_hat / (v_hat.sqrt() + eps));
        }
        let updated = Tensor::new(rows, cols, out).with_grad().check_finite("adam_step")?;
        params.set(&name, updated)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::checkpoint::{ParamSet, Topology};

    fn one_param(v: Vec<f64>) -> ParamSet<f64> {
        let mut ps = ParamSet::new(Topology::default());
        ps.insert("w", Tensor::new(1, v.len(), v).with_grad());
        ps
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let mut ps = one_param(vec![1.0, -2.0, 3.0]);
        let mut st = AdamState::new(AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        });
        let grads = BTreeMap::new();
        for _ in 0..3 {
            adam_step(&mut ps, &grads, &mut st).unwrap();
        }
        assert_eq!(ps.get("w").unwrap().data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // Bias correction makes the first update lr * g/(|g| + eps).
        let mut ps = one_param(vec![0.0]);
        let mut st = AdamState::new(AdamHyper {
            lr: 1e-3,
            weight_decay: 0.0,
            ..AdamHyper::default()
        });
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(1, 1, vec![1.0]));
        adam_step(&mut ps, &grads, &mut st).unwrap();
        let delta = ps.get("w").unwrap().item().abs();
        assert!((delta - 1e-3).abs() < 1e-6 * 1e-3 + 1e-12, "delta={delta}");
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut ps = one_param(vec![2.0]);
        let hyper = AdamHyper {
            lr: 1e-3,
            weight_decay: 1e-3,
            ..AdamHyper::default()
        };
        let mut st = AdamState::new(hyper);
        let grads = BTreeMap::new();
        adam_step(&mut ps, &grads, &mut st).unwrap();
        let expected = 2.0 * (1.0 - 1e-3 * 1e-3);
        assert!((ps.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut ps = one_param(vec![1.0, 2.0]);
        let mut st = AdamState::new(AdamHyper::default());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(1, 3, vec![0.0; 3]));
        assert!(adam_step(&mut ps, &grads, &mut st).is_err());
    }
}

//! Shared test oracles: central finite differences for gradient checks
//! and a deterministic tensor generator.
//!
//! Each integration target compiles this module independently, so not
//! every target uses every helper.
#![allow(dead_code)]

use ctp_core::tensor::{ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_DELTA: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    )
}

/// Relative error with a unit floor, the usual gradient-check metric.
pub fn rel_err(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1.0)
}

/// Check the analytic gradient of `loss` w.r.t. one tensor input by
/// central differences at `probes` random elements.
///
/// `loss(t)` must re-run the full forward pass from scratch; `analytic`
/// is the gradient produced by the implementation under test.
pub fn check_grad(
    name: &str,
    input: &Tensor<f64>,
    analytic: &Tensor<f64>,
    probes: usize,
    seed: u64,
    loss: impl Fn(&Tensor<f64>) -> f64,
) {
    assert_eq!(analytic.rows(), input.rows(), "{name}: gradient shape");
    assert_eq!(analytic.cols(), input.cols(), "{name}: gradient shape");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..probes {
        let r = rng.gen_range(0..input.rows());
        let c = rng.gen_range(0..input.cols());
        let v = input.get(r, c);
        let plus = loss(&input.with_elem(r, c, v + FD_DELTA));
        let minus = loss(&input.with_elem(r, c, v - FD_DELTA));
        let numeric = (plus - minus) / (2.0 * FD_DELTA);
        let got = analytic.get(r, c);
        let err = rel_err(numeric, got);
        assert!(
            err < FD_TOL,
            "{name}[{r},{c}]: analytic {got:.3e} vs numeric {numeric:.3e} (rel err {err:.3e})"
        );
    }
}

/// Probe every parameter of a ParamSet against a loss closure.
pub fn check_param_grads(
    label: &str,
    params: &ParamSet<f64>,
    grads: &std::collections::BTreeMap<String, Tensor<f64>>,
    probes_per_param: usize,
    seed: u64,
    loss: impl Fn(&ParamSet<f64>) -> f64,
) {
    for (i, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads
            .get(name)
            .unwrap_or_else(|| panic!("{label}: no gradient recorded for {name}"));
        let name_owned = name.to_string();
        check_grad(
            &format!("{label}/{name}"),
            tensor,
            analytic,
            probes_per_param,
            seed ^ (i as u64),
            |perturbed| {
                let mut ps = params.clone();
                ps.set(&name_owned, perturbed.clone().with_grad()).unwrap();
                loss(&ps)
            },
        );
    }
}

pub mod gradsuite;

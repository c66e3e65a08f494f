//! Central finite-difference verification of tape gradients.
//!
//! The checker reruns a scalar-valued computation with each input element
//! perturbed by ±h and compares (f(x+h) − f(x−h)) / 2h against the analytic
//! gradient from [`Tape::backward`]. It never reads the tape's intermediate
//! state, only forward values, so it stays independent of the backward
//! implementation it verifies.

use rand::Rng;

use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};

/// Step size for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance on each gradient element.
pub const FD_RTOL: f64 = 1e-4;
/// Absolute floor below which differences are ignored.
pub const FD_ATOL: f64 = 1e-8;

/// A scalar-valued computation over a fixed number of inputs.
pub type ScalarFn<'a> = &'a dyn Fn(&mut Tape, &[Tensor]) -> Result<Tensor, TensorError>;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest observed |analytic − fd| / max(|analytic|, |fd|, 1).
    pub max_rel_err: f64,
    /// Number of gradient elements compared.
    pub checked: usize,
    /// First violation, if any: (input index, element index, analytic, fd).
    pub violation: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }
}

/// Compare analytic gradients of `f` at `inputs` against central differences.
///
/// An element passes when `|a − fd| <= FD_ATOL + FD_RTOL · max(|a|, |fd|)`.
pub fn check_gradients(inputs: &[Tensor], f: ScalarFn) -> Result<GradCheck, TensorError> {
    // analytic pass
    let mut tape = Tape::new();
    let watched: Vec<Tensor> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &watched)?;
    if !loss.is_scalar() {
        return Err(TensorError::NotAScalar {
            op: "check_gradients",
            shape: loss.shape().to_vec(),
        });
    }
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = watched
        .iter()
        .map(|t| {
            tape.grad(t)
                .map(|g| g.into_data())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |points: &[Tensor]| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let w: Vec<Tensor> = points.iter().map(|p| t.constant(p)).collect();
        f(&mut t, &w)?.scalar_value()
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        violation: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let orig = input.data()[ei];

            let mut plus = input.data().to_vec();
            plus[ei] = orig + FD_STEP;
            work[ti] = Tensor::new(input.shape().to_vec(), plus)?;
            let f_plus = eval(&work)?;

            let mut minus = input.data().to_vec();
            minus[ei] = orig - FD_STEP;
            work[ti] = Tensor::new(input.shape().to_vec(), minus)?;
            let f_minus = eval(&work)?;

            work[ti] = input.clone();

            let fd = (f_plus - f_minus) / (2.0 * FD_STEP);
            let a = analytic[ti][ei];
            let diff = (a - fd).abs();
            let rel = diff / a.abs().max(fd.abs()).max(1.0);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
            if diff > FD_ATOL + FD_RTOL * a.abs().max(fd.abs()) && report.violation.is_none() {
                report.violation = Some((ti, ei, a, fd));
            }
        }
    }
    Ok(report)
}

/// Panic with a readable message unless the check passes (test helper).
pub fn assert_gradients(inputs: &[Tensor], f: ScalarFn, context: &str) {
    let report = check_gradients(inputs, f).unwrap_or_else(|e| panic!("{context}: {e}"));
    if let Some((ti, ei, a, fd)) = report.violation {
        panic!("{context}: gradient mismatch at input {ti} element {ei}: analytic {a}, finite-difference {fd}");
    }
}

/// Seeded random matrix with entries in `lo..hi` (test helper).
pub fn random_matrix<R: Rng>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches generated data")
}

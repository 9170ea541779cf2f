//! Analytic-vs-numeric gradient comparison over random draws.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::models::{self, Example, ModelSpec};
use crate::numkit::{finite_diff_grad, ParamVector, RandomSource};

/// Central-difference step used by the check.
pub const FD_STEP: f64 = 1e-5;
/// A spec passes when every draw stays below this relative error.
pub const PASS_THRESHOLD: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub draws: usize,
    pub max_relative_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < PASS_THRESHOLD
    }
}

/// `||a - b|| / (||a|| + ||b||)`, or 0 when both are zero.
pub fn relative_error(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    let scale = a.l2_norm() + b.l2_norm();
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok(a.sub(b)?.l2_norm() / scale)
}

/// Compares [`models::grad`] with central differences on `draws` random
/// `(theta, batch)` pairs. `corrupt` perturbs the analytic gradient and
/// exists so callers can confirm the check is able to fail.
pub fn run(spec: &ModelSpec, draws: usize, seed: u64, corrupt: bool) -> Result<GradcheckReport> {
    spec.validate()?;
    let root = RandomSource::new(seed).child("gradcheck");
    let mut max_relative_error: f64 = 0.0;
    for i in 0..draws {
        let mut rng = root.child_u64(i as u64);
        let scale = 0.5 + 2.0 * rng.uniform();
        let theta = models::init_params(spec, &mut rng)?.scale(scale)?;
        let n = 1 + rng.below(16);
        let batch: Vec<Example> = (0..n)
            .map(|_| {
                let x = (0..spec.input_dim).map(|_| rng.uniform()).collect();
                Example::new(x, u8::from(rng.bernoulli(0.5)))
            })
            .collect();
        let mut analytic = models::grad(spec, &theta, &batch)?;
        if corrupt {
            let mut v = analytic.into_vec();
            v[0] += 1e-3 * (1.0 + v[0].abs());
            analytic = ParamVector::new(v)?;
        }
        let numeric = finite_diff_grad(|t| models::loss(spec, t, &batch).unwrap_or(f64::NAN), &theta, FD_STEP);
        max_relative_error = max_relative_error.max(relative_error(&analytic, &numeric)?);
    }
    Ok(GradcheckReport {
        draws,
        max_relative_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_reference_models_pass() {
        assert!(run(&ModelSpec::logistic(6), 20, 1, false).unwrap().passed());
        assert!(run(&ModelSpec::mlp(6, 5), 20, 1, false).unwrap().passed());
    }

    #[test]
    fn corrupted_gradient_fails() {
        assert!(!run(&ModelSpec::mlp(3, 2), 5, 1, true).unwrap().passed());
    }

    #[test]
    fn relative_error_edge_cases() {
        let z = ParamVector::zeros(3);
        assert_eq!(relative_error(&z, &z).unwrap(), 0.0);
        let a = ParamVector::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(relative_error(&a, &a.scale(-1.0).unwrap()).unwrap(), 1.0);
    }
}

//! Differentiable tensor substrate: dense tensors, a reverse-mode tape,
//! parameter sets with an Adam optimiser, seeded randomness and a
//! finite-difference gradient checker.

mod gradcheck;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_subset, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use params::{Adam, Bound, ParamSet};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{sigmoid, softmax_in_place};

use crate::error::{Result, SscError};
use crate::scalar::Real;

/// Softmax of a finite logit vector.
pub fn softmax_normalize<T: Real>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(SscError::invalid("softmax of an empty vector"));
    }
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(SscError::NonFinite(format!("softmax logit {i}")));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Bilinear interpolation of a `[rows, cols, d]` map at pixel point `(u, v)`
/// (`u` along columns). Points whose four neighbours all lie outside the map
/// give the zero vector.
pub fn bilinear_sample<T: Real>(tape: &mut Tape<T>, feature_map: Var, point: Var) -> Var {
    let pts = tape.reshape(point, vec![1, 2]);
    let out = tape.bilinear_sample(feature_map, pts);
    let d = tape.shape(out)[1];
    tape.reshape(out, vec![d])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let third = softmax_normalize(&[0.0f64, 0.0, 0.0]).unwrap();
        assert!(third.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(softmax_normalize(&[123.4f64]).unwrap(), vec![1.0]);
        let q = softmax_normalize(&[1.0f64.ln(), 3.0f64.ln()]).unwrap();
        assert!((q[0] - 0.25).abs() < 1e-15 && (q[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(softmax_normalize(&[0.0f64, f64::NAN]), Err(SscError::NonFinite(_))));
        assert!(softmax_normalize::<f64>(&[]).is_err());
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let report = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0]);
                tape.sum(sq)
            },
            &[x],
            1e-5,
        );
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn grad_check_flags_non_finite() {
        let x = Tensor::vector(vec![-1.0]);
        let report = grad_check(
            |tape, v| {
                let l = tape.log(v[0]);
                tape.sum(l)
            },
            &[x],
            1e-5,
        );
        assert!(report.non_finite);
        assert!(!report.passed(1e-4));
    }
}

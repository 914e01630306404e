//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        !self.non_finite && self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function against
/// `(f(x+h) - f(x-h)) / 2h` on every coordinate of every input.
///
/// `f` records its computation on the given tape from the input leaves and
/// returns the scalar output node.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    grad_check_subset(f, inputs, h, usize::MAX)
}

/// As [`grad_check`], but probes at most `max_coords` evenly strided
/// coordinates per input.
pub fn grad_check_subset<F>(f: F, inputs: &[Tensor<f64>], h: f64, max_coords: usize) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x)).collect();
        let out = f(&mut tape, &vars);
        tape.scalar_value(out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x)).collect();
    let out = f(&mut tape, &vars);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
        non_finite: !tape.scalar_value(out).is_finite(),
    };
    if report.non_finite {
        return report;
    }
    let grads = tape.backward(out);

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *var);
        let n = analytic.len();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let x0 = work[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let fp = eval(&work);
            work[k].data_mut()[i] = x0 - h;
            let fm = eval(&work);
            work[k].data_mut()[i] = x0;
            report.coords_checked += 1;
            if !fp.is_finite() || !fm.is_finite() || !analytic[i].is_finite() {
                report.non_finite = true;
                report.worst = Some((k, i));
                return report;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((k, i));
                report.analytic = analytic[i];
                report.numeric = numeric;
            }
        }
    }
    report
}

//! Central finite-difference checks for tape gradients.
//!
//! The numerical side only ever evaluates the scalar function at perturbed
//! inputs, so it stays independent of every backward rule it checks.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub rel_tolerance: f64,
    /// Gradients below this magnitude are compared against it instead of
    /// against themselves, so that `0 vs 1e-13` does not count as a failure.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            rel_tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(input, element, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `f` at `inputs`. `f` must build a scalar from vars on the given
/// tape and be deterministic.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&vars)?;
    let grads = tape.backward(&root)?;

    let eval = |replaced: usize, t: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, x)| tape.constant(if i == replaced { t.clone() } else { x.clone() }))
            .collect();
        Ok(f(&vars)?.value().item())
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        passed: true,
    };
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(&vars[i]).expect("leaf").clone();
        for e in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[e] += cfg.epsilon;
            let mut minus = input.clone();
            minus.data_mut()[e] -= cfg.epsilon;
            let numeric = (eval(i, plus)? - eval(i, minus)?) / (2.0 * cfg.epsilon);
            let a = analytic.data()[e];
            let err = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, e, a, numeric));
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.rel_tolerance;
    Ok(report)
}

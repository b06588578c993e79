//! Central finite-difference check of tape gradients.

use super::{Bound, NodeId, ParamStore, Tape};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so entries whose true
/// gradient is numerically zero are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(group name, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
    pub passed: bool,
}

fn eval<F>(store: &ParamStore, build: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &Bound) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(store);
    let root = build(&mut tape, &bound)?;
    Ok(tape.scalar(root))
}

/// Compares the analytic gradient of the scalar built by `build` with
/// `(L(θ+ε) − L(θ−ε)) / 2ε` for every scalar in `store`.
pub fn grad_check<F>(store: &ParamStore, epsilon: f64, tolerance: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &Bound) -> Result<NodeId>,
{
    if !(1e-6..=1e-4).contains(&epsilon) {
        return Err(Error::Config(format!("grad_check epsilon {epsilon} outside [1e-6, 1e-4]")));
    }
    let first = eval(store, &build)?;
    let second = eval(store, &build)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let analytic = {
        let mut tape = Tape::new();
        let bound = tape.bind(store);
        let root = build(&mut tape, &bound)?;
        tape.backward(root)?.params
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        entries_checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        tolerance,
        passed: true,
    };
    for k in 0..store.num_scalars() {
        let (g, i) = store.locate(k);
        let original = store.groups()[g].value.as_slice()[i];
        probe.groups_mut()[g].value.as_mut_slice()[i] = original + epsilon;
        let plus = eval(&probe, &build)?;
        probe.groups_mut()[g].value.as_mut_slice()[i] = original - epsilon;
        let minus = eval(&probe, &build)?;
        probe.groups_mut()[g].value.as_mut_slice()[i] = original;

        let numeric = (plus - minus) / (2.0 * epsilon);
        let exact = analytic[g].as_ref().map_or(0.0, |m| m.as_slice()[i]);
        let abs = (numeric - exact).abs();
        let rel = abs / numeric.abs().max(exact.abs()).max(REL_ERR_FLOOR);
        report.entries_checked += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = Some((store.groups()[g].name.clone(), i));
        }
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}

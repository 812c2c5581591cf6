//! Central finite-difference gradient oracle.

use crate::error::{Result, TensorError};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a [`grad_check`] run.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over all coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// `(param index, coordinate)` where the max was attained.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    tape.value(root).item()
}

/// Compares the tape gradient of the scalar `f` against central differences
/// with step `h` at every coordinate of every tensor in `params`.
///
/// `f` is evaluated twice at the base point first; any difference between
/// the two values is reported as an oracle error.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check(f, params, h, |_, analytic| (0..analytic.numel()).collect())
}

/// Like [`grad_check`] but probes at most `per_tensor` coordinates of each
/// tensor: the half with the largest analytic gradient plus a random draw
/// from the rest. Small tensors are checked in full.
pub fn grad_check_sampled<F>(f: F, params: &[Tensor], h: f64, per_tensor: usize, rng: &mut Rng) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check(f, params, h, |_, analytic| {
        let n = analytic.numel();
        if n <= per_tensor {
            return (0..n).collect();
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| analytic.data()[b].abs().total_cmp(&analytic.data()[a].abs()));
        let top = per_tensor / 2;
        let mut rest = order.split_off(top);
        rng.shuffle(&mut rest);
        order.extend(rest.into_iter().take(per_tensor - top));
        order
    })
}

fn check<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    mut coordinates: impl FnMut(usize, &Tensor) -> Vec<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(TensorError::Usage(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let base = tape.value(root).item()?;
    let grads = tape.backward(root)?;

    let again = evaluate(&f, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(TensorError::Oracle(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut point: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, *var);
        for ci in coordinates(pi, &analytic) {
            let original = point[pi].data()[ci];
            point[pi].data_mut()[ci] = original + h;
            let plus = evaluate(&f, &point)?;
            point[pi].data_mut()[ci] = original - h;
            let minus = evaluate(&f, &point)?;
            point[pi].data_mut()[ci] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[ci];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if !err.is_finite() {
                return Err(TensorError::Oracle(format!(
                    "non-finite error at param {pi} coordinate {ci}"
                )));
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, ci);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let report = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                Ok(tape.sum(sq))
            },
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn sampling_covers_small_tensors_and_caps_large_ones() {
        let f = |tape: &mut Tape, v: &[Var]| {
            let sq = tape.mul(v[0], v[0])?;
            let a = tape.sum(sq);
            let b = tape.sum(v[1]);
            tape.add(a, b)
        };
        let params = [Tensor::new(vec![50], (0..50).map(|i| f64::from(i) / 10.0).collect()).unwrap(), Tensor::scalar(2.0)];
        let report = grad_check_sampled(f, &params, 1e-5, 8, &mut Rng::new(0)).unwrap();
        assert_eq!(report.coordinates, 9);
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn rejects_step_outside_range() {
        let err = grad_check(|tape, v| Ok(tape.sum(v[0])), &[Tensor::scalar(1.0)], 1e-2);
        assert!(matches!(err, Err(TensorError::Usage(_))));
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let err = grad_check(
            |tape, v| {
                calls.set(calls.get() + 1.0);
                let c = tape.constant(Tensor::scalar(calls.get()));
                let y = tape.mul(v[0], c)?;
                Ok(tape.sum(y))
            },
            &[Tensor::scalar(1.0)],
            1e-5,
        );
        assert!(matches!(err, Err(TensorError::Oracle(_))));
    }
}

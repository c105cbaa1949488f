//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::numerics::{Tape, Tensor};

const FD_STEP: f64 = 1e-5;
// Relative error floor: below this magnitude the comparison is effectively
// absolute, keeping finite-difference roundoff from dominating tiny adjoints.
const REL_FLOOR: f64 = 1e-3;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// (input name, flat component index) of the worst disagreement.
    pub worst: Option<(String, usize)>,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Check d(f)/d(inputs) against central differences with named inputs.
///
/// `f` must evaluate a scalar from tape-bound copies of `inputs`; it is
/// re-evaluated `2·numel` times on fresh tapes for the differences, which
/// keeps the oracle independent of the reverse sweep it is checking.
pub fn grad_check_named<F>(
    f: F,
    inputs: &[(&str, Tensor)],
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Tensor]) -> Tensor,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        f(&mut tape, values).item()
    };

    // Tape gradients.
    let mut tape = Tape::new();
    let bound: Vec<Tensor> = inputs.iter().map(|(_, t)| tape.leaf(t)).collect();
    let loss = f(&mut tape, &bound);
    let grads = tape.backward(&loss)?;

    let mut max_rel_err: f64 = 0.0;
    let mut worst = None;
    for (i, (name, t)) in inputs.iter().enumerate() {
        let tape_grad = grads.get_or_zeros(&bound[i]);
        for j in 0..t.numel() {
            let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
            values[i].data_mut()[j] = t.data()[j] + FD_STEP;
            let up = eval(&values)?;
            values[i].data_mut()[j] = t.data()[j] - FD_STEP;
            let down = eval(&values)?;
            let fd = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(tape_grad.data()[j], fd);
            if e > max_rel_err {
                max_rel_err = e;
                worst = Some((name.to_string(), j));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        tolerance,
        passed: max_rel_err < tolerance,
        worst,
    })
}

/// [`grad_check_named`] with positional input names.
pub fn grad_check<F>(f: F, inputs: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Tensor]) -> Tensor,
{
    let named: Vec<(&str, Tensor)> = inputs.iter().map(|t| ("input", t.clone())).collect();
    grad_check_named(f, &named, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn oracle_accepts_sum_of_tanh() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::vector(&(0..6).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>());
        let report = grad_check(
            |t, xs| {
                let y = t.tanh(&xs[0]).unwrap();
                t.sum_all(&y).unwrap()
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn oracle_rejects_a_wrong_adjoint() {
        // sum(x^2) evaluated forward, but pretending the function were
        // sum(3 * x): the tape gradient no longer matches the differences.
        let x = Tensor::vector(&[0.7, -1.3, 0.2]);
        let report = grad_check(
            |t, xs| {
                let tripled = t.scale(&xs[0], 3.0).unwrap();
                let sq = t.mul(&xs[0], &xs[0]).unwrap();
                let diff = t.sub(&sq, &sq).unwrap(); // zero, keeps sq on tape
                let y = t.add(&tripled, &diff).unwrap();
                t.sum_all(&y).unwrap()
            },
            &[x.clone()],
            1e-6,
        )
        .unwrap();
        assert!(report.passed); // control: consistent function passes

        // Deliberately inconsistent: forward computes sum(x^2) but the
        // checked closure evaluates sum(3x) off-tape in the FD passes.
        let report = grad_check(
            |t, xs| {
                if xs[0].on_tape() {
                    let sq = t.mul(&xs[0], &xs[0]).unwrap();
                    t.sum_all(&sq).unwrap()
                } else {
                    let tripled = t.scale(&xs[0], 3.0).unwrap();
                    t.sum_all(&tripled).unwrap()
                }
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.worst.is_some());
    }
}

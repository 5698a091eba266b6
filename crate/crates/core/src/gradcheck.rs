//! Central-difference gradient checking against the tape.

use crate::tensor::{Result, Tape, Tensor, Var};

/// Differences between analytic and numeric gradients below this are treated
/// as agreement, so near-zero partials are not judged on rounding noise.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// `(leaf, element)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    /// `(analytic, numeric)` at `worst`.
    pub worst_values: Option<(f64, f64)>,
    pub checked: usize,
    pub failure: Option<String>,
}

/// Relative error of one partial derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

fn evaluate<F>(f: &F, leaves: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares tape gradients of the scalar `f` with central differences of
/// width `2·step` for every element of every leaf.
pub fn grad_check<F>(f: F, leaves: &[Tensor], step: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let fail = |msg: String| GradCheckReport {
        passed: false,
        max_rel_error: f64::INFINITY,
        worst: None,
        worst_values: None,
        checked: 0,
        failure: Some(msg),
    };
    if !(step > 0.0 && step <= 1e-2) {
        return fail(format!("step {step} outside (0, 1e-2]"));
    }
    let leaves: Vec<Tensor> = leaves.iter().map(|t| t.clone().with_grad(true)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let analytic = match f(&mut tape, &vars).and_then(|out| {
        if !tape.value(out).is_finite() {
            return Ok(None);
        }
        tape.backward(out).map(Some)
    }) {
        Ok(Some(g)) => g,
        Ok(None) => return fail("non-finite value at the base point".into()),
        Err(e) => return fail(e.to_string()),
    };

    let mut report = GradCheckReport {
        passed: true,
        max_rel_error: 0.0,
        worst: None,
        worst_values: None,
        checked: 0,
        failure: None,
    };
    let mut probe = leaves.clone();
    for (li, var) in vars.iter().enumerate() {
        let grads = analytic.get(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; leaves[li].len()]);
        for (ei, &a) in grads.iter().enumerate() {
            let orig = leaves[li].data()[ei];
            probe[li].data_mut()[ei] = orig + step;
            let plus = evaluate(&f, &probe);
            probe[li].data_mut()[ei] = orig - step;
            let minus = evaluate(&f, &probe);
            probe[li].data_mut()[ei] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                _ => {
                    report.passed = false;
                    report.failure = Some(format!("non-finite evaluation at leaf {li}[{ei}]"));
                    report.max_rel_error = f64::INFINITY;
                    report.worst = Some((li, ei));
                    return report;
                }
            };
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((li, ei));
                report.worst_values = Some((a, numeric));
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn sum_of_sigmoid_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[8], &mut rng);
        let r = grad_check(
            |t, v| {
                let s = t.sigmoid(v[0])?;
                t.sum(s)
            },
            &[x],
            1e-5,
            1e-4,
        );
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 8);
    }

    #[test]
    fn corrupted_derivative_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[8], &mut rng);
        let r = grad_check(
            |t, v| {
                // derivative of x^3 deliberately off by a factor of two
                let y = t.map(v[0], |x| x * x * x, |x| 6.0 * x * x)?;
                t.sum(y)
            },
            &[x],
            1e-5,
            1e-4,
        );
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.4);
    }

    #[test]
    fn correct_custom_derivative_passes() {
        let x = Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let y = t.map(v[0], |x| x * x * x, |x| 3.0 * x * x)?;
                t.sum(y)
            },
            &[x],
            1e-5,
            1e-4,
        );
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn step_out_of_range_is_a_failure() {
        let x = Tensor::scalar(1.0);
        let r = grad_check(|t, v| t.sum(v[0]), &[x], 0.1, 1e-4);
        assert!(!r.passed);
        assert!(r.failure.is_some());
    }

    #[test]
    fn non_finite_evaluation_is_a_failure() {
        let x = Tensor::scalar(1e-6);
        let r = grad_check(|t, v| t.pow(v[0], -1.0), &[x], 1e-5, 1e-4);
        assert!(!r.passed);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = random(&[3, 4], &mut rng);
            let b = random(&[4, 2], &mut rng);
            let row = random(&[4], &mut rng);
            let pos = random(&[3, 2], &mut rng);
            let gain = random(&[4], &mut rng);
            let r = grad_check(
                |t, v| {
                    let (a, b, row, pos, gain) = (v[0], v[1], v[2], v[3], v[4]);
                    let m = t.matmul(a, b)?;
                    let sm = t.softmax_rows(m)?;
                    let lg = t.log(sm)?;
                    let ar = t.add_row(a, row)?;
                    let ln = t.layer_norm(ar, gain, row, 1e-5)?;
                    let sg = t.sigmoid(ln)?;
                    let pw = t.pow(sg, 1.7)?;
                    let tr = t.transpose(pw)?;
                    let sel = t.select_rows(tr, &[0, 2, 2])?;
                    let pe = t.sinusoid_encode(pos, 4)?;
                    let cat = t.concat_cols(&[lg, pe])?;
                    let rs = t.reshape(cat, &[2, 9])?;
                    let s1 = t.mean(rs)?;
                    let s2 = t.sum(sel)?;
                    let sq = t.mul(s2, s2)?;
                    let d = t.sub(s1, sq)?;
                    t.affine(d, 0.3, 1.0)
                },
                &[a, b, row, pos, gain],
                1e-5,
                1e-4,
            );
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn conv3x3_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let x = random(&[4 * 3, 2], &mut rng);
            let k = random(&[18, 3], &mut rng);
            let r = grad_check(
                |t, v| {
                    let y = t.conv3x3(v[0], v[1], 4, 3)?;
                    let s = t.sigmoid(y)?;
                    t.sum(s)
                },
                &[x, k],
                1e-5,
                1e-4,
            );
            assert!(r.passed, "{r:?}");
        }
    }
}

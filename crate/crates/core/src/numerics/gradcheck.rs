use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Lower bound on the denominator of the relative error, so that entries
/// whose true gradient is (numerically) zero are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Per-parameter outcome of [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    /// Largest relative error over the smooth entries of this parameter.
    pub max_rel_err: f64,
    /// Flat index of the entry attaining `max_rel_err`.
    pub worst_entry: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Entries skipped because a ±step perturbation crossed a relu kink or
    /// changed a discrete selection.
    pub nonsmooth: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }

    /// Parameters whose worst entry exceeds the tolerance.
    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_err >= self.tol)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn nonsmooth(&self) -> usize {
        self.params.iter().map(|p| p.nonsmooth).sum()
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params` and must
/// return a `1 × 1` var. It is evaluated once for the analytic gradient and
/// twice per parameter entry for the numeric one. Entries whose perturbed
/// evaluations take a different branch (see [`Tape::branch_signature`]) are
/// counted as non-smooth and left out of the error.
///
/// Stop-gradient outputs are held at their unperturbed values during the
/// numeric evaluations, so the check measures the gradient of the surrogate
/// that reverse mode differentiates (straight-through and commitment terms
/// included) rather than of the raw forward value.
pub fn finite_diff_check<T, F>(
    mut f: F,
    params: &[Tensor<T>],
    step: T,
    tol: T,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'t> FnMut(&'t Tape<T>, &[Var<'t, T>]) -> Var<'t, T>,
{
    let (analytic, base_sig, frozen) = {
        let tape = Tape::new();
        let vars: Vec<Var<'_, T>> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&tape, &vars);
        let grads = loss.backward()?;
        let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
        (analytic, tape.branch_signature(), tape.stop_gradient_values())
    };

    let mut eval = |values: &[Tensor<T>]| -> Result<(T, u64)> {
        let tape = Tape::with_frozen_stop_gradients(frozen.clone());
        let vars: Vec<Var<'_, T>> = values.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&tape, &vars);
        tape.check()?;
        Ok((loss.item(), tape.branch_signature()))
    };

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let two = T::lit(2.0);
    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        tol: tol.as_f64(),
        step: step.as_f64(),
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            index: pi,
            max_rel_err: 0.0,
            worst_entry: None,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
            nonsmooth: 0,
        };
        for k in 0..grad.len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + step;
            let (plus, sig_plus) = eval(&work)?;
            work[pi].data_mut()[k] = orig - step;
            let (minus, sig_minus) = eval(&work)?;
            work[pi].data_mut()[k] = orig;

            if sig_plus != base_sig || sig_minus != base_sig {
                check.nonsmooth += 1;
                continue;
            }
            let numeric = ((plus - minus) / (two * step)).as_f64();
            let a = grad.data()[k].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            check.checked += 1;
            if check.worst_entry.is_none() || rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_entry = Some(k);
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::concat_cols;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    /// Like `random` but keeps every entry at least `margin` away from zero.
    fn random_off_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, margin: f64) -> Tensor<f64> {
        random(rng, rows, cols).map(|v| if v.abs() < margin { 2.0 * margin.copysign(v) } else { v })
    }

    fn assert_passes(report: &GradCheckReport, what: &str) {
        assert!(
            report.passed(),
            "{what}: max rel err {} ({:?})",
            report.max_rel_err(),
            report.failures().collect::<Vec<_>>()
        );
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0_f64);
        let report = finite_diff_check(|_, v| (v[0] * v[0]).sum(), &[x], STEP, TOL).unwrap();
        let p = &report.params[0];
        assert_eq!(p.analytic, 6.0);
        assert!((p.numeric - 6.0).abs() < 1e-8);
        assert!(report.passed());
    }

    #[test]
    fn matmul_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, 4, 3);
        let b = random(&mut rng, 3, 2);
        let w = random(&mut rng, 4, 2);
        let report = finite_diff_check(
            |tape, v| {
                let w = tape.constant(w.clone());
                (v[0].matmul(v[1]) * w).sum()
            },
            &[a, b],
            STEP,
            1e-6,
        )
        .unwrap();
        assert_passes(&report, "matmul");
    }

    #[test]
    fn every_op_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..5 {
            let x = random(&mut rng, 3, 4);
            let y = random(&mut rng, 3, 4);
            let pos = random(&mut rng, 3, 4).map(|v| v.abs() + 0.5);
            let kinked = random_off_zero(&mut rng, 3, 4, 1e-3);
            let col = random(&mut rng, 3, 1);
            let row = random(&mut rng, 1, 4);
            let table = random(&mut rng, 5, 4);
            let mix = random(&mut rng, 3, 4);
            let sq = random(&mut rng, 3, 3);

            type Build = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>;
            let cases: Vec<(&str, Vec<Tensor<f64>>, Build)> = vec![
                ("add", vec![x.clone(), y.clone()], |_, v| ((v[0] + v[1]) * v[0]).sum()),
                ("sub", vec![x.clone(), y.clone()], |_, v| ((v[0] - v[1]) * v[1]).sum()),
                ("mul", vec![x.clone(), y.clone()], |_, v| (v[0] * v[1] * v[1]).sum()),
                ("relu", vec![kinked.clone(), mix.clone()], |_, v| (v[0].relu() * v[1]).sum()),
                ("sigmoid", vec![x.clone(), mix.clone()], |_, v| (v[0].sigmoid() * v[1]).sum()),
                ("softmax", vec![x.clone(), mix.clone()], |_, v| (v[0].softmax() * v[1]).sum()),
                ("log_softmax", vec![x.clone(), mix.clone()], |_, v| (v[0].log_softmax() * v[1]).sum()),
                ("l2_norm", vec![x.clone()], |_, v| (v[0].l2_norm() * v[0].l2_norm()).sum() + v[0].l2_norm().sum()),
                ("cosine_sim", vec![x.clone(), y.clone()], |_, v| (v[0].cosine_sim(v[1]) * v[0].l2_norm()).sum()),
                ("normalize_rows", vec![x.clone(), mix.clone()], |_, v| (v[0].normalize_rows() * v[1]).sum()),
                ("log", vec![pos.clone(), mix.clone()], |_, v| (v[0].log() * v[1]).sum()),
                ("exp", vec![x.clone(), mix.clone()], |_, v| (v[0].exp() * v[1]).sum()),
                ("add_row", vec![x.clone(), row.clone()], |_, v| (v[0].add_row(v[1]) * v[0].add_row(v[1])).sum()),
                ("mul_col", vec![x.clone(), col.clone()], |_, v| (v[0].mul_col(v[1]) * v[0]).sum()),
                ("scale", vec![x.clone()], |_, v| (v[0].scale(-1.7) * v[0]).sum()),
                ("matmul_t", vec![x.clone(), y.clone()], |_, v| (v[0].matmul_t(v[1]) * v[0].matmul_t(v[0])).sum()),
                ("transpose", vec![x.clone(), y.clone()], |_, v| v[0].transpose().matmul(v[1]).sum()),
                ("column", vec![x.clone(), col.clone()], |_, v| (v[0].column(2) * v[1]).mean()),
                ("slice_cols", vec![x.clone(), y.clone()], |_, v| (v[0].slice_cols(1, 2) * v[1].slice_cols(0, 2)).sum()),
                ("concat_cols", vec![x.clone(), col.clone()], |_, v| {
                    let c = concat_cols(&[v[0], v[1]]);
                    (c * c).sum()
                }),
                ("gather_rows", vec![table.clone(), mix.clone()], |_, v| (v[0].gather_rows(&[4, 0, 4]) * v[1]).sum()),
                ("diag", vec![sq.clone()], |_, v| (v[0].diag() * v[0].diag()).sum()),
                ("sum_cols", vec![x.clone(), col.clone()], |_, v| (v[0].sum_cols() * v[1]).sum()),
            ];
            for (name, params, build) in cases {
                let report = finite_diff_check(build, &params, STEP, TOL).unwrap();
                assert_eq!(report.nonsmooth(), 0, "{name} trial {trial}");
                assert_passes(&report, name);
            }
        }
    }

    #[test]
    fn relu_kink_crossing_is_flagged_not_scored() {
        let x = Tensor::row_vector(&[1e-6_f64, 1.0]);
        let report = finite_diff_check(|_, v| v[0].relu().sum(), &[x], STEP, TOL).unwrap();
        assert_eq!(report.nonsmooth(), 1);
        assert_eq!(report.checked(), 1);
        assert!(report.passed());
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // The first (analytic) evaluation differentiates x², the numeric ones see x.
        let first = std::cell::Cell::new(true);
        let x = Tensor::scalar(2.0_f64);
        let report = finite_diff_check(
            |_, v| {
                if first.replace(false) {
                    (v[0] * v[0]).sum()
                } else {
                    v[0].sum()
                }
            },
            &[x],
            STEP,
            TOL,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures().count(), 1);
    }

    #[test]
    fn stop_gradient_is_checked_as_a_constant() {
        // d/dx [x·sg(x)] is sg(x) = 2, not 2x = 4.
        let report = finite_diff_check(
            |_, v| (v[0] * v[0].stop_gradient()).sum(),
            &[Tensor::scalar(2.0_f64)],
            STEP,
            TOL,
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.params[0].analytic, 2.0);

        // Straight-through: forward is round(x)², backward treats rounding as identity.
        let report = finite_diff_check(
            |_, v| {
                let x = v[0];
                let q = x.stop_gradient().value().map(f64::round);
                let q = x.tape().constant(q);
                let st = x + (q - x).stop_gradient();
                (st * st).sum()
            },
            &[Tensor::scalar(1.3_f64)],
            STEP,
            TOL,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.params);
        assert_eq!(report.params[0].analytic, 2.0);
    }
}

//! Finite-difference verification of analytic gradients.

use crate::tape::{Mat, Tape, Var};

/// Outcome for a single checked function.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over all parameter entries of the relative error
    /// |analytic - numeric| / max(1, |analytic|, |numeric|).
    pub max_rel_err: f64,
    /// Coordinate (param index, row, col) realizing the max, if any.
    pub worst: Option<(usize, usize, usize)>,
    /// Set when either side was non-finite at some coordinate.
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        !self.non_finite && self.max_rel_err < tol
    }
}

/// Compare the tape gradient of a scalar function against central differences.
///
/// `f` must be a deterministic function of the given parameters: it is invoked
/// once with `requires_grad` leaves for the analytic pass and 2x(#entries)
/// times on perturbed constants for the numeric pass.
pub fn grad_check<F>(f: F, params: &[Mat], eps: f64) -> GradCheckReport
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    // analytic pass
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&tape, &vars);
    assert!(loss.is_scalar(), "grad_check: function must return a scalar");
    tape.backward(loss);
    let analytic: Vec<Mat> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| tape.grad(*v).unwrap_or_else(|| Mat::zeros(p.raw_dim())))
        .collect();

    let eval = |perturbed: &[Mat]| -> f64 {
        let t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|p| t.constant(p.clone())).collect();
        t.scalar(f(&t, &vs))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        non_finite: false,
    };
    let mut work: Vec<Mat> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.nrows() {
            for j in 0..p.ncols() {
                let orig = p[[i, j]];
                work[pi][[i, j]] = orig + eps;
                let fp = eval(&work);
                work[pi][[i, j]] = orig - eps;
                let fm = eval(&work);
                work[pi][[i, j]] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                let a = analytic[pi][[i, j]];
                if !a.is_finite() || !numeric.is_finite() {
                    report.non_finite = true;
                    report.worst = Some((pi, i, j));
                    report.max_rel_err = f64::INFINITY;
                    return report;
                }
                let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = Some((pi, i, j));
                }
            }
        }
    }
    report
}

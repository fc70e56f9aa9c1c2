use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter name, flat coordinate, analytic and numeric derivative at the
    /// worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Per coordinate: analytic, numeric, and the rounding error of the
    /// difference quotient, `EVAL_ULPS · ε_mach · max(|f(θ±eps)|) / eps`.
    pub coords: Vec<(f64, f64, f64)>,
}

impl GradCheckReport {
    /// Worst relative error with each denominator floored at `roundoff / tol`,
    /// the derivative size below which central differences cannot resolve
    /// `tol` however exact the analytic value is. Equals `max_rel_error`
    /// wherever every derivative is resolvable.
    pub fn max_resolved_error(&self, tol: f64) -> f64 {
        self.coords
            .iter()
            .map(|&(a, n, r)| (a - n).abs() / a.abs().max(n.abs()).max(r / tol).max(1e-12))
            .fold(0.0, f64::max)
    }

    /// Coordinates whose derivative is below the resolution for `tol`.
    pub fn unresolved(&self, tol: f64) -> usize {
        self.coords.iter().filter(|&&(a, n, r)| a.abs().max(n.abs()) < r / tol).count()
    }
}

/// Assumed rounding error of one loss evaluation, in ulps of the loss.
/// Losses are long sums, so this is a few ulps rather than a half.
pub const EVAL_ULPS: f64 = 8.0;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares reverse-mode gradients against central differences
/// `(f(θ+eps) − f(θ−eps)) / 2eps` on every coordinate of every parameter
/// in `store`.
///
/// `objective(params, want_grad)` must be deterministic; it returns the loss
/// and, when asked, the reverse-mode gradients for `params`
/// (see [`Tape::evaluate`](super::tape::Tape::evaluate)).
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, mut objective: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, bool) -> Result<(f64, Option<Gradients>)>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step {eps} must be positive")));
    }
    let analytic = objective(store, true)?
        .1
        .ok_or_else(|| Error::Usage("objective returned no gradients".into()))?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
        coords: Vec::new(),
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for c in 0..store.get(id).len() {
            let orig = store.get(id).data()[c];
            store.get_mut(id).data_mut()[c] = orig + eps;
            let plus = objective(store, false)?.0;
            store.get_mut(id).data_mut()[c] = orig - eps;
            let minus = objective(store, false)?.0;
            store.get_mut(id).data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).data()[c];
            let err = relative_error(a, numeric);
            let roundoff = EVAL_ULPS * f64::EPSILON * plus.abs().max(minus.abs()) / eps;
            report.coords.push((a, numeric, roundoff));
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), c, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn quadratic_is_near_exact() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![0.3, -1.7, 2.2, 0.05]));
        let a = Tensor::vector(vec![1.0, 2.0, -0.5, 3.0]);
        let report = grad_check(&mut store, 1e-5, |s, want| {
            let mut tape = Tape::new();
            let xv = tape.param(s, x);
            let av = tape.input(a.clone());
            let d = tape.sub(xv, av)?;
            let q = tape.sum_squares(d);
            let lin = tape.mul(xv, av)?;
            let lin = tape.sum(lin);
            let l = tape.add(q, lin)?;
            tape.evaluate(l, s, want)
        })
        .unwrap();
        assert_eq!(report.coords_checked, 4);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // Forward depends on x but the tape sees a disconnected constant.
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.0));
        let report = grad_check(&mut store, 1e-5, |s, want| {
            let mut tape = Tape::new();
            let _ = tape.param(s, x);
            let c = tape.input(Tensor::scalar(s.get(x).item() * 3.0));
            let l = tape.sum(c);
            tape.evaluate(l, s, want)
        })
        .unwrap();
        assert!(report.max_rel_error > 0.5);
        assert!(report.max_resolved_error(1e-5) > 0.5);
    }

    #[test]
    fn resolved_error_floors_only_tiny_derivatives() {
        let report = GradCheckReport {
            max_rel_error: 0.5,
            coords_checked: 2,
            worst: None,
            coords: vec![(1e-9, 2e-9, 1e-10), (1.0, 1.0 + 1e-7, 1e-10)],
        };
        assert!((report.max_resolved_error(1e-5) - 1e-4).abs() < 1e-12);
        assert_eq!(report.unresolved(1e-5), 1);
        assert!(report.max_resolved_error(1.0) > 0.4);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}

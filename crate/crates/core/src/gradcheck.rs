//! Central finite-difference gradient checks.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose ±h probes took a different branch at a ReLU,
    /// max-pool or norm floor than the base point. The derivative is undefined across the
    /// kink, so these are excluded from `max_rel_err`.
    pub skipped_kinks: usize,
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every coordinate of every parameter of `store` that `f` binds. Parameters
/// `f` binds from other stores are held fixed.
///
/// `f` must build the loss on the graph it is given and be deterministic.
pub fn finite_diff_check<F>(f: F, store: &ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let base_sig = g.signature();
    let analytic = g.backward(loss)?.into_params();

    let eval = |s: &ParamStore| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let l = f(&mut g, s)?;
        Ok((g.scalar(l), g.signature()))
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
    };
    for (name, grad) in &analytic {
        if !store.contains(name) {
            continue;
        }
        for i in 0..grad.len() {
            let orig = work.get(name).unwrap().data()[i];
            work.param_mut(name).unwrap().value.data_mut()[i] = orig + h;
            let (fp, sp) = eval(&work)?;
            work.param_mut(name).unwrap().value.data_mut()[i] = orig - h;
            let (fm, sm) = eval(&work)?;
            work.param_mut(name).unwrap().value.data_mut()[i] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let err = (a - numeric).abs() / denom;
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row_vector(vals)).unwrap();
        s
    }

    #[test]
    fn linear_function_is_exact() {
        let s = store(&[0.5, -1.5, 2.0]);
        let r = finite_diff_check(
            |g, st| {
                let w = g.param(st, "w")?;
                let y = g.scale(w, 3.0)?;
                g.sum_all(y)
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-10, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn quadratic_matches_analytic_derivative() {
        let s = store(&[0.3, -2.0, 7.5]);
        let r = finite_diff_check(
            |g, st| {
                let w = g.param(st, "w")?;
                let y = g.square(w)?;
                g.sum_all(y)
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
    }

    #[test]
    fn norm_squared_of_affine_map() {
        // loss = ||W x||^2, W 3x4.
        let mut s = ParamStore::new();
        let w: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.37).collect();
        s.insert("w", Tensor::matrix(4, 3, w).unwrap()).unwrap();
        let r = finite_diff_check(
            |g, st| {
                let x = g.constant(Tensor::row_vector(&[0.2, -1.0, 0.5, 1.3]))?;
                let w = g.param(st, "w")?;
                let y = g.matmul(x, w)?;
                let sq = g.square(y)?;
                g.sum_all(sq)
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // ln(x) evaluated away from 0 but differentiated through a detach,
        // so the analytic gradient is zero while the function changes.
        let s = store(&[2.0]);
        let r = finite_diff_check(
            |g, st| {
                let w = g.param(st, "w")?;
                let d = g.detach(w)?;
                let y = g.ln(d)?;
                g.sum_all(y)
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err > 0.5);
    }
}

//! Leading singular values by power iteration with deflation.

use super::matrix::{dot, norm, Matrix};
use super::rng::Rng;
use crate::error::{ensure, Result};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct SingularValues {
    /// Descending.
    pub values: Vec<f64>,
    /// False if any value hit `max_iter` before meeting the tolerance. The
    /// values are still the best estimates found.
    pub converged: bool,
}

/// The `j` largest singular values of `m`.
///
/// Iterates on the Gram matrix of the smaller side (`mᵀm` or `m mᵀ`),
/// applied implicitly. Each eigenpair is found by power iteration with
/// the iterate kept orthogonal to the pairs already found. A value is
/// converged when its Rayleigh quotient changes by less than `tol`
/// (relative) between iterations and the eigen-residual is below `√tol`.
pub fn top_singular_values(
    m: &Matrix,
    j: usize,
    tol: f64,
    max_iter: usize,
) -> Result<SingularValues> {
    let n = m.rows().min(m.cols());
    ensure!(j >= 1, Argument, "requested zero singular values");
    ensure!(
        j <= n,
        Argument,
        "requested {j} singular values of a {}x{} matrix",
        m.rows(),
        m.cols()
    );
    ensure!(tol > 0.0, Argument, "tolerance must be positive");
    ensure!(m.is_finite(), Numeric, "matrix has non-finite entries");

    let use_cols = m.cols() <= m.rows();
    let dim = if use_cols { m.cols() } else { m.rows() };
    let gram = |v: &[f64]| -> Vec<f64> {
        if use_cols {
            m.tr_matvec_unchecked(&m.matvec_unchecked(v))
        } else {
            m.matvec_unchecked(&m.tr_matvec_unchecked(v))
        }
    };
    // Upper bound on the top eigenvalue; sets the scale for "numerically zero".
    let scale = m.frobenius_norm().powi(2);
    let floor = scale * 1e-28;

    let mut found: Vec<Vec<f64>> = Vec::with_capacity(j);
    let mut values = Vec::with_capacity(j);
    let mut converged = true;
    let mut rng = Rng::derive(0x5eed_5eed, 0);

    for _ in 0..j {
        if scale == 0.0 {
            values.push(0.0);
            continue;
        }
        let mut v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        project_out(&mut v, &found);
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);

        let mut lambda = 0.0;
        let mut ok = false;
        for _ in 0..max_iter {
            let mut w = gram(&v);
            project_out(&mut w, &found);
            let next = dot(&v, &w);
            let nw = norm(&w);
            if nw <= floor {
                lambda = 0.0;
                ok = true;
                break;
            }
            let residual = w
                .iter()
                .zip(&v)
                .map(|(wi, vi)| (wi - next * vi).powi(2))
                .sum::<f64>()
                .sqrt();
            let delta = (next - lambda).abs();
            lambda = next;
            v = w.into_iter().map(|x| x / nw).collect();
            // Re-orthogonalize against rounding drift.
            project_out(&mut v, &found);
            let nv = norm(&v);
            v.iter_mut().for_each(|x| *x /= nv);
            if delta <= tol * lambda.abs() && residual <= tol.sqrt() * lambda.abs() {
                ok = true;
                break;
            }
        }
        converged &= ok;
        values.push(lambda.max(0.0).sqrt());
        found.push(v);
    }

    // Deflation can surface values slightly out of order when two are
    // nearly equal.
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(SingularValues { values, converged })
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for u in basis {
        let c = dot(v, u);
        v.iter_mut().zip(u).for_each(|(x, ui)| *x -= c * ui);
    }
}

//! Pieces shared by both EM stages: the expected complete-data
//! log-likelihood, convergence bookkeeping and the iteration trace.

use nalgebra::{DMatrix, DVector};

use crate::accel::{residuals, FastPosterior};
use crate::error::{Error, Result};
use crate::model::{uniqueness, Covariance, LongitudinalDataset, ModelParams};

/// One EM iteration as recorded in the convergence trace.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iteration: usize,
    /// Observed-data log-likelihood at the iterate entering this iteration.
    pub loglik: f64,
    /// Penalized objective `-loglik / n + penalty` (stage 2 only).
    pub objective: Option<f64>,
    /// Relative changes of the four parameter blocks
    /// (loadings, uniquenesses or scales, fixed effects, noise variances).
    pub changes: [f64; 4],
    pub lambda_d: Option<f64>,
    pub lambda_b: Option<f64>,
}

impl IterRecord {
    pub fn max_change(&self) -> f64 {
        self.changes.iter().copied().fold(0.0, f64::max)
    }
}

/// `||new - old|| / ||old||` with `0 / 0 = 0`.
pub fn relative_change<'a, I>(new: I, old: I) -> f64
where
    I: IntoIterator<Item = &'a f64>,
{
    let (mut diff, mut base) = (0.0, 0.0);
    for (a, b) in new.into_iter().zip(old) {
        diff += (a - b) * (a - b);
        base += b * b;
    }
    if diff == 0.0 {
        0.0
    } else if base == 0.0 {
        f64::INFINITY
    } else {
        (diff / base).sqrt()
    }
}

/// Relative changes of `(loadings, diagonal, B, sigma)` between two iterates.
pub fn parameter_changes(new: &ModelParams, old: &ModelParams) -> [f64; 4] {
    let (ln, dn) = blocks(&new.cov);
    let (lo, do_) = blocks(&old.cov);
    [
        relative_change(ln.iter(), lo.iter()),
        relative_change(dn.iter(), do_.iter()),
        relative_change(new.b.b.iter(), old.b.b.iter()),
        relative_change(new.sigma.iter(), old.sigma.iter()),
    ]
}

fn blocks(cov: &Covariance) -> (&DMatrix<f64>, &DVector<f64>) {
    match cov {
        Covariance::Factor(f) => (&f.q, &f.delta),
        Covariance::Scaled(s) => (&s.p, &s.d),
    }
}

/// `log|L L^T + diag(base)| + tr((L L^T + diag(base))^-1 psi)` through the
/// `K x K` capacitance; requires `base > 0`.
pub fn factor_objective(loadings: &DMatrix<f64>, base: &DVector<f64>, psi: &DMatrix<f64>) -> Result<f64> {
    if base.iter().any(|b| !(*b > 0.0)) {
        return Err(Error::Constraint("diagonal part must be positive".into()));
    }
    let k = loadings.ncols();
    let inv = base.map(|b| 1.0 / b);
    // U = diag(base)^-1 L
    let mut u = loadings.clone();
    for (mut row, s) in u.row_iter_mut().zip(inv.iter()) {
        row *= *s;
    }
    let mut cap = loadings.transpose() * &u;
    for i in 0..k {
        cap[(i, i)] += 1.0;
    }
    let chol = cap.clone().cholesky().ok_or_else(|| Error::Singular {
        what: "factor capacitance".into(),
        det: cap.determinant(),
    })?;
    let log_det = base.iter().map(|b| b.ln()).sum::<f64>()
        + 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let mut trace = 0.0;
    for (kk, s) in inv.iter().enumerate() {
        trace += psi[(kk, kk)] * s;
    }
    let psi_u = psi * &u;
    let inner = u.transpose() * psi_u;
    trace -= chol.solve(&inner).trace();
    Ok(log_det + trace)
}

/// Terms of the expected complete-data log-likelihood (scaled by `1/n`)
/// that involve `(B, sigma, d)`: the noise log-determinant, the expected
/// quadratic form in the random effects, the cross term and the residual
/// sum of squares.
pub fn data_term(
    b: &DMatrix<f64>,
    sigma: &DVector<f64>,
    scale: &DVector<f64>,
    posts: &[FastPosterior],
    data: &LongitudinalDataset,
) -> f64 {
    let n = data.subjects.len() as f64;
    let r = sigma.len();
    let mut acc = 0.0;
    for (s, post) in data.subjects.iter().zip(posts) {
        let x = s.design_matrix();
        let res = residuals(b, &x, &s.y);
        let t = s.n_visits() as f64;
        let g1: f64 = s.times.iter().sum();
        let g2: f64 = s.times.iter().map(|g| g * g).sum();
        for j in 0..r {
            let (d0, d1) = (scale[2 * j], scale[2 * j + 1]);
            let psi = post.psi_block(j);
            let (m0, m1) = (post.mean[2 * j], post.mean[2 * j + 1]);
            let mut quad = d0 * d0 * t * psi[(0, 0)]
                + 2.0 * d0 * d1 * g1 * psi[(0, 1)]
                + d1 * d1 * g2 * psi[(1, 1)];
            for (tt, g) in s.times.iter().enumerate() {
                let e = res[(j, tt)];
                quad += e * e - 2.0 * e * (d0 * m0 + g * d1 * m1);
            }
            acc += quad / sigma[j];
        }
    }
    let n_obs = data.total_visits() as f64;
    -0.5 * n_obs / n * sigma.iter().map(|s| s.ln()).sum::<f64>() - 0.5 * acc / n
}

/// The EM surrogate `Q_n(theta | theta_s)` for either parameterization,
/// given the E-step output at `theta_s` and its mean second moment.
pub fn q_function(
    theta: &ModelParams,
    posts: &[FastPosterior],
    psi_bar: &DMatrix<f64>,
    data: &LongitudinalDataset,
) -> Result<f64> {
    let (cov_part, scale) = match &theta.cov {
        Covariance::Factor(f) => (
            factor_objective(&f.q, &f.delta, psi_bar)?,
            DVector::from_element(f.dim(), 1.0),
        ),
        Covariance::Scaled(s) => (factor_objective(&s.p, &uniqueness(&s.p), psi_bar)?, s.d.clone()),
    };
    Ok(-0.5 * cov_part + data_term(&theta.b.b, &theta.sigma, &scale, posts, data))
}

/// `(sum_{i,t} x x^T)` and its Cholesky factor for the design columns
/// `range`.
pub(crate) fn gram(
    data: &LongitudinalDataset,
    cols: std::ops::Range<usize>,
    name: &'static str,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let width = cols.len();
    let mut g = DMatrix::zeros(width, width);
    for s in &data.subjects {
        let x = s.design_matrix();
        let xs = x.rows(cols.start, width);
        g += &xs * xs.transpose();
    }
    let scale = g.diagonal().amax().max(1e-300);
    let chol = g.clone().cholesky().ok_or(Error::Collinear(name))?;
    let min_pivot = chol.l().diagonal().iter().fold(f64::INFINITY, |a, b| a.min(*b));
    if min_pivot * min_pivot < 1e-12 * scale {
        return Err(Error::Collinear(name));
    }
    Ok(chol)
}

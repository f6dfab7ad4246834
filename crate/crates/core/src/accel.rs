//! Fast posterior moments and marginal log-likelihood.
//!
//! For one subject write `H = diag(sigma)^-1 (x) A` with
//! `A = sum_t (1, g_t)^T (1, g_t)`, the prior of the (scaled) random effects
//! as `E + P P^T` with `E` diagonal, and the scaling `D = diag(d)`. The
//! posterior covariance `(  (E + P P^T)^-1 + D H D )^-1` is block diagonal
//! plus rank `K`:
//!
//! ```text
//! C_j   = (sigma_j I + A S_j)^-1 A,   S_j = diag(d^2 e) restricted to outcome j
//! W     = D C D                       (r blocks of size 2 x 2)
//! F     = (I_K + P^T W P)^-1
//! Omega = (E - E W E) + (I - E W) P F P^T (I - W E)
//! ```
//!
//! and the marginal covariance `V = Z D (E + P P^T) D Z^T + I (x) Sigma` has
//! `log|V| = sum_j [(T - 2) log sigma_j + log|sigma_j I + A S_j|] + log|F^-1|`.
//! `C_j` is written without `A^-1` so subjects with a single visit or a
//! constant time need no special path. Nothing larger than `K x K` is ever
//! factorized.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{uniqueness, Covariance, LongitudinalDataset, ModelParams, PosteriorMoments, Subject};

const BLOCK_DET_TOL: f64 = 1e-14;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `A_i = sum_t (1, g_t)^T (1, g_t)`.
pub fn subject_cross_moment(times: &[f64]) -> Matrix2<f64> {
    let (mut s1, mut s2) = (0.0, 0.0);
    for g in times {
        s1 += g;
        s2 += g * g;
    }
    Matrix2::new(times.len() as f64, s1, s1, s2)
}

/// Random-effect prior in the common form `D (E + P P^T) D`.
#[derive(Debug, Clone)]
pub(crate) struct Prior {
    pub loadings: DMatrix<f64>,
    pub base: DVector<f64>,
    pub scale: DVector<f64>,
}

impl Prior {
    pub fn new(cov: &Covariance) -> Self {
        match cov {
            Covariance::Factor(f) => Prior {
                loadings: f.q.clone(),
                base: f.delta.clone(),
                scale: DVector::from_element(f.dim(), 1.0),
            },
            Covariance::Scaled(s) => Prior {
                loadings: s.p.clone(),
                base: uniqueness(&s.p),
                scale: s.d.clone(),
            },
        }
    }
}

/// Posterior of one subject in factored form: block-diagonal part plus a
/// rank-`K` term.
#[derive(Debug, Clone)]
pub struct FastPosterior {
    pub mean: DVector<f64>,
    blocks: Vec<Matrix2<f64>>,
    /// `(I - E W) P`, `2r x K`.
    basis: DMatrix<f64>,
    /// `basis * F`.
    basis_f: DMatrix<f64>,
    /// Cholesky factor of `F`.
    f_chol: DMatrix<f64>,
    log_det_v: f64,
    quad_form: f64,
    n_obs: usize,
}

impl FastPosterior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn low_rank(&self, a: usize, b: usize) -> f64 {
        self.basis_f.row(a).dot(&self.basis.row(b))
    }

    /// Covariance block of outcome `j` (coordinates `2j`, `2j + 1`).
    pub fn omega_block(&self, j: usize) -> Matrix2<f64> {
        let (a, b) = (2 * j, 2 * j + 1);
        let off = self.low_rank(a, b);
        self.blocks[j] + Matrix2::new(self.low_rank(a, a), off, off, self.low_rank(b, b))
    }

    /// Second-moment block of outcome `j`.
    pub fn psi_block(&self, j: usize) -> Matrix2<f64> {
        let m = Vector2::new(self.mean[2 * j], self.mean[2 * j + 1]);
        self.omega_block(j) + m * m.transpose()
    }

    pub fn omega(&self) -> DMatrix<f64> {
        let mut out = &self.basis_f * self.basis.transpose();
        for (j, blk) in self.blocks.iter().enumerate() {
            let mut v = out.fixed_view_mut::<2, 2>(2 * j, 2 * j);
            v += blk;
        }
        symmetrize(&mut out);
        out
    }

    pub fn psi(&self) -> DMatrix<f64> {
        let mut out = self.omega();
        out.ger(1.0, &self.mean, &self.mean, 1.0);
        out
    }

    pub fn moments(&self) -> PosteriorMoments {
        PosteriorMoments::from_mean_cov(self.mean.clone(), self.omega())
    }

    /// Append the rank-`(K + 1)` part of `Psi` as columns `[basis L_F, m]`
    /// (with `F = L_F L_F^T`) and add the block-diagonal part into `blocks`.
    fn push_factors(&self, cols: &mut Vec<DVector<f64>>, blocks: &mut [Matrix2<f64>]) {
        let bl = &self.basis * &self.f_chol;
        cols.extend(bl.column_iter().map(|c| c.into_owned()));
        cols.push(self.mean.clone());
        for (acc, blk) in blocks.iter_mut().zip(&self.blocks) {
            *acc += blk;
        }
    }

    /// Marginal log-density of the subject's responses.
    pub fn loglik(&self) -> f64 {
        -0.5 * (self.n_obs as f64 * LN_2PI + self.log_det_v + self.quad_form)
    }
}

/// `(1/n) sum_i Psi_i`, accumulated in subject order.
pub fn mean_second_moment(posteriors: &[FastPosterior]) -> DMatrix<f64> {
    let dim = posteriors.first().map_or(0, |p| p.dim());
    let n = posteriors.len() as f64;
    let mut blocks = vec![Matrix2::zeros(); dim / 2];
    let mut cols = Vec::new();
    for post in posteriors {
        post.push_factors(&mut cols, &mut blocks);
    }
    let h = DMatrix::from_columns(&cols);
    let mut out = &h * h.transpose();
    for (j, blk) in blocks.iter().enumerate() {
        let mut v = out.fixed_view_mut::<2, 2>(2 * j, 2 * j);
        v += blk;
    }
    out /= n;
    symmetrize(&mut out);
    out
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for a in 0..n {
        for b in a + 1..n {
            let v = 0.5 * (m[(a, b)] + m[(b, a)]);
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
}

fn inverse_2x2(m: &Matrix2<f64>, what: impl FnOnce() -> String) -> Result<Matrix2<f64>> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let scale = m.amax().powi(2);
    if !(det.abs() > BLOCK_DET_TOL * scale) || !det.is_finite() {
        return Err(Error::Singular { what: what(), det });
    }
    Ok(Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det)
}

/// Residuals `y_t - B x_t` as an `r x T` matrix.
pub(crate) fn residuals(b: &DMatrix<f64>, design: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    y - b * design
}

/// Posterior and marginal likelihood pieces of one subject from its residuals.
pub(crate) fn fast_posterior(
    prior: &Prior,
    sigma: &DVector<f64>,
    times: &[f64],
    resid: &DMatrix<f64>,
) -> Result<FastPosterior> {
    let r = sigma.len();
    let k = prior.loadings.ncols();
    let t_count = times.len();
    let a = subject_cross_moment(times);
    let e = &prior.base;
    let d = &prior.scale;
    let p = &prior.loadings;

    let mut blocks = Vec::with_capacity(r);
    let mut w_blocks = Vec::with_capacity(r);
    let mut log_det_v = 0.0;
    let mut v = DVector::zeros(2 * r);
    let mut sum_sq = 0.0;
    for j in 0..r {
        let (i0, i1) = (2 * j, 2 * j + 1);
        let sj = sigma[j];
        let s = Vector2::new(d[i0] * d[i0] * e[i0], d[i1] * d[i1] * e[i1]);
        let m = Matrix2::new(
            sj + a[(0, 0)] * s[0],
            a[(0, 1)] * s[1],
            a[(1, 0)] * s[0],
            sj + a[(1, 1)] * s[1],
        );
        let m_inv = inverse_2x2(&m, || format!("2x2 block of outcome {j}"))?;
        let mut c = m_inv * a;
        let off = 0.5 * (c[(0, 1)] + c[(1, 0)]);
        c[(0, 1)] = off;
        c[(1, 0)] = off;
        let det_m = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        log_det_v += (t_count as f64 - 2.0) * sj.ln() + det_m.ln();

        let dd = Matrix2::from_diagonal(&Vector2::new(d[i0], d[i1]));
        let ee = Matrix2::from_diagonal(&Vector2::new(e[i0], e[i1]));
        let w = dd * c * dd;
        blocks.push(ee - ee * w * ee);
        w_blocks.push(w);

        let (mut s0, mut s1) = (0.0, 0.0);
        for (t, g) in times.iter().enumerate() {
            let res = resid[(j, t)];
            s0 += res;
            s1 += g * res;
            sum_sq += res * res / sj;
        }
        v[i0] = d[i0] * s0 / sj;
        v[i1] = d[i1] * s1 / sj;
    }

    // W P, then the K x K capacitance I + P^T W P.
    let mut wp = DMatrix::zeros(2 * r, k);
    for (j, w) in w_blocks.iter().enumerate() {
        let rows = p.rows(2 * j, 2);
        let prod = w * rows;
        wp.rows_mut(2 * j, 2).copy_from(&prod);
    }
    let mut cap = p.transpose() * &wp;
    for i in 0..k {
        cap[(i, i)] += 1.0;
    }
    let cap_sym = 0.5 * (&cap + cap.transpose());
    let chol = cap_sym
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular {
            what: "K x K capacitance matrix".into(),
            det: cap_sym.determinant(),
        })?;
    log_det_v += 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let f = chol.inverse();
    let f_chol = f
        .clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Singular {
            what: "inverse capacitance".into(),
            det: f.determinant(),
        })?;

    let mut basis = p.clone();
    for row in 0..2 * r {
        for col in 0..k {
            basis[(row, col)] -= e[row] * wp[(row, col)];
        }
    }
    let basis_f = &basis * &f;

    // m = Omega v
    let proj = basis.transpose() * &v;
    let mut mean = &basis_f * proj;
    for (j, blk) in blocks.iter().enumerate() {
        let vj = Vector2::new(v[2 * j], v[2 * j + 1]);
        let mj = blk * vj;
        mean[2 * j] += mj[0];
        mean[2 * j + 1] += mj[1];
    }
    let quad_form = sum_sq - v.dot(&mean);

    Ok(FastPosterior {
        mean,
        blocks,
        basis,
        basis_f,
        f_chol,
        log_det_v,
        quad_form,
        n_obs: r * t_count,
    })
}

pub(crate) fn subject_posterior(
    prior: &Prior,
    theta: &ModelParams,
    subject: &Subject,
) -> Result<FastPosterior> {
    let x = subject.design_matrix();
    let resid = residuals(&theta.b.b, &x, &subject.y);
    fast_posterior(prior, &theta.sigma, &subject.times, &resid)
}

fn check_subject(theta: &ModelParams, subject: &Subject) -> Result<()> {
    if subject.y.nrows() != theta.r() {
        return Err(Error::Dimension {
            what: "subject outcomes",
            expected: theta.r(),
            actual: subject.y.nrows(),
        });
    }
    let p = 2 + 2 * subject.u.len() + subject.w.nrows();
    if p != theta.b.b.ncols() {
        return Err(Error::Dimension {
            what: "fixed-effect design",
            expected: theta.b.b.ncols(),
            actual: p,
        });
    }
    Ok(())
}

/// Posterior moments of `eta_i` under the scaled-correlation parameterization.
pub fn posterior_eta(theta: &ModelParams, subject: &Subject) -> Result<PosteriorMoments> {
    if !matches!(theta.cov, Covariance::Scaled(_)) {
        return Err(Error::Config("posterior_eta needs the (P, d) parameterization".into()));
    }
    check_subject(theta, subject)?;
    Ok(subject_posterior(&Prior::new(&theta.cov), theta, subject)?.moments())
}

/// Posterior moments of `zeta_i` under the factor parameterization.
pub fn posterior_zeta(theta: &ModelParams, subject: &Subject) -> Result<PosteriorMoments> {
    if !matches!(theta.cov, Covariance::Factor(_)) {
        return Err(Error::Config("posterior_zeta needs the (Q, delta) parameterization".into()));
    }
    check_subject(theta, subject)?;
    Ok(subject_posterior(&Prior::new(&theta.cov), theta, subject)?.moments())
}

/// Factored posteriors of every subject, evaluated in parallel and returned
/// in subject order.
pub fn posteriors(theta: &ModelParams, data: &LongitudinalDataset) -> Result<Vec<FastPosterior>> {
    let prior = Prior::new(&theta.cov);
    data.subjects
        .par_iter()
        .map(|s| {
            check_subject(theta, s)?;
            subject_posterior(&prior, theta, s)
        })
        .collect()
}

/// Observed-data log-likelihood, including the `2 pi` constant.
pub fn loglik(theta: &ModelParams, data: &LongitudinalDataset) -> Result<f64> {
    let posts = posteriors(theta, data)?;
    Ok(posts.iter().map(|p| p.loglik()).sum())
}

/// Dense reference computations, used to check the fast kernels.
pub mod oracle {
    use super::*;

    const MAX_DIM: usize = 200;
    const MAX_MARGINAL: usize = 400;

    fn prior_dense(theta: &ModelParams) -> (DMatrix<f64>, DVector<f64>) {
        let prior = Prior::new(&theta.cov);
        let mut base = &prior.loadings * prior.loadings.transpose();
        for k in 0..base.nrows() {
            base[(k, k)] += prior.base[k];
        }
        (base, prior.scale)
    }

    fn z_matrix(r: usize, g: f64) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(r, 2 * r);
        for j in 0..r {
            z[(j, 2 * j)] = 1.0;
            z[(j, 2 * j + 1)] = g;
        }
        z
    }

    /// Posterior moments by direct inversion of the defining formulas:
    /// `Omega = (R^-1 + D (sum_t Z_t^T Sigma^-1 Z_t) D)^-1` and
    /// `m = Omega D sum_t Z_t^T Sigma^-1 (y_t - B x_t)`.
    pub fn posterior_direct_oracle(theta: &ModelParams, subject: &Subject) -> Result<PosteriorMoments> {
        let r = theta.r();
        if 2 * r > MAX_DIM {
            return Err(Error::TooLarge(format!("2r = {} exceeds {MAX_DIM}", 2 * r)));
        }
        check_subject(theta, subject)?;
        let (base, d) = prior_dense(theta);
        let base_inv = base
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular {
                what: "dense prior covariance".into(),
                det: base.determinant(),
            })?;
        let dm = DMatrix::from_diagonal(&d);
        let sigma_inv = DMatrix::from_diagonal(&theta.sigma.map(|s| 1.0 / s));
        let mut info = DMatrix::zeros(2 * r, 2 * r);
        let mut score = DVector::zeros(2 * r);
        for t in 0..subject.n_visits() {
            let z = z_matrix(r, subject.times[t]);
            let zt_si = z.transpose() * &sigma_inv;
            info += &zt_si * &z;
            let res = subject.y.column(t) - &theta.b.b * subject.design(t);
            score += zt_si * res;
        }
        let precision = base_inv + &dm * info * &dm;
        let mut omega = precision
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular {
                what: "dense posterior precision".into(),
                det: precision.determinant(),
            })?;
        symmetrize(&mut omega);
        let m = &omega * (&dm * score);
        Ok(PosteriorMoments::from_mean_cov(m, omega))
    }

    /// Log-likelihood from the dense marginal covariance
    /// `V_i = Z_i D R D Z_i^T + I (x) Sigma`.
    pub fn loglik_direct_oracle(theta: &ModelParams, data: &LongitudinalDataset) -> Result<f64> {
        let r = theta.r();
        let (base, d) = prior_dense(theta);
        let g = DMatrix::from_fn(2 * r, 2 * r, |a, b| d[a] * base[(a, b)] * d[b]);
        let mut total = 0.0;
        for s in &data.subjects {
            let t_count = s.n_visits();
            let dim = r * t_count;
            if dim > MAX_MARGINAL {
                return Err(Error::TooLarge(format!("r T_i = {dim} exceeds {MAX_MARGINAL}")));
            }
            check_subject(theta, s)?;
            let mut z = DMatrix::zeros(dim, 2 * r);
            let mut res = DVector::zeros(dim);
            for t in 0..t_count {
                z.rows_mut(t * r, r).copy_from(&z_matrix(r, s.times[t]));
                let rt = s.y.column(t) - &theta.b.b * s.design(t);
                res.rows_mut(t * r, r).copy_from(&rt);
            }
            let mut v = &z * &g * z.transpose();
            for t in 0..t_count {
                for j in 0..r {
                    v[(t * r + j, t * r + j)] += theta.sigma[j];
                }
            }
            let chol = v.clone().cholesky().ok_or_else(|| Error::Singular {
                what: "dense marginal covariance".into(),
                det: v.determinant(),
            })?;
            let log_det = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            let quad = res.dot(&chol.solve(&res));
            total += -0.5 * (dim as f64 * LN_2PI + log_det + quad);
        }
        Ok(total)
    }
}

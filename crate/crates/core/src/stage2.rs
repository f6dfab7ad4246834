//! Penalized EM under `G = diag(d) R(P) diag(d)`.
//!
//! Every M-step update reduces to a handful of per-outcome sums over
//! subjects. [`DataStats`] holds the ones fixed by the data and
//! [`PostStats`] the ones fixed by an E-step, so the inner `(d, B, sigma)`
//! alternation never touches individual observations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::accel::{mean_second_moment, posteriors, FastPosterior};
use crate::em::{factor_objective, gram, parameter_changes, relative_change, IterRecord};
use crate::error::{Error, Result};
use crate::model::{
    to_scaled, uniqueness, Covariance, Dims, LongitudinalDataset, ModelParams, ScaledCorrelation,
};
use crate::stage1::SIGMA_FLOOR;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdConfig {
    pub max_steps: usize,
    pub step_init: f64,
    pub backtrack_factor: f64,
    pub armijo_const: f64,
    /// Rows of `P` are kept at norm `<= 1 - row_margin`.
    pub row_margin: f64,
    /// Stop once the gradient mapping norm falls below this.
    pub tol: f64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig {
            max_steps: 100,
            step_init: 1.0,
            backtrack_factor: 0.5,
            armijo_const: 1e-4,
            row_margin: 1e-3,
            tol: 1e-6,
        }
    }
}

/// When the adaptive weights `d_bar`, `B2_bar` are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightSchedule {
    /// Once, at the first stage-2 iteration; keeps the penalized objective
    /// fixed so that EM stays monotone.
    #[default]
    Frozen,
    /// Recomputed from the current state at every inner sub-iteration.
    Refresh,
}

/// Penalty candidates: log-spaced `[lo, hi] * scale` with a data-dependent
/// scale, or an explicit list.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaGrid {
    LogSpaced { size: usize, lo: f64, hi: f64 },
    Fixed(Vec<f64>),
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::LogSpaced {
            size: 20,
            lo: 1e-4,
            hi: 1e1,
        }
    }
}

impl LambdaGrid {
    /// The default range with `size` points.
    pub fn log_spaced(size: usize) -> Self {
        match LambdaGrid::default() {
            LambdaGrid::LogSpaced { lo, hi, .. } => LambdaGrid::LogSpaced { size, lo, hi },
            other => other,
        }
    }

    pub fn values(&self, scale: f64) -> Vec<f64> {
        match self {
            LambdaGrid::Fixed(v) => v.clone(),
            &LambdaGrid::LogSpaced { size, lo, hi } => {
                let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
                if size == 1 {
                    return vec![lo * scale];
                }
                let (a, b) = (lo.ln(), hi.ln());
                (0..size)
                    .map(|i| scale * (a + (b - a) * i as f64 / (size - 1) as f64).exp())
                    .collect()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            LambdaGrid::Fixed(v) => !v.is_empty() && v.iter().all(|x| *x >= 0.0 && x.is_finite()),
            &LambdaGrid::LogSpaced { size, lo, hi } => size > 0 && lo > 0.0 && hi >= lo && hi.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("penalty grid must be nonempty with nonnegative finite values".into()))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Config {
    pub tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub pgd: PgdConfig,
    pub lambda_d: f64,
    pub lambda_b: f64,
    pub tune_per_iteration: bool,
    pub grid_d: LambdaGrid,
    pub grid_b: LambdaGrid,
    pub weights: WeightSchedule,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            tol: 1e-3,
            max_outer: 500,
            max_inner: 50,
            pgd: PgdConfig::default(),
            lambda_d: 0.0,
            lambda_b: 0.0,
            tune_per_iteration: true,
            grid_d: LambdaGrid::default(),
            grid_b: LambdaGrid::default(),
            weights: WeightSchedule::Frozen,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.tol > 0.0) {
            return bad("tolerance must be positive");
        }
        if self.max_outer == 0 || self.max_inner == 0 || self.pgd.max_steps == 0 {
            return bad("iteration caps must be at least 1");
        }
        let f = self.pgd.backtrack_factor;
        if !(f > 0.0 && f < 1.0) {
            return bad("backtrack factor must lie in (0, 1)");
        }
        let m = self.pgd.row_margin;
        if !(m > 0.0 && m < 1.0) {
            return bad("row margin must lie in (0, 1)");
        }
        if !(self.pgd.step_init > 0.0) || !(self.pgd.armijo_const > 0.0) {
            return bad("line search constants must be positive");
        }
        if !(self.lambda_d >= 0.0) || !(self.lambda_b >= 0.0) {
            return bad("penalties must be nonnegative");
        }
        self.grid_d.validate()?;
        self.grid_b.validate()
    }
}

/// Unpenalized reference estimates dividing the adaptive penalties.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveWeights {
    pub d_bar: DVector<f64>,
    pub b2_bar: DMatrix<f64>,
    /// Outcomes whose slope curvature `a_j` vanished, so `d_bar_j = 0`.
    pub degenerate: Vec<usize>,
}

/// Sums fixed by the data alone.
#[derive(Debug, Clone)]
pub struct DataStats {
    pub dims: Dims,
    pub n_obs: usize,
    /// `sum_{i,t} x x^T`.
    pub gram: DMatrix<f64>,
    /// `sum_{i,t} y x^T`.
    pub yx: DMatrix<f64>,
    /// `sum_{i,t} y_j^2`.
    pub yy: DVector<f64>,
    /// Per subject `sum_t x` and `sum_t g x`, `n x p`.
    x0: DMatrix<f64>,
    x1: DMatrix<f64>,
    /// Per subject `sum_t y` and `sum_t g y`, `r x n`.
    y0: DMatrix<f64>,
    y1: DMatrix<f64>,
    t: Vec<f64>,
    g1: Vec<f64>,
    g2: Vec<f64>,
    chol1: Cholesky<f64, Dyn>,
    chol2: Cholesky<f64, Dyn>,
}

impl DataStats {
    pub fn new(data: &LongitudinalDataset) -> Result<Self> {
        let dims = data.dims;
        let (n, r, p) = (dims.n, dims.r, dims.p());
        let mut gram_m = DMatrix::zeros(p, p);
        let mut yx = DMatrix::zeros(r, p);
        let mut yy = DVector::zeros(r);
        let mut x0 = DMatrix::zeros(n, p);
        let mut x1 = DMatrix::zeros(n, p);
        let mut y0 = DMatrix::zeros(r, n);
        let mut y1 = DMatrix::zeros(r, n);
        let (mut t, mut g1, mut g2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for (i, s) in data.subjects.iter().enumerate() {
            let x = s.design_matrix();
            gram_m += &x * x.transpose();
            yx += &s.y * x.transpose();
            for (tt, g) in s.times.iter().enumerate() {
                for a in 0..p {
                    x0[(i, a)] += x[(a, tt)];
                    x1[(i, a)] += g * x[(a, tt)];
                }
                for j in 0..r {
                    let v = s.y[(j, tt)];
                    y0[(j, i)] += v;
                    y1[(j, i)] += g * v;
                    yy[j] += v * v;
                }
                g1[i] += g;
                g2[i] += g * g;
            }
            t[i] = s.n_visits() as f64;
        }
        gram(data, 0..p, "x")?;
        let chol1 = gram(data, 0..dims.p1(), "x1")?;
        let chol2 = gram(data, dims.p1()..p, "x2")?;
        Ok(DataStats {
            dims,
            n_obs: data.total_visits(),
            gram: gram_m,
            yx,
            yy,
            x0,
            x1,
            y0,
            y1,
            t,
            g1,
            g2,
            chol1,
            chol2,
        })
    }

    fn n(&self) -> f64 {
        self.dims.n as f64
    }
}

/// Sums fixed by one E-step.
#[derive(Debug, Clone)]
pub struct PostStats {
    /// `sum_i T_i Psi_{2j,2j}`, `sum_i (sum_t g) Psi_{2j,2j+1}`,
    /// `sum_i (sum_t g^2) Psi_{2j+1,2j+1}`.
    pub a0: DVector<f64>,
    pub a01: DVector<f64>,
    pub a11: DVector<f64>,
    /// `sum_i m_{2j} sum_t y_j` and `sum_i m_{2j+1} sum_t g y_j`.
    pub u0: DVector<f64>,
    pub u1: DVector<f64>,
    /// `sum_i m_{2j} sum_t x` and `sum_i m_{2j+1} sum_t g x`, `r x p`.
    pub v0: DMatrix<f64>,
    pub v1: DMatrix<f64>,
    pub psi_bar: DMatrix<f64>,
    /// Observed-data log-likelihood at the E-step's parameters.
    pub loglik: f64,
}

impl PostStats {
    pub fn new(ds: &DataStats, posts: &[FastPosterior]) -> Self {
        let (n, r) = (ds.dims.n, ds.dims.r);
        let mut m0 = DMatrix::zeros(r, n);
        let mut m1 = DMatrix::zeros(r, n);
        let mut a0 = DVector::zeros(r);
        let mut a01 = DVector::zeros(r);
        let mut a11 = DVector::zeros(r);
        for (i, post) in posts.iter().enumerate() {
            for j in 0..r {
                m0[(j, i)] = post.mean[2 * j];
                m1[(j, i)] = post.mean[2 * j + 1];
                let psi = post.psi_block(j);
                a0[j] += ds.t[i] * psi[(0, 0)];
                a01[j] += ds.g1[i] * psi[(0, 1)];
                a11[j] += ds.g2[i] * psi[(1, 1)];
            }
        }
        let u0 = m0.component_mul(&ds.y0).column_sum();
        let u1 = m1.component_mul(&ds.y1).column_sum();
        PostStats {
            a0,
            a01,
            a11,
            u0,
            u1,
            v0: &m0 * &ds.x0,
            v1: &m1 * &ds.x1,
            psi_bar: mean_second_moment(posts),
            loglik: posts.iter().map(|p| p.loglik()).sum(),
        }
    }

    /// `sum_i m_{2j} sum_t res_j` and `sum_i m_{2j+1} sum_t g res_j`.
    fn resid_cross(&self, j: usize, b: &DMatrix<f64>) -> (f64, f64) {
        (
            self.u0[j] - b.row(j).dot(&self.v0.row(j)),
            self.u1[j] - b.row(j).dot(&self.v1.row(j)),
        )
    }
}

/// Closed-form intercept scale `d_{2j}` given the current slope scale.
pub fn update_d_odd(j: usize, ps: &PostStats, b: &DMatrix<f64>, d_even: f64) -> Result<f64> {
    let den = ps.a0[j];
    if !(den > 0.0) {
        return Err(Error::DegeneratePosterior(j));
    }
    let (c0, _) = ps.resid_cross(j, b);
    Ok((c0 - d_even * ps.a01[j]) / den)
}

/// Curvature `a_j` and linear term `c_j` of the slope-scale subproblem
/// `(a/2) d^2 - c d + lambda |d| / |d_bar|`.
pub fn even_coefficients(
    j: usize,
    ds: &DataStats,
    ps: &PostStats,
    b: &DMatrix<f64>,
    d_odd: f64,
    sigma_j: f64,
) -> (f64, f64) {
    let f = 2.0 / (ds.n() * sigma_j);
    let (_, c1) = ps.resid_cross(j, b);
    (f * ps.a11[j], f * (c1 - d_odd * ps.a01[j]))
}

/// Adaptive soft-threshold solution of the slope-scale subproblem.
/// A zero reference estimate means an infinite weight and returns zero.
pub fn threshold_d(a: f64, c: f64, lambda: f64, d_bar: f64) -> Result<f64> {
    if a == 0.0 {
        return if c == 0.0 {
            Ok(0.0)
        } else {
            Err(Error::DegenerateDesign(0))
        };
    }
    if lambda == 0.0 {
        return Ok(c / a);
    }
    if d_bar == 0.0 {
        return Ok(0.0);
    }
    Ok(soft(c, lambda / d_bar.abs()) / a)
}

fn soft(x: f64, t: f64) -> f64 {
    let m = x.abs() - t;
    if m > 0.0 {
        m.copysign(x)
    } else {
        0.0
    }
}

/// One sweep over outcomes: intercept scale first, then slope scale.
/// With `d_bar = None` the reference estimate is the current `c_j / a_j`.
/// Returns the new `d` and the `c_j / a_j` values seen along the way.
pub fn update_d(
    ds: &DataStats,
    ps: &PostStats,
    b: &DMatrix<f64>,
    d: &DVector<f64>,
    sigma: &DVector<f64>,
    lambda: f64,
    d_bar: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let r = ds.dims.r;
    let mut out = d.clone();
    let mut ols = DVector::zeros(r);
    for j in 0..r {
        let d0 = update_d_odd(j, ps, b, d[2 * j + 1])?;
        let (a, c) = even_coefficients(j, ds, ps, b, d0, sigma[j]);
        if a == 0.0 && c != 0.0 {
            return Err(Error::DegenerateDesign(j));
        }
        let here = if a == 0.0 { 0.0 } else { c / a };
        ols[j] = here;
        let weight = d_bar.map_or(here, |w| w[j]);
        out[2 * j] = d0;
        out[2 * j + 1] = threshold_d(a, c, lambda, weight)?;
    }
    Ok((out, ols))
}

/// `sum (y - Z diag(d) m) x^T`, `r x p`.
fn adjusted_cross(ds: &DataStats, ps: &PostStats, d: &DVector<f64>) -> DMatrix<f64> {
    let mut out = ds.yx.clone();
    for j in 0..ds.dims.r {
        let adj = ps.v0.row(j) * d[2 * j] + ps.v1.row(j) * d[2 * j + 1];
        let mut row = out.row_mut(j);
        row -= adj;
    }
    out
}

/// Closed-form unpenalized block `B1` given `B2` and `d`.
pub fn update_b1(ds: &DataStats, ps: &PostStats, b2: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let p1 = ds.dims.p1();
    let q = ds.dims.p2();
    let cross = adjusted_cross(ds, ps, d);
    let g21 = ds.gram.view((p1, 0), (q, p1));
    let rhs = cross.columns(0, p1) - b2 * g21;
    ds.chol1.solve(&rhs.transpose()).transpose()
}

/// `sum (y - B1 x1 - Z diag(d) m) x2^T`, the unscaled score of `B2` at zero.
pub(crate) fn b2_score(ds: &DataStats, ps: &PostStats, b1: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let p1 = ds.dims.p1();
    let q = ds.dims.p2();
    let cross = adjusted_cross(ds, ps, d);
    let g12 = ds.gram.view((0, p1), (p1, q));
    cross.columns(p1, q) - b1 * g12
}

/// Unpenalized `B2` given `B1` and `d`.
pub fn ols_b2(ds: &DataStats, ps: &PostStats, b1: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let score = b2_score(ds, ps, b1, d);
    ds.chol2.solve(&score.transpose()).transpose()
}

/// Coordinate-descent solution of the adaptive-lasso problem in `B2`, warm
/// started at `init`. Rows decouple; each row minimizes
/// `1/2 b^T H b - s^T b + lambda sum |b_k| / |b_bar_k|` with
/// `H = G22 / (n sigma_j)`.
#[allow(clippy::too_many_arguments)]
pub fn update_b2(
    ds: &DataStats,
    ps: &PostStats,
    b1: &DMatrix<f64>,
    d: &DVector<f64>,
    sigma: &DVector<f64>,
    lambda: f64,
    b2_bar: &DMatrix<f64>,
    init: &DMatrix<f64>,
    tol: f64,
    max_sweeps: usize,
) -> DMatrix<f64> {
    let p1 = ds.dims.p1();
    let q = ds.dims.p2();
    let score = b2_score(ds, ps, b1, d);
    let g22 = ds.gram.view((p1, p1), (q, q));
    let mut out = init.clone();
    for j in 0..ds.dims.r {
        let f = 1.0 / (ds.n() * sigma[j]);
        let thresholds: Vec<f64> = (0..q)
            .map(|k| {
                if lambda == 0.0 {
                    0.0
                } else if b2_bar[(j, k)] == 0.0 {
                    f64::INFINITY
                } else {
                    lambda / b2_bar[(j, k)].abs()
                }
            })
            .collect();
        for _ in 0..max_sweeps {
            let mut delta: f64 = 0.0;
            for k in 0..q {
                let hkk = f * g22[(k, k)];
                let mut rho = f * score[(j, k)];
                for l in 0..q {
                    if l != k {
                        rho -= f * g22[(k, l)] * out[(j, l)];
                    }
                }
                let new = soft(rho, thresholds[k]) / hkk;
                delta = delta.max((new - out[(j, k)]).abs());
                out[(j, k)] = new;
            }
            if delta < tol {
                break;
            }
        }
    }
    out
}

/// Noise variances given `B` and `d`, floored.
pub fn update_sigma_sparse(
    ds: &DataStats,
    ps: &PostStats,
    b: &DMatrix<f64>,
    d: &DVector<f64>,
) -> DVector<f64> {
    let n_obs = ds.n_obs as f64;
    DVector::from_fn(ds.dims.r, |j, _| {
        (expected_sq_error(j, ds, ps, b, d) / n_obs).max(SIGMA_FLOOR)
    })
}

/// `sum_{i,t} E[(y - B x - Z diag(d) eta)_j^2]` under the posteriors.
fn expected_sq_error(j: usize, ds: &DataStats, ps: &PostStats, b: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    let (d0, d1) = (d[2 * j], d[2 * j + 1]);
    let bj = b.row(j);
    let rss = ds.yy[j] - 2.0 * bj.dot(&ds.yx.row(j)) + (bj * &ds.gram).dot(&bj);
    let (c0, c1) = ps.resid_cross(j, b);
    let var = d0 * d0 * ps.a0[j] + 2.0 * d0 * d1 * ps.a01[j] + d1 * d1 * ps.a11[j];
    var + rss - 2.0 * (d0 * c0 + d1 * c1)
}

/// The EM surrogate from the sufficient statistics; agrees with
/// [`crate::em::q_function`] for the scaled parameterization.
pub fn q_value(ds: &DataStats, ps: &PostStats, theta: &ModelParams) -> Result<f64> {
    let s = theta.cov.as_scaled();
    let cov_part = factor_objective(&s.p, &uniqueness(&s.p), &ps.psi_bar)?;
    let n = ds.n();
    let mut data = 0.0;
    for j in 0..ds.dims.r {
        let sj = theta.sigma[j];
        data -= 0.5 * ds.n_obs as f64 / n * sj.ln();
        data -= 0.5 * expected_sq_error(j, ds, ps, &theta.b.b, &s.d) / (sj * n);
    }
    Ok(-0.5 * cov_part + data)
}

/// `(lambda_d / 2) sum |d_{2j+1}| / |d_bar_j| + lambda_B sum |B2| / |B2_bar|`.
/// Coordinates with a zero reference estimate contribute nothing; the
/// updates pin them at zero.
pub fn penalty(theta: &ModelParams, weights: &AdaptiveWeights, lambda_d: f64, lambda_b: f64) -> f64 {
    let ratio = |x: f64, w: f64| if x == 0.0 || w == 0.0 { 0.0 } else { (x / w).abs() };
    let d = match &theta.cov {
        Covariance::Scaled(s) => s.d.clone(),
        Covariance::Factor(f) => to_scaled(f).d,
    };
    let mut pd = 0.0;
    for j in 0..theta.r() {
        pd += ratio(d[2 * j + 1], weights.d_bar[j]);
    }
    let b2 = theta.b.b2();
    let pb: f64 = b2.iter().zip(weights.b2_bar.iter()).map(|(x, w)| ratio(*x, *w)).sum();
    let mut out = 0.0;
    if lambda_d > 0.0 {
        out += 0.5 * lambda_d * pd;
    }
    if lambda_b > 0.0 {
        out += lambda_b * pb;
    }
    out
}

/// Reference estimates at the current state: one unpenalized sweep of the
/// `d` updates, then the unpenalized `B2` given the current `B1`.
pub fn compute_adaptive_weights(
    ds: &DataStats,
    ps: &PostStats,
    theta: &ModelParams,
) -> Result<AdaptiveWeights> {
    let s = theta.cov.as_scaled();
    let r = ds.dims.r;
    let mut d = s.d.clone();
    let mut d_bar = DVector::zeros(r);
    let mut degenerate = Vec::new();
    for j in 0..r {
        let d0 = update_d_odd(j, ps, &theta.b.b, d[2 * j + 1])?;
        let (a, c) = even_coefficients(j, ds, ps, &theta.b.b, d0, theta.sigma[j]);
        if a == 0.0 {
            degenerate.push(j);
        } else {
            d_bar[j] = c / a;
        }
        d[2 * j] = d0;
        d[2 * j + 1] = d_bar[j];
    }
    let b2_bar = ols_b2(ds, ps, &theta.b.b1(), &d);
    Ok(AdaptiveWeights {
        d_bar,
        b2_bar,
        degenerate,
    })
}

/// `f(P) = log|R(P)| + tr(R(P)^-1 psi_bar)`.
pub fn p_objective(p: &DMatrix<f64>, psi_bar: &DMatrix<f64>) -> Result<f64> {
    factor_objective(p, &uniqueness(p), psi_bar)
}

/// Gradient of [`p_objective`]: `2 (M P - diag(M) P)` with
/// `M = R^-1 - R^-1 psi_bar R^-1`, evaluated through the `K x K`
/// capacitance of `R = E + P P^T`.
pub fn p_gradient(p: &DMatrix<f64>, psi_bar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = uniqueness(p);
    if e.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Constraint("rows of P must have norm < 1".into()));
    }
    let k = p.ncols();
    let einv = e.map(|v| 1.0 / v);
    let mut u = p.clone();
    for (mut row, s) in u.row_iter_mut().zip(einv.iter()) {
        row *= *s;
    }
    let mut cap = p.transpose() * &u;
    for i in 0..k {
        cap[(i, i)] += 1.0;
    }
    let chol = cap.clone().cholesky().ok_or_else(|| Error::Singular {
        what: "correlation capacitance".into(),
        det: cap.determinant(),
    })?;
    // R^-1 = E^-1 - L L^T
    let l = chol
        .l()
        .solve_lower_triangular(&u.transpose())
        .expect("Cholesky factor is nonsingular")
        .transpose();
    let rinv = |x: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = x.clone();
        for (mut row, s) in out.row_iter_mut().zip(einv.iter()) {
            row *= *s;
        }
        out - &l * (l.transpose() * x)
    };
    let y = rinv(p);
    let z = rinv(&(psi_bar * &y));
    let psi_l = psi_bar * &l;
    let inner = l.transpose() * &psi_l;
    let l_inner = &l * &inner;
    let dim = p.nrows();
    let mut grad = (y - z) * 2.0;
    for a in 0..dim {
        let la = l.row(a);
        let diag_rinv = einv[a] - la.norm_squared();
        let diag_sandwich = psi_bar[(a, a)] * einv[a] * einv[a] - 2.0 * einv[a] * psi_l.row(a).dot(&la)
            + l_inner.row(a).dot(&la);
        let m_aa = diag_rinv - diag_sandwich;
        let adj = p.row(a) * (2.0 * m_aa);
        let mut row = grad.row_mut(a);
        row -= adj;
    }
    Ok(grad)
}

/// Rescale rows with norm above `1 - margin` onto that sphere.
pub fn project_rows(p: &mut DMatrix<f64>, margin: f64) {
    let cap = 1.0 - margin;
    for mut row in p.row_iter_mut() {
        let norm = row.norm();
        if norm > cap {
            row *= cap / norm;
        }
    }
}

#[derive(Debug, Clone)]
pub struct PgdOutcome {
    pub p: DMatrix<f64>,
    pub objective: f64,
    pub steps: usize,
    /// Objective after each accepted step, starting with the initial value.
    pub path: Vec<f64>,
}

/// Projected gradient descent on [`p_objective`] with Armijo backtracking
/// along the projection arc.
pub fn update_p(psi_bar: &DMatrix<f64>, p_init: &DMatrix<f64>, cfg: &PgdConfig) -> Result<PgdOutcome> {
    let mut p = p_init.clone();
    project_rows(&mut p, cfg.row_margin);
    let mut f = p_objective(&p, psi_bar)?;
    let mut path = vec![f];
    let mut steps = 0;
    'outer: while steps < cfg.max_steps {
        let g = p_gradient(&p, psi_bar)?;
        let mut t = cfg.step_init;
        loop {
            let mut cand = &p - &g * t;
            project_rows(&mut cand, cfg.row_margin);
            let diff = &cand - &p;
            let slope = g.dot(&diff);
            if diff.amax() == 0.0 || slope >= 0.0 {
                break 'outer;
            }
            let fc = p_objective(&cand, psi_bar).unwrap_or(f64::INFINITY);
            if fc <= f + cfg.armijo_const * slope {
                steps += 1;
                let mapping = diff.norm() / t;
                p = cand;
                f = fc;
                path.push(f);
                if mapping < cfg.tol {
                    break 'outer;
                }
                break;
            }
            t *= cfg.backtrack_factor;
            if t < 1e-12 {
                break 'outer;
            }
        }
    }
    Ok(PgdOutcome {
        p,
        objective: f,
        steps,
        path,
    })
}

/// `(P, d)` from a stage-1 fit, with rows of `P` pulled inside the feasible
/// margin; `B` and `sigma` pass through.
pub fn init_stage2(theta1: &ModelParams, row_margin: f64) -> ModelParams {
    let mut s = theta1.cov.as_scaled();
    project_rows(&mut s.p, row_margin);
    ModelParams {
        cov: Covariance::Scaled(s),
        ..theta1.clone()
    }
}

/// Flip `(d_k, P_k)` jointly so every scale is nonnegative; `G` is unchanged.
pub fn canonicalize(s: &mut ScaledCorrelation) {
    for k in 0..s.d.len() {
        if s.d[k] < 0.0 {
            s.d[k] = -s.d[k];
            s.p.row_mut(k).neg_mut();
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Fit {
    pub params: ModelParams,
    pub loglik: f64,
    pub trace: Vec<IterRecord>,
    pub converged: bool,
    pub iterations: usize,
    pub weights: AdaptiveWeights,
    /// Penalties in force at the last iteration.
    pub lambda_d: f64,
    pub lambda_b: f64,
    /// `true` where the random-slope scale is nonzero.
    pub slope_mask: Vec<bool>,
    /// `true` where the `B2` entry is nonzero.
    pub b2_mask: DMatrix<bool>,
    /// BIC tables of the last tuning round, empty when the penalties are fixed.
    pub lambda_reports: Vec<crate::tuning::BicReport>,
}

/// Penalized `(d, B, sigma)` state iterated by the inner loop.
#[derive(Debug, Clone)]
pub(crate) struct InnerState {
    pub d: DVector<f64>,
    pub b: DMatrix<f64>,
    pub sigma: DVector<f64>,
}

/// One inner sub-iteration: `d`, then `B1`, then `B2`, then `sigma`.
/// Coordinate sweeps over (d, B, sigma) with the posteriors held fixed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn m_step(
    ds: &DataStats,
    ps: &PostStats,
    start: &InnerState,
    lambda_d: f64,
    lambda_b: f64,
    frozen: Option<&AdaptiveWeights>,
    max_sweeps: usize,
    tol: f64,
) -> Result<InnerState> {
    let mut state = start.clone();
    for _ in 0..max_sweeps.max(1) {
        let next = inner_sweep(ds, ps, &state, lambda_d, lambda_b, frozen, CD_TOL)?;
        let change = relative_change(next.d.iter(), state.d.iter())
            .max(relative_change(next.b.iter(), state.b.iter()))
            .max(relative_change(next.sigma.iter(), state.sigma.iter()));
        state = next;
        if change < tol {
            break;
        }
    }
    Ok(state)
}

pub(crate) fn inner_sweep(
    ds: &DataStats,
    ps: &PostStats,
    state: &InnerState,
    lambda_d: f64,
    lambda_b: f64,
    frozen: Option<&AdaptiveWeights>,
    cd_tol: f64,
) -> Result<InnerState> {
    let p1 = ds.dims.p1();
    let q = ds.dims.p2();
    let (d, _) = update_d(
        ds,
        ps,
        &state.b,
        &state.d,
        &state.sigma,
        lambda_d,
        frozen.map(|w| &w.d_bar),
    )?;
    let b2_old = state.b.columns(p1, q).into_owned();
    let b1 = update_b1(ds, ps, &b2_old, &d);
    let b2_bar = match frozen {
        Some(w) => w.b2_bar.clone(),
        None => ols_b2(ds, ps, &b1, &d),
    };
    let b2 = update_b2(ds, ps, &b1, &d, &state.sigma, lambda_b, &b2_bar, &b2_old, cd_tol, 1000);
    let mut b = state.b.clone();
    b.columns_mut(0, p1).copy_from(&b1);
    b.columns_mut(p1, q).copy_from(&b2);
    let sigma = update_sigma_sparse(ds, ps, &b, &d);
    Ok(InnerState { d, b, sigma })
}

/// Coordinate-descent tolerance for the `B2` subproblem.
const CD_TOL: f64 = 1e-10;

/// Run the stage-2 EM from `theta0` (either parameterization).
pub fn fit_stage2(data: &LongitudinalDataset, theta0: &ModelParams, cfg: &Stage2Config) -> Result<Stage2Fit> {
    cfg.validate()?;
    let ds = DataStats::new(data)?;
    let mut theta = init_stage2(theta0, cfg.pgd.row_margin);
    let n = data.subjects.len() as f64;
    let (mut lambda_d, mut lambda_b) = (cfg.lambda_d, cfg.lambda_b);
    let mut frozen: Option<AdaptiveWeights> = None;
    let mut last_weights = None;
    let mut lambda_reports = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cfg.max_outer {
        let posts = posteriors(&theta, data)?;
        let ps = PostStats::new(&ds, &posts);
        let here = compute_adaptive_weights(&ds, &ps, &theta)?;
        if cfg.weights == WeightSchedule::Frozen && frozen.is_none() {
            frozen = Some(here.clone());
        }
        let weights = frozen.clone().unwrap_or(here);

        let s = theta.cov.as_scaled();
        let pgd = update_p(&ps.psi_bar, &s.p, &cfg.pgd)?;
        let mut state = InnerState {
            d: s.d.clone(),
            b: theta.b.b.clone(),
            sigma: theta.sigma.clone(),
        };
        let objective;
        if cfg.tune_per_iteration {
            let choice = crate::tuning::tune_lambdas(
                data,
                &ds,
                &ps,
                &pgd.p,
                &state,
                frozen.as_ref(),
                &cfg.grid_d,
                &cfg.grid_b,
                lambda_b,
                cfg.max_inner,
                cfg.tol,
            )?;
            lambda_d = choice.lambda_d;
            lambda_b = choice.lambda_b;
            lambda_reports = choice.reports_d.into_iter().chain(choice.reports_b).collect();
            objective = -ps.loglik / n + penalty(&theta, &weights, lambda_d, lambda_b);
            state = choice.state;
        } else {
            objective = -ps.loglik / n + penalty(&theta, &weights, lambda_d, lambda_b);
            state = m_step(&ds, &ps, &state, lambda_d, lambda_b, frozen.as_ref(), cfg.max_inner, cfg.tol)?;
        }
        let mut next = theta.clone();
        next.b.b = state.b;
        next.sigma = state.sigma;
        next.cov = Covariance::Scaled(ScaledCorrelation {
            p: pgd.p,
            d: state.d,
        });
        let changes = parameter_changes(&next, &theta);
        trace.push(IterRecord {
            iteration: it,
            loglik: ps.loglik,
            objective: Some(objective),
            changes,
            lambda_d: Some(lambda_d),
            lambda_b: Some(lambda_b),
        });
        theta = next;
        last_weights = Some(weights);
        iterations = it + 1;
        if changes.iter().all(|c| *c < cfg.tol) {
            converged = true;
            break;
        }
    }
    if let Covariance::Scaled(s) = &mut theta.cov {
        canonicalize(s);
    }
    let loglik = crate::accel::loglik(&theta, data)?;
    let s = theta.cov.as_scaled();
    let slope_mask = (0..ds.dims.r).map(|j| s.d[2 * j + 1] != 0.0).collect();
    let b2 = theta.b.b2();
    let b2_mask = b2.map(|v| v != 0.0);
    Ok(Stage2Fit {
        params: theta,
        loglik,
        trace,
        converged,
        iterations,
        weights: last_weights.expect("at least one iteration runs"),
        lambda_d,
        lambda_b,
        slope_mask,
        b2_mask,
        lambda_reports,
    })
}

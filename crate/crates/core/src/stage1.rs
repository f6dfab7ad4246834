//! Unpenalized EM under `G = Q Q^T + diag(delta)`.

use nalgebra::{DMatrix, DVector};

use crate::accel::{mean_second_moment, posteriors, residuals, FastPosterior};
use crate::em::{factor_objective, gram, parameter_changes, IterRecord};
use crate::error::{Error, Result};
use crate::model::{
    Covariance, FactorCovariance, FixedEffects, LongitudinalDataset, ModelParams, DELTA_FLOOR,
};

/// Lower bound on estimated noise variances.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Stage1Config {
    pub k: usize,
    pub tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Starting values; `None` uses [`default_init`].
    pub init: Option<ModelParams>,
}

impl Stage1Config {
    pub fn new(k: usize) -> Self {
        Stage1Config {
            k,
            tol: 1e-3,
            max_outer: 500,
            max_inner: 100,
            init: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("rank K must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::Config("iteration caps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Fit {
    pub params: ModelParams,
    pub loglik: f64,
    pub trace: Vec<IterRecord>,
    pub converged: bool,
    pub iterations: usize,
}

/// `Q = 0`, `delta = 1`, intercepts at the outcome means, noise variances at
/// the outcome sample variances, all other coefficients zero.
pub fn default_init(data: &LongitudinalDataset, k: usize) -> ModelParams {
    let dims = data.dims;
    let n_obs = data.total_visits() as f64;
    let mut mean = DVector::zeros(dims.r);
    for s in &data.subjects {
        mean += s.y.column_sum();
    }
    mean /= n_obs;
    let mut var = DVector::zeros(dims.r);
    for s in &data.subjects {
        for col in s.y.column_iter() {
            var += (col - &mean).map(|v| v * v);
        }
    }
    var /= (n_obs - 1.0).max(1.0);
    let mut b = FixedEffects::zeros(&dims);
    b.b.set_column(0, &mean);
    ModelParams {
        b,
        sigma: var.map(|v| v.max(SIGMA_FLOOR)),
        cov: Covariance::Factor(FactorCovariance::null(2 * dims.r, k)),
    }
}

/// Posteriors of `zeta_i` for every subject.
pub fn estep1(theta: &ModelParams, data: &LongitudinalDataset) -> Result<Vec<FastPosterior>> {
    if !matches!(theta.cov, Covariance::Factor(_)) {
        return Err(Error::Config("stage 1 needs the (Q, delta) parameterization".into()));
    }
    posteriors(theta, data)
}

/// Leading `k` eigenpairs of a symmetric matrix in descending order, each
/// eigenvector signed so that its first nonzero entry is positive.
pub(crate) fn leading_eigen(m: &DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    // single-threaded so results do not depend on the pool size
    faer::set_global_parallelism(faer::Parallelism::None);
    let fm = faer::Mat::<f64>::from_fn(n, n, |a, b| m[(a, b)]);
    let eig = fm.selfadjoint_eigendecomposition(faer::Side::Lower);
    let vals = eig.s().column_vector();
    let vecs = eig.u();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals.read(b).total_cmp(&vals.read(a)).then(a.cmp(&b)));
    let mut out = DMatrix::zeros(n, k);
    let mut values = Vec::with_capacity(k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        values.push(vals.read(idx));
        let mut col = DVector::from_fn(n, |a, _| vecs.read(a, idx));
        if let Some(first) = col.iter().find(|v| **v != 0.0) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        out.set_column(c, &col);
    }
    (values, out)
}

/// Result of the `(Q, delta)` alternation.
#[derive(Debug, Clone)]
pub struct QDeltaUpdate {
    pub cov: FactorCovariance,
    pub sweeps: usize,
    /// Value of `-log|G| - tr(G^-1 psi_bar)` after each accepted sweep,
    /// starting with the initial value.
    pub objective_path: Vec<f64>,
}

/// Maximize `-1/2 log|G| - 1/2 tr(G^-1 psi_bar)` over `G = Q Q^T + diag(delta)`
/// by alternating the eigenvector solution for `Q` given `delta` with the
/// diagonal solution for `delta` given `Q`.
///
/// The `Q` step is the exact maximizer for fixed `delta` (with eigenvalues
/// below one clamped so that `(Lambda - I)^{1/2}` stays real). The `delta`
/// step is only a stationarity condition, so a sweep whose `delta` step would
/// lower the objective keeps the old `delta` and ends the alternation.
pub fn update_q_delta(
    psi_bar: &DMatrix<f64>,
    k: usize,
    init: &FactorCovariance,
    max_inner: usize,
    tol: f64,
) -> Result<QDeltaUpdate> {
    let dim = psi_bar.nrows();
    if init.dim() != dim || init.rank() != k {
        return Err(Error::Dimension {
            what: "initial loadings",
            expected: dim * k,
            actual: init.dim() * init.rank(),
        });
    }
    let mut q = init.q.clone();
    let mut delta = init.delta.map(|d| d.max(DELTA_FLOOR));
    let objective = |q: &DMatrix<f64>, delta: &DVector<f64>| -> Result<f64> {
        Ok(-factor_objective(q, delta, psi_bar)?)
    };
    let mut current = objective(&q, &delta)?;
    let mut path = vec![current];
    let mut sweeps = 0;
    while sweeps < max_inner {
        sweeps += 1;
        let root = delta.map(|d| d.sqrt());
        let s = DMatrix::from_fn(dim, dim, |a, b| psi_bar[(a, b)] / (root[a] * root[b]));
        let (values, u) = leading_eigen(&s, k);
        let mut q_new = u;
        for (c, lam) in values.iter().enumerate() {
            let f = (lam - 1.0).max(0.0).sqrt();
            q_new.column_mut(c).scale_mut(f);
        }
        for (mut row, rt) in q_new.row_iter_mut().zip(root.iter()) {
            row *= *rt;
        }
        let delta_new = DVector::from_fn(dim, |a, _| {
            (psi_bar[(a, a)] - q_new.row(a).norm_squared()).max(DELTA_FLOOR)
        });

        let with_new = objective(&q_new, &delta_new)?;
        let with_old = objective(&q_new, &delta)?;
        let (q_acc, d_acc, value, stop) = if with_new >= with_old {
            (q_new, delta_new, with_new, false)
        } else {
            (q_new, delta.clone(), with_old, true)
        };
        if value < current {
            // eigen-solver noise; keep the previous pair
            break;
        }
        let change = crate::em::relative_change(q_acc.iter(), q.iter())
            .max(crate::em::relative_change(d_acc.iter(), delta.iter()));
        q = q_acc;
        delta = d_acc;
        current = value;
        path.push(current);
        if stop || change < tol {
            break;
        }
    }
    Ok(QDeltaUpdate {
        cov: FactorCovariance { q, delta },
        sweeps,
        objective_path: path,
    })
}

/// `B = (sum (y - Z m) x^T)(sum x x^T)^-1`.
pub fn update_b_dense(posts: &[FastPosterior], data: &LongitudinalDataset) -> Result<FixedEffects> {
    let dims = data.dims;
    let chol = gram(data, 0..dims.p(), "x")?;
    let mut cross = DMatrix::zeros(dims.r, dims.p());
    for (s, post) in data.subjects.iter().zip(posts) {
        let x = s.design_matrix();
        let mut target = s.y.clone();
        for (t, g) in s.times.iter().enumerate() {
            for j in 0..dims.r {
                target[(j, t)] -= post.mean[2 * j] + g * post.mean[2 * j + 1];
            }
        }
        cross += target * x.transpose();
    }
    // B G = cross  <=>  G B^T = cross^T
    let b = chol.solve(&cross.transpose()).transpose();
    Ok(FixedEffects {
        b,
        p_u: dims.p_u,
        p_w: dims.p_w,
    })
}

/// Noise variances given the posteriors and the updated fixed effects.
pub fn update_sigma_dense(
    posts: &[FastPosterior],
    b: &FixedEffects,
    data: &LongitudinalDataset,
) -> DVector<f64> {
    let ones = DVector::from_element(2 * data.dims.r, 1.0);
    sigma_update(posts, &b.b, &ones, data)
}

/// Shared noise-variance update; `scale` is `d` in stage 2 and all ones in
/// stage 1.
pub(crate) fn sigma_update(
    posts: &[FastPosterior],
    b: &DMatrix<f64>,
    scale: &DVector<f64>,
    data: &LongitudinalDataset,
) -> DVector<f64> {
    let r = data.dims.r;
    let mut acc = DVector::<f64>::zeros(r);
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
            let mut v = d0 * d0 * t * psi[(0, 0)]
                + 2.0 * d0 * d1 * g1 * psi[(0, 1)]
                + d1 * d1 * g2 * psi[(1, 1)];
            for (tt, g) in s.times.iter().enumerate() {
                let e = res[(j, tt)];
                v += e * e - 2.0 * e * (d0 * m0 + g * d1 * m1);
            }
            acc[j] += v;
        }
    }
    let n_obs = data.total_visits() as f64;
    acc.map(|v: f64| (v / n_obs).max(SIGMA_FLOOR))
}

/// Run the stage-1 EM to convergence or the iteration cap.
pub fn fit_stage1(data: &LongitudinalDataset, config: &Stage1Config) -> Result<Stage1Fit> {
    config.validate()?;
    let mut theta = match &config.init {
        Some(init) => {
            if init.rank() != config.k {
                return Err(Error::Config("initial value has the wrong rank".into()));
            }
            ModelParams {
                cov: Covariance::Factor(init.cov.as_factor()),
                ..init.clone()
            }
        }
        None => default_init(data, config.k),
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..config.max_outer {
        let posts = estep1(&theta, data)?;
        let ll: f64 = posts.iter().map(|p| p.loglik()).sum();
        let psi_bar = mean_second_moment(&posts);
        let Covariance::Factor(cov) = &theta.cov else {
            unreachable!("stage 1 keeps the factor parameterization")
        };
        let qd = update_q_delta(&psi_bar, config.k, cov, config.max_inner, config.tol)?;
        let b = update_b_dense(&posts, data)?;
        let sigma = update_sigma_dense(&posts, &b, data);
        let next = ModelParams {
            b,
            sigma,
            cov: Covariance::Factor(qd.cov),
        };
        let changes = parameter_changes(&next, &theta);
        trace.push(IterRecord {
            iteration: it,
            loglik: ll,
            objective: None,
            changes,
            lambda_d: None,
            lambda_b: None,
        });
        theta = next;
        iterations = it + 1;
        if changes.iter().all(|c| *c < config.tol) {
            converged = true;
            break;
        }
    }
    let loglik = crate::accel::loglik(&theta, data)?;
    Ok(Stage1Fit {
        params: theta,
        loglik,
        trace,
        converged,
        iterations,
    })
}

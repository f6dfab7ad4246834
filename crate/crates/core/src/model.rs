//! Data and parameter types of the multi-response growth curve model.
//!
//! Each subject `i` contributes `T_i` visits. At visit `t` we observe a time
//! value `g_it`, time-varying covariates `w_it` (length `p''`) and a response
//! vector `y_it` (length `r`); time-invariant covariates `u_i` (length `p'`)
//! are shared by all visits. The fixed-effect design of a visit is
//!
//! ```text
//! x_it = (1, u_i, w_it, g_it, u_i * g_it)        length p = 2 + 2p' + p''
//! ```
//!
//! and the random effects of a subject are stacked outcome by outcome as
//! `(intercept_1, slope_1, ..., intercept_r, slope_r)`, so coordinate `2j` is
//! the random intercept and `2j + 1` the random slope of outcome `j`
//! (zero-based).

use nalgebra::{DMatrix, DVector, Matrix2};

use crate::error::{Error, Result};

/// Floor applied to diagonal variances assembled from estimates.
pub const DELTA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    /// Visit times, one per column of `w` and `y`.
    pub times: Vec<f64>,
    /// Time-invariant covariates.
    pub u: DVector<f64>,
    /// Time-varying covariates, `p'' x T_i`.
    pub w: DMatrix<f64>,
    /// Responses, `r x T_i`.
    pub y: DMatrix<f64>,
}

impl Subject {
    pub fn n_visits(&self) -> usize {
        self.times.len()
    }

    /// Fixed-effect design of visit `t`.
    pub fn design(&self, t: usize) -> DVector<f64> {
        let w: Vec<f64> = self.w.column(t).iter().copied().collect();
        design_unchecked(self.u.as_slice(), &w, self.times[t])
    }

    /// Designs of all visits as the columns of a `p x T_i` matrix.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = (0..self.n_visits()).map(|t| self.design(t)).collect();
        DMatrix::from_columns(&cols)
    }
}

/// Problem dimensions `(n, r, p', p'')`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub r: usize,
    pub p_u: usize,
    pub p_w: usize,
}

impl Dims {
    /// Length of the fixed-effect design, `2 + 2p' + p''`.
    pub fn p(&self) -> usize {
        2 + 2 * self.p_u + self.p_w
    }

    /// Number of unpenalized leading design columns `(1, u, w)`.
    pub fn p1(&self) -> usize {
        1 + self.p_u + self.p_w
    }

    /// Number of trailing time-related design columns `(g, u * g)`.
    pub fn p2(&self) -> usize {
        1 + self.p_u
    }
}

/// Affine map `original = center + scale * standardized` of one column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnScale {
    pub center: f64,
    pub scale: f64,
}

impl ColumnScale {
    pub const IDENTITY: ColumnScale = ColumnScale {
        center: 0.0,
        scale: 1.0,
    };

    pub fn forward(&self, x: f64) -> f64 {
        (x - self.center) / self.scale
    }

    pub fn backward(&self, z: f64) -> f64 {
        self.center + self.scale * z
    }

    /// The map equivalent to applying `self` first and then `inner`.
    fn then(&self, inner: &ColumnScale) -> ColumnScale {
        ColumnScale {
            center: self.center + self.scale * inner.center,
            scale: self.scale * inner.scale,
        }
    }
}

/// Centering and scaling constants of the time variable and every covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub time: ColumnScale,
    pub u: Vec<ColumnScale>,
    pub w: Vec<ColumnScale>,
}

impl Standardization {
    pub fn identity(dims: &Dims) -> Self {
        Standardization {
            time: ColumnScale::IDENTITY,
            u: vec![ColumnScale::IDENTITY; dims.p_u],
            w: vec![ColumnScale::IDENTITY; dims.p_w],
        }
    }

    /// Linear map `M` (p x p) with `x_standardized = M * x_original`.
    ///
    /// Fixed effects estimated on the standardized scale map back through
    /// `B_original = B_standardized * M`.
    pub fn design_map(&self) -> DMatrix<f64> {
        let pu = self.u.len();
        let pw = self.w.len();
        let p = 2 + 2 * pu + pw;
        let g_col = 1 + pu + pw;
        let mut m = DMatrix::zeros(p, p);
        m[(0, 0)] = 1.0;
        for (k, s) in self.u.iter().enumerate() {
            m[(1 + k, 0)] = -s.center / s.scale;
            m[(1 + k, 1 + k)] = 1.0 / s.scale;
        }
        for (k, s) in self.w.iter().enumerate() {
            m[(1 + pu + k, 0)] = -s.center / s.scale;
            m[(1 + pu + k, 1 + pu + k)] = 1.0 / s.scale;
        }
        let (c, e) = (self.time.center, self.time.scale);
        m[(g_col, 0)] = -c / e;
        m[(g_col, g_col)] = 1.0 / e;
        for (k, s) in self.u.iter().enumerate() {
            let row = g_col + 1 + k;
            let be = s.scale * e;
            m[(row, 0)] = s.center * c / be;
            m[(row, 1 + k)] = -c / be;
            m[(row, g_col)] = -s.center / be;
            m[(row, row)] = 1.0 / be;
        }
        m
    }

    /// Re-apply stored constants to data on the original scale, e.g. new
    /// subjects scored against an existing fit.
    pub fn apply(&self, data: &LongitudinalDataset) -> Result<LongitudinalDataset> {
        check_dim("time-invariant covariate scales", data.dims.p_u, self.u.len())?;
        check_dim("time-varying covariate scales", data.dims.p_w, self.w.len())?;
        let subjects = data
            .subjects
            .iter()
            .map(|s| Subject {
                id: s.id.clone(),
                times: s.times.iter().map(|g| self.time.forward(*g)).collect(),
                u: DVector::from_fn(s.u.len(), |k, _| self.u[k].forward(s.u[k])),
                w: DMatrix::from_fn(s.w.nrows(), s.n_visits(), |k, t| self.w[k].forward(s.w[(k, t)])),
                y: s.y.clone(),
            })
            .collect();
        Ok(LongitudinalDataset {
            subjects,
            dims: data.dims,
            standardization: Some(self.clone()),
        })
    }

    /// 2 x 2 map taking a (intercept, slope) random-effect pair on the
    /// standardized time scale to the original time scale.
    pub fn random_effect_map(&self) -> Matrix2<f64> {
        let (c, e) = (self.time.center, self.time.scale);
        Matrix2::new(1.0, -c / e, 0.0, 1.0 / e)
    }

    /// Map a `2r x 2r` random-effect covariance to the original time scale.
    pub fn covariance_to_original(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.random_effect_map();
        let dim = g.nrows();
        let mut big = DMatrix::zeros(dim, dim);
        for j in 0..dim / 2 {
            big.fixed_view_mut::<2, 2>(2 * j, 2 * j).copy_from(&n);
        }
        &big * g * big.transpose()
    }
}

/// Multi-response longitudinal data in subject-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    pub subjects: Vec<Subject>,
    pub dims: Dims,
    pub standardization: Option<Standardization>,
}

impl LongitudinalDataset {
    /// Validate the subjects and infer `(n, r, p', p'')` from the first one.
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        let first = subjects
            .first()
            .ok_or_else(|| Error::Config("dataset has no subjects".into()))?;
        let dims = Dims {
            n: subjects.len(),
            r: first.y.nrows(),
            p_u: first.u.len(),
            p_w: first.w.nrows(),
        };
        for s in &subjects {
            let t = s.times.len();
            if t == 0 {
                return Err(Error::Config(format!("subject `{}` has no visits", s.id)));
            }
            check_dim("response outcomes", dims.r, s.y.nrows())?;
            check_dim("response visits", t, s.y.ncols())?;
            check_dim("time-invariant covariates", dims.p_u, s.u.len())?;
            check_dim("time-varying covariates", dims.p_w, s.w.nrows())?;
            check_dim("time-varying covariate visits", t, s.w.ncols())?;
            let finite = s.times.iter().all(|v| v.is_finite())
                && s.u.iter().all(|v| v.is_finite())
                && s.w.iter().all(|v| v.is_finite())
                && s.y.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Config(format!(
                    "subject `{}` has non-finite values",
                    s.id
                )));
            }
        }
        Ok(LongitudinalDataset {
            subjects,
            dims,
            standardization: None,
        })
    }

    pub fn total_visits(&self) -> usize {
        self.subjects.iter().map(|s| s.n_visits()).sum()
    }

    /// The standardization in effect, identity when none was applied.
    pub fn scales(&self) -> Standardization {
        self.standardization
            .clone()
            .unwrap_or_else(|| Standardization::identity(&self.dims))
    }
}

fn check_dim(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Fixed-effect coefficients, one row per outcome, columns ordered as the
/// design `(1 | u | w | g | u * g)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedEffects {
    pub b: DMatrix<f64>,
    pub p_u: usize,
    pub p_w: usize,
}

impl FixedEffects {
    pub fn zeros(dims: &Dims) -> Self {
        FixedEffects {
            b: DMatrix::zeros(dims.r, dims.p()),
            p_u: dims.p_u,
            p_w: dims.p_w,
        }
    }

    pub fn p1(&self) -> usize {
        1 + self.p_u + self.p_w
    }

    /// Unpenalized leading block `(mu_0 | alpha_0 | gamma)`.
    pub fn b1(&self) -> DMatrix<f64> {
        self.b.columns(0, self.p1()).into_owned()
    }

    /// Time-related trailing block `(mu_1 | alpha_1)`, the penalized one.
    pub fn b2(&self) -> DMatrix<f64> {
        self.b.columns(self.p1(), 1 + self.p_u).into_owned()
    }

    pub fn set_b1(&mut self, b1: &DMatrix<f64>) {
        let p1 = self.p1();
        self.b.columns_mut(0, p1).copy_from(b1);
    }

    pub fn set_b2(&mut self, b2: &DMatrix<f64>) {
        let p1 = self.p1();
        self.b.columns_mut(p1, 1 + self.p_u).copy_from(b2);
    }
}

/// `G = Q Q^T + diag(delta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorCovariance {
    pub q: DMatrix<f64>,
    pub delta: DVector<f64>,
}

impl FactorCovariance {
    /// Zero loadings with unit uniquenesses, the customary EM start.
    pub fn null(dim: usize, k: usize) -> Self {
        FactorCovariance {
            q: DMatrix::zeros(dim, k),
            delta: DVector::from_element(dim, 1.0),
        }
    }

    pub fn new(q: DMatrix<f64>, delta: DVector<f64>) -> Result<Self> {
        check_dim("factor uniquenesses", q.nrows(), delta.len())?;
        if q.ncols() == 0 {
            return Err(Error::Constraint("rank K must be at least 1".into()));
        }
        if delta.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::Constraint("uniquenesses must be nonnegative".into()));
        }
        Ok(FactorCovariance { q, delta })
    }

    pub fn rank(&self) -> usize {
        self.q.ncols()
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }
}

/// `G = diag(d) R(P) diag(d)` with `R(P) = P P^T + I - diag(P P^T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledCorrelation {
    pub p: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl ScaledCorrelation {
    pub fn new(p: DMatrix<f64>, d: DVector<f64>) -> Result<Self> {
        check_dim("scale vector", p.nrows(), d.len())?;
        if p.ncols() == 0 {
            return Err(Error::Constraint("rank K must be at least 1".into()));
        }
        check_row_norms(&p)?;
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::Constraint("scales must be finite".into()));
        }
        Ok(ScaledCorrelation { p, d })
    }

    pub fn rank(&self) -> usize {
        self.p.ncols()
    }

    /// Diagonal `1 - ||P_k||^2` of the correlation's uniqueness part.
    pub fn uniqueness(&self) -> DVector<f64> {
        uniqueness(&self.p)
    }
}

pub(crate) fn uniqueness(p: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        p.nrows(),
        p.row_iter().map(|row| 1.0 - row.norm_squared()),
    )
}

fn check_row_norms(p: &DMatrix<f64>) -> Result<()> {
    for (k, row) in p.row_iter().enumerate() {
        let norm = row.norm();
        if !(norm < 1.0) {
            return Err(Error::Constraint(format!(
                "row {k} of P has norm {norm} (must be < 1)"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Factor(FactorCovariance),
    Scaled(ScaledCorrelation),
}

impl Covariance {
    pub fn rank(&self) -> usize {
        match self {
            Covariance::Factor(f) => f.rank(),
            Covariance::Scaled(s) => s.rank(),
        }
    }

    /// Dense `2r x 2r` random-effect covariance.
    pub fn dense(&self) -> DMatrix<f64> {
        match self {
            Covariance::Factor(f) => assemble_g(f),
            Covariance::Scaled(s) => {
                let r = assemble_r_unchecked(&s.p);
                scale_both_sides(&r, &s.d)
            }
        }
    }

    pub fn as_factor(&self) -> FactorCovariance {
        match self {
            Covariance::Factor(f) => f.clone(),
            Covariance::Scaled(s) => to_factor(s),
        }
    }

    pub fn as_scaled(&self) -> ScaledCorrelation {
        match self {
            Covariance::Factor(f) => to_scaled(f),
            Covariance::Scaled(s) => s.clone(),
        }
    }
}

/// Full parameter state iterated by EM.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub b: FixedEffects,
    /// Noise variances, one per outcome.
    pub sigma: DVector<f64>,
    pub cov: Covariance,
}

impl ModelParams {
    pub fn new(b: FixedEffects, sigma: DVector<f64>, cov: Covariance) -> Result<Self> {
        check_dim("noise variances", b.b.nrows(), sigma.len())?;
        let dim = match &cov {
            Covariance::Factor(f) => f.dim(),
            Covariance::Scaled(s) => s.p.nrows(),
        };
        check_dim("random-effect dimension", 2 * sigma.len(), dim)?;
        if sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Constraint("noise variances must be positive".into()));
        }
        Ok(ModelParams { b, sigma, cov })
    }

    pub fn rank(&self) -> usize {
        self.cov.rank()
    }

    pub fn r(&self) -> usize {
        self.sigma.len()
    }
}

/// Conditional moments of a subject's random effects given its data.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMoments {
    pub m: DVector<f64>,
    pub omega: DMatrix<f64>,
    /// Second moment `omega + m m^T`.
    pub psi: DMatrix<f64>,
}

impl PosteriorMoments {
    pub fn from_mean_cov(m: DVector<f64>, omega: DMatrix<f64>) -> Self {
        let psi = &omega + &m * m.transpose();
        PosteriorMoments { m, omega, psi }
    }
}

pub(crate) fn design_unchecked(u: &[f64], w: &[f64], g: f64) -> DVector<f64> {
    let p = 2 + 2 * u.len() + w.len();
    let mut x = Vec::with_capacity(p);
    x.push(1.0);
    x.extend_from_slice(u);
    x.extend_from_slice(w);
    x.push(g);
    x.extend(u.iter().map(|v| v * g));
    DVector::from_vec(x)
}

/// Fixed-effect design `(1, u, w, g, u * g)` of one visit.
pub fn expand_design(dims: &Dims, u: &[f64], w: &[f64], g: f64) -> Result<DVector<f64>> {
    check_dim("time-invariant covariates", dims.p_u, u.len())?;
    check_dim("time-varying covariates", dims.p_w, w.len())?;
    Ok(design_unchecked(u, w, g))
}

/// `Q Q^T + diag(delta)`.
pub fn assemble_g(cov: &FactorCovariance) -> DMatrix<f64> {
    let mut g = &cov.q * cov.q.transpose();
    for (k, d) in cov.delta.iter().enumerate() {
        g[(k, k)] += d;
    }
    g
}

/// Correlation matrix `P P^T + I - diag(P P^T)`; fails unless every row of
/// `P` has norm below one.
pub fn assemble_r(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_row_norms(p)?;
    Ok(assemble_r_unchecked(p))
}

pub(crate) fn assemble_r_unchecked(p: &DMatrix<f64>) -> DMatrix<f64> {
    let mut r = p * p.transpose();
    r.fill_diagonal(1.0);
    r
}

pub(crate) fn scale_both_sides(m: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |a, b| d[a] * m[(a, b)] * d[b])
}

/// `(Q, delta) -> (P, d)` with `d_k = sqrt((QQ^T)_kk + delta_k)` and
/// `P = diag(d)^-1 Q`. Rows with `d_k = 0` keep a zero row of `P`.
pub fn to_scaled(cov: &FactorCovariance) -> ScaledCorrelation {
    let dim = cov.dim();
    let mut p = cov.q.clone();
    let mut d = DVector::zeros(dim);
    for k in 0..dim {
        let qq = cov.q.row(k).norm_squared();
        let dk = (qq + cov.delta[k]).sqrt();
        d[k] = dk;
        if dk > 0.0 {
            p.row_mut(k).scale_mut(1.0 / dk);
        } else {
            p.row_mut(k).fill(0.0);
        }
    }
    ScaledCorrelation { p, d }
}

/// `(P, d) -> (Q, delta)` with `Q = diag(d) P` and
/// `delta_k = d_k^2 - (QQ^T)_kk`.
pub fn to_factor(cov: &ScaledCorrelation) -> FactorCovariance {
    let dim = cov.p.nrows();
    let mut q = cov.p.clone();
    let mut delta = DVector::zeros(dim);
    for k in 0..dim {
        let dk = cov.d[k];
        q.row_mut(k).scale_mut(dk);
        // d_k^2 - ||d_k P_k||^2, written to keep zero scales exactly zero
        delta[k] = dk * dk * (1.0 - cov.p.row(k).norm_squared());
    }
    FactorCovariance { q, delta }
}

/// Pooled standardization of the time variable and every covariate column
/// over all subject-visit observations.
pub fn standardize(data: &LongitudinalDataset) -> Result<LongitudinalDataset> {
    let dims = data.dims;
    let n_obs = data.total_visits() as f64;

    let pooled = |values: &mut dyn Iterator<Item = f64>, name: String| -> Result<ColumnScale> {
        let vals: Vec<f64> = values.collect();
        let mean = vals.iter().sum::<f64>() / n_obs;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_obs;
        let sd = var.sqrt();
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::DegenerateColumn(name));
        }
        Ok(ColumnScale {
            center: mean,
            scale: sd,
        })
    };

    let time = pooled(
        &mut data.subjects.iter().flat_map(|s| s.times.iter().copied()),
        "time".into(),
    )?;
    let mut u = Vec::with_capacity(dims.p_u);
    for k in 0..dims.p_u {
        u.push(pooled(
            &mut data
                .subjects
                .iter()
                .flat_map(|s| std::iter::repeat(s.u[k]).take(s.n_visits())),
            format!("u_{}", k + 1),
        )?);
    }
    let mut w = Vec::with_capacity(dims.p_w);
    for k in 0..dims.p_w {
        w.push(pooled(
            &mut data
                .subjects
                .iter()
                .flat_map(|s| s.w.row(k).iter().copied().collect::<Vec<_>>()),
            format!("w_{}", k + 1),
        )?);
    }

    let subjects = data
        .subjects
        .iter()
        .map(|s| Subject {
            id: s.id.clone(),
            times: s.times.iter().map(|g| time.forward(*g)).collect(),
            u: DVector::from_fn(dims.p_u, |k, _| u[k].forward(s.u[k])),
            w: DMatrix::from_fn(dims.p_w, s.n_visits(), |k, t| w[k].forward(s.w[(k, t)])),
            y: s.y.clone(),
        })
        .collect();

    let step = Standardization { time, u, w };
    let standardization = match &data.standardization {
        None => step,
        Some(prev) => Standardization {
            time: prev.time.then(&step.time),
            u: prev.u.iter().zip(&step.u).map(|(a, b)| a.then(b)).collect(),
            w: prev.w.iter().zip(&step.w).map(|(a, b)| a.then(b)).collect(),
        },
    };
    Ok(LongitudinalDataset {
        subjects,
        dims,
        standardization: Some(standardization),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims(p_u: usize, p_w: usize) -> Dims {
        Dims {
            n: 1,
            r: 1,
            p_u,
            p_w,
        }
    }

    #[test]
    fn design_examples() {
        let x = expand_design(&dims(1, 1), &[1.0], &[0.5], 2.0).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 1.0, 0.5, 2.0, 2.0]);
        let x = expand_design(&dims(0, 0), &[], &[], 3.0).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 3.0]);
        let x = expand_design(&dims(1, 1), &[0.0], &[0.7], 5.0).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 0.0, 0.7, 5.0, 0.0]);
    }

    #[test]
    fn design_rejects_wrong_lengths() {
        assert!(matches!(
            expand_design(&dims(2, 0), &[1.0], &[], 0.0),
            Err(Error::Dimension { .. })
        ));
        assert!(expand_design(&dims(0, 1), &[], &[], 0.0).is_err());
    }

    #[test]
    fn g_examples() {
        let g = assemble_g(&FactorCovariance {
            q: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            delta: DVector::from_vec(vec![1.0, 1.0]),
        });
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]));
        let g = assemble_g(&FactorCovariance::null(4, 2));
        assert_eq!(g, DMatrix::identity(4, 4));
    }

    #[test]
    fn g_eigenvalues_bounded_by_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = DMatrix::from_fn(6, 2, |_, _| rng.gen_range(-1.0..1.0));
        let delta = DVector::from_fn(6, |_, _| rng.gen_range(0.2..2.0));
        let g = assemble_g(&FactorCovariance::new(q, delta.clone()).unwrap());
        let eig = nalgebra::SymmetricEigen::new(g);
        assert!(eig.eigenvalues.min() >= delta.min() - 1e-12);
    }

    #[test]
    fn r_examples() {
        assert_eq!(
            assemble_r(&DMatrix::zeros(3, 2)).unwrap(),
            DMatrix::identity(3, 3)
        );
        let r = assemble_r(&DMatrix::from_column_slice(2, 1, &[0.5, 0.5])).unwrap();
        assert_eq!(r, DMatrix::from_row_slice(2, 2, &[1.0, 0.25, 0.25, 1.0]));
        let bad = DMatrix::from_row_slice(2, 2, &[0.8, 0.6, 0.1, 0.1]);
        assert!(matches!(assemble_r(&bad), Err(Error::Constraint(_))));
    }

    #[test]
    fn r_random_is_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_feasible_p(&mut rng, 8, 3);
        let r = assemble_r(&p).unwrap();
        for k in 0..8 {
            assert_eq!(r[(k, k)], 1.0);
        }
        let eig = nalgebra::SymmetricEigen::new(r);
        assert!(eig.eigenvalues.min() > 0.0);
    }

    fn random_feasible_p(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> DMatrix<f64> {
        let mut p = DMatrix::from_fn(rows, k, |_, _| rng.gen_range(-1.0..1.0));
        for mut row in p.row_iter_mut() {
            let target = rng.gen_range(0.0..0.95);
            let n = row.norm();
            row.scale_mut(target / n);
        }
        p
    }

    #[test]
    fn to_scaled_examples() {
        let s = to_scaled(&FactorCovariance {
            q: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            delta: DVector::from_vec(vec![1.0, 1.0]),
        });
        assert_relative_eq!(s.d[0], 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(s.d[1], 1.0);
        assert_relative_eq!(s.p[(0, 0)], 1.0 / 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(s.p[(1, 0)], 0.0);

        let s = to_scaled(&FactorCovariance::null(4, 2));
        assert_eq!(s.d, DVector::from_element(4, 1.0));
        assert_eq!(s.p, DMatrix::zeros(4, 2));
    }

    #[test]
    fn to_factor_examples() {
        let f = to_factor(&ScaledCorrelation {
            p: DMatrix::from_column_slice(2, 1, &[1.0 / 2f64.sqrt(), 0.0]),
            d: DVector::from_vec(vec![2f64.sqrt(), 1.0]),
        });
        assert_relative_eq!(f.q[(0, 0)], 1.0, epsilon = 1e-15);
        assert_eq!(f.q[(1, 0)], 0.0);
        assert_relative_eq!(f.delta[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(f.delta[1], 1.0, epsilon = 1e-15);

        let f = to_factor(&ScaledCorrelation {
            p: DMatrix::from_row_slice(2, 1, &[0.3, 0.4]),
            d: DVector::from_vec(vec![1.5, 0.0]),
        });
        assert_eq!(f.q[(1, 0)], 0.0);
        assert_eq!(f.delta[1], 0.0);
    }

    #[test]
    fn scaled_reassembles_g() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = DMatrix::from_fn(10, 3, |_, _| rng.gen_range(-1.0..1.0));
        let delta = DVector::from_fn(10, |_, _| rng.gen_range(0.1..2.0));
        let f = FactorCovariance::new(q, delta).unwrap();
        let g = assemble_g(&f);
        let s = to_scaled(&f);
        let g2 = Covariance::Scaled(s.clone()).dense();
        assert!((&g - &g2).norm() <= 1e-12 * g.norm());
        assert!(s.p.row_iter().all(|row| row.norm() < 1.0));
    }

    #[test]
    fn standardize_two_points() {
        let s = |id: &str, g: f64| Subject {
            id: id.into(),
            times: vec![g],
            u: DVector::zeros(0),
            w: DMatrix::zeros(0, 1),
            y: DMatrix::from_element(1, 1, 1.0),
        };
        let data = LongitudinalDataset::new(vec![s("a", 0.0), s("b", 2.0)]).unwrap();
        let out = standardize(&data).unwrap();
        assert_eq!(out.subjects[0].times, vec![-1.0]);
        assert_eq!(out.subjects[1].times, vec![1.0]);
        let st = out.standardization.unwrap();
        assert_eq!(st.time.center, 1.0);
        assert_eq!(st.time.scale, 1.0);
    }

    #[test]
    fn standardize_rejects_constant_column() {
        let s = |id: &str| Subject {
            id: id.into(),
            times: vec![0.0, 1.0],
            u: DVector::from_element(1, 1.0),
            w: DMatrix::zeros(0, 2),
            y: DMatrix::from_element(1, 2, 1.0),
        };
        let data = LongitudinalDataset::new(vec![s("a"), s("b")]).unwrap();
        assert!(matches!(standardize(&data), Err(Error::DegenerateColumn(c)) if c == "u_1"));
    }

    #[test]
    fn dataset_rejects_ragged_subjects() {
        let a = Subject {
            id: "a".into(),
            times: vec![0.0, 1.0],
            u: DVector::zeros(0),
            w: DMatrix::zeros(0, 2),
            y: DMatrix::zeros(2, 2),
        };
        let mut b = a.clone();
        b.y = DMatrix::zeros(3, 2);
        assert!(LongitudinalDataset::new(vec![a, b]).is_err());
    }

    #[test]
    fn design_map_matches_standardized_design() {
        let st = Standardization {
            time: ColumnScale {
                center: 40.0,
                scale: 11.0,
            },
            u: vec![ColumnScale {
                center: 0.4,
                scale: 0.49,
            }],
            w: vec![ColumnScale {
                center: -0.2,
                scale: 1.3,
            }],
        };
        let m = st.design_map();
        let (u, w, g) = (1.0, 0.7, 33.0);
        let x = design_unchecked(&[u], &[w], g);
        let xs = design_unchecked(
            &[st.u[0].forward(u)],
            &[st.w[0].forward(w)],
            st.time.forward(g),
        );
        assert!((&m * x - xs).amax() < 1e-12);
    }
}

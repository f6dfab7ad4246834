//! BIC selection of the rank `K` and of the two sparsity penalties.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::accel::loglik;
use crate::error::{Error, Result};
use crate::model::{Covariance, LongitudinalDataset, ModelParams, ScaledCorrelation};
use crate::stage1::{fit_stage1, Stage1Config, Stage1Fit};
use crate::stage2::{
    b2_score, even_coefficients, ols_b2, update_d_odd,
    m_step, AdaptiveWeights, DataStats, InnerState, LambdaGrid, PostStats,
};

/// What a BIC report scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Candidate {
    Rank(usize),
    LambdaD(f64),
    LambdaB(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BicReport {
    pub candidate: Candidate,
    pub loglik: f64,
    pub df: usize,
    pub bic: f64,
    pub selected: bool,
}

impl BicReport {
    fn new(candidate: Candidate, ll: f64, df: usize, n: usize) -> Self {
        BicReport {
            candidate,
            loglik: ll,
            df,
            bic: bic(ll, df, n),
            selected: false,
        }
    }
}

/// `-2 loglik + ln(n) df`.
pub fn bic(loglik: f64, df: usize, n: usize) -> f64 {
    -2.0 * loglik + (n as f64).ln() * df as f64
}

/// `2r(K+1) - K(K-1)/2`.
pub fn df_unpenalized(r: usize, k: usize) -> usize {
    2 * r * (k + 1) - k * (k - 1) / 2
}

/// Nonzero random-slope scales times `K + 1`; `d` is interleaved
/// (intercept, slope) per outcome.
pub fn df_lambda_d(d: &[f64], k: usize) -> usize {
    d.iter().skip(1).step_by(2).filter(|v| **v != 0.0).count() * (k + 1)
}

/// Nonzero entries of `B2`.
pub fn df_lambda_b(b2: &DMatrix<f64>) -> usize {
    b2.iter().filter(|v| **v != 0.0).count()
}

/// Index of the smallest BIC; ties go to the earliest entry.
fn argmin(reports: &[BicReport]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in reports.iter().enumerate() {
        if !r.bic.is_finite() {
            continue;
        }
        match best {
            Some(b) if reports[b].bic <= r.bic => {}
            _ => best = Some(i),
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct RankSelection {
    pub k: usize,
    pub reports: Vec<BicReport>,
    /// Stage-1 fits in grid order; `None` where the fit failed.
    pub fits: Vec<Option<Stage1Fit>>,
}

impl RankSelection {
    pub fn selected_fit(&self) -> &Stage1Fit {
        self.fits
            .iter()
            .flatten()
            .find(|f| f.params.rank() == self.k)
            .expect("selected rank has a fit")
    }
}

/// Fit stage 1 for every rank in `grid` and keep the BIC minimizer, the
/// smaller rank on ties.
pub fn select_k(data: &LongitudinalDataset, grid: &[usize], base: &Stage1Config) -> Result<RankSelection> {
    if grid.is_empty() {
        return Err(Error::Selection("empty rank grid".into()));
    }
    let mut ks = grid.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let fits: Vec<Option<Stage1Fit>> = ks
        .par_iter()
        .map(|&k| {
            let cfg = Stage1Config {
                k,
                init: None,
                ..base.clone()
            };
            fit_stage1(data, &cfg).ok()
        })
        .collect();
    let (n, r) = (data.dims.n, data.dims.r);
    let mut reports: Vec<BicReport> = ks
        .iter()
        .zip(&fits)
        .filter_map(|(k, f)| {
            f.as_ref()
                .map(|f| BicReport::new(Candidate::Rank(*k), f.loglik, df_unpenalized(r, *k), n))
        })
        .collect();
    let best = argmin(&reports).ok_or_else(|| Error::Selection("every rank failed to fit".into()))?;
    reports[best].selected = true;
    let Candidate::Rank(k) = reports[best].candidate else {
        unreachable!()
    };
    Ok(RankSelection { k, reports, fits })
}

#[derive(Debug, Clone)]
pub struct LambdaChoice {
    pub lambda_d: f64,
    pub lambda_b: f64,
    pub reports_d: Vec<BicReport>,
    pub reports_b: Vec<BicReport>,
    pub(crate) state: InnerState,
}

/// Smallest `lambda_d` that zeroes every slope scale at the current state:
/// `max_j |c_j| |d_bar_j|`.
pub(crate) fn lambda_d_scale(ds: &DataStats, ps: &PostStats, state: &InnerState, frozen: Option<&AdaptiveWeights>) -> Result<f64> {
    let mut scale: f64 = 0.0;
    for j in 0..ds.dims.r {
        let d0 = update_d_odd(j, ps, &state.b, state.d[2 * j + 1])?;
        let (a, c) = even_coefficients(j, ds, ps, &state.b, d0, state.sigma[j]);
        let w = match frozen {
            Some(w) => w.d_bar[j],
            None if a != 0.0 => c / a,
            None => 0.0,
        };
        scale = scale.max((c * w).abs());
    }
    Ok(scale)
}

/// Largest `|score| |B2_bar|` over entries, the analogous scale for `lambda_B`.
pub fn lambda_b_scale(ds: &DataStats, ps: &PostStats, b1: &DMatrix<f64>, d: &nalgebra::DVector<f64>, sigma: &nalgebra::DVector<f64>, b2_bar: &DMatrix<f64>) -> f64 {
    let score = b2_score(ds, ps, b1, d);
    let n = ds.dims.n as f64;
    let mut scale: f64 = 0.0;
    for j in 0..ds.dims.r {
        for k in 0..score.ncols() {
            scale = scale.max((score[(j, k)] / (n * sigma[j]) * b2_bar[(j, k)]).abs());
        }
    }
    scale
}

/// Choose `lambda_d` and then `lambda_B` by BIC on one-dimensional grids.
/// Each candidate is applied as one update from the current state and
/// scored with the observed-data log-likelihood at the resulting iterate.
#[allow(clippy::too_many_arguments)]
#[allow(clippy::too_many_arguments)]
pub(crate) fn tune_lambdas(
    data: &LongitudinalDataset,
    ds: &DataStats,
    ps: &PostStats,
    p: &DMatrix<f64>,
    state: &InnerState,
    frozen: Option<&AdaptiveWeights>,
    grid_d: &LambdaGrid,
    grid_b: &LambdaGrid,
    lambda_b_now: f64,
    max_sweeps: usize,
    tol: f64,
) -> Result<LambdaChoice> {
    let n = ds.dims.n;
    let k = p.ncols();
    let p1 = ds.dims.p1();
    let q = ds.dims.p2();
    let params = |st: &InnerState| ModelParams {
        b: crate::model::FixedEffects {
            b: st.b.clone(),
            p_u: ds.dims.p_u,
            p_w: ds.dims.p_w,
        },
        sigma: st.sigma.clone(),
        cov: Covariance::Scaled(ScaledCorrelation {
            p: p.clone(),
            d: st.d.clone(),
        }),
    };
    // Each candidate is scored at the M-step it would actually produce.
    // A single thresholding step understates how far a large penalty
    // shrinks once the sweeps settle.
    let score = |ld: f64, lb: f64| -> Result<(InnerState, f64)> {
        let st = m_step(ds, ps, state, ld, lb, frozen, max_sweeps, tol)?;
        let ll = loglik(&params(&st), data)?;
        Ok((st, ll))
    };

    let lambdas_d = grid_d.values(lambda_d_scale(ds, ps, state, frozen)?);
    let cands_d: Vec<(InnerState, BicReport)> = lambdas_d
        .par_iter()
        .map(|&lam| -> Result<_> {
            let (st, ll) = score(lam, lambda_b_now)?;
            let df = df_lambda_d(st.d.as_slice(), k);
            Ok((st, BicReport::new(Candidate::LambdaD(lam), ll, df, n)))
        })
        .collect::<Result<_>>()?;
    let (states_d, mut reports_d): (Vec<_>, Vec<_>) = cands_d.into_iter().unzip();
    let bd = argmin(&reports_d).ok_or_else(|| Error::Selection("no finite BIC on the lambda_d grid".into()))?;
    reports_d[bd].selected = true;
    let lambda_d = lambdas_d[bd];
    let mid = &states_d[bd];

    let b1 = mid.b.columns(0, p1).into_owned();
    let b2_bar = match frozen {
        Some(w) => w.b2_bar.clone(),
        None => ols_b2(ds, ps, &b1, &mid.d),
    };
    let lambdas_b = grid_b.values(lambda_b_scale(ds, ps, &b1, &mid.d, &mid.sigma, &b2_bar));
    let cands_b: Vec<(InnerState, BicReport)> = lambdas_b
        .par_iter()
        .map(|&lam| -> Result<_> {
            let (st, ll) = score(lambda_d, lam)?;
            let df = df_lambda_b(&st.b.columns(p1, q).into_owned());
            Ok((st, BicReport::new(Candidate::LambdaB(lam), ll, df, n)))
        })
        .collect::<Result<_>>()?;
    let (mut states_b, mut reports_b): (Vec<_>, Vec<_>) = cands_b.into_iter().unzip();
    let bb = argmin(&reports_b).ok_or_else(|| Error::Selection("no finite BIC on the lambda_B grid".into()))?;
    reports_b[bb].selected = true;
    let chosen = states_b.swap_remove(bb);
    Ok(LambdaChoice {
        lambda_d,
        lambda_b: lambdas_b[bb],
        reports_d,
        reports_b,
        state: chosen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bic_arithmetic() {
        assert!((bic(-100.0, 10, 100) - 246.051_701_859_880_9).abs() < 1e-9);
        assert_eq!(bic(-100.0, 0, 100), 200.0);
        assert!((bic(-100.0, 3, 2) - (200.0 + 3.0 * 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn df_formulas() {
        assert_eq!(df_unpenalized(100, 3), 797);
        assert_eq!(df_unpenalized(1, 1), 4);
        assert_eq!(df_unpenalized(2006, 2), 12035);

        assert_eq!(df_lambda_d(&[1.0, 0.0, 2.0, 0.0], 3), 0);
        let mut d = vec![1.0; 20];
        for j in [1, 4, 6, 9] {
            d[2 * j + 1] = 0.0;
        }
        for j in [0, 2, 3, 5, 7, 8] {
            d[2 * j + 1] = 0.0;
        }
        d[3] = 0.5;
        d[9] = -0.2;
        d[15] = 1.0;
        d[19] = 3.0;
        assert_eq!(df_lambda_d(&d, 3), 16);
        let mut one_less = d.clone();
        one_less[15] = 0.0;
        assert_eq!(df_lambda_d(&d, 3) - df_lambda_d(&one_less, 3), 4);
        // full density matches the even-entry share of the unpenalized count
        assert_eq!(df_lambda_d(&vec![1.0; 2 * 7], 2), 7 * 3);

        assert_eq!(df_lambda_b(&DMatrix::zeros(3, 2)), 0);
        assert_eq!(df_lambda_b(&DMatrix::from_element(3, 2, 0.1)), 6);
        let m = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, -2.0, 0.0, 3.0]);
        assert_eq!(df_lambda_b(&m), 3);
    }

    #[test]
    fn argmin_prefers_first_on_ties() {
        let mk = |k, b| BicReport {
            candidate: Candidate::Rank(k),
            loglik: 0.0,
            df: 0,
            bic: b,
            selected: false,
        };
        let reports = vec![mk(1, 5.0), mk(2, 3.0), mk(3, 3.0), mk(4, f64::NAN)];
        assert_eq!(argmin(&reports), Some(1));
    }

    #[test]
    fn grid_values() {
        let g = LambdaGrid::default();
        let v = g.values(2.0);
        assert_eq!(v.len(), 20);
        assert!((v[0] - 2e-4).abs() < 1e-15);
        assert!((v[19] - 20.0).abs() < 1e-12);
        assert!(v.windows(2).all(|w| w[1] > w[0]));
        let single = LambdaGrid::LogSpaced { size: 1, lo: 0.3, hi: 0.3 };
        assert_eq!(single.values(1.0), vec![0.3]);
        assert_eq!(LambdaGrid::Fixed(vec![0.0]).values(5.0), vec![0.0]);
    }
}

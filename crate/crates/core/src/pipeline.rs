//! End-to-end fit: standardize, choose the rank with stage 1, run stage 2
//! and map the estimates back to the original scale.

use std::time::Instant;

use nalgebra::DMatrix;

use crate::error::Result;
use crate::model::{standardize, LongitudinalDataset, Standardization};
use crate::sim::Estimate;
use crate::stage1::{fit_stage1, Stage1Config, Stage1Fit};
use crate::stage2::{fit_stage2, LambdaGrid, Stage2Config, Stage2Fit, WeightSchedule};
use crate::tuning::{select_k, BicReport};

#[derive(Debug, Clone, PartialEq)]
pub enum RankSpec {
    Fixed(usize),
    Grid(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PenaltySpec {
    Fixed { lambda_d: f64, lambda_b: f64 },
    /// Re-tuned by BIC at every stage-2 iteration.
    Tune { grid_d: LambdaGrid, grid_b: LambdaGrid },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub rank: RankSpec,
    pub penalty: PenaltySpec,
    pub tol: f64,
    pub max_iter: usize,
    pub standardize: bool,
    pub weights: WeightSchedule,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            rank: RankSpec::Grid((1..=5).collect()),
            penalty: PenaltySpec::Tune {
                grid_d: LambdaGrid::default(),
                grid_b: LambdaGrid::default(),
            },
            tol: 1e-3,
            max_iter: 500,
            standardize: true,
            weights: WeightSchedule::Frozen,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub scales: Standardization,
    pub k: usize,
    pub rank_reports: Vec<BicReport>,
    pub stage1: Stage1Fit,
    pub stage2: Stage2Fit,
    /// Fixed effects and random-effect covariance on the data's own scale.
    pub b_original: DMatrix<f64>,
    pub g_original: DMatrix<f64>,
    pub seconds: f64,
}

impl FitOutput {
    pub fn estimate(&self) -> Estimate {
        Estimate {
            b: self.b_original.clone(),
            g: self.g_original.clone(),
            k: self.k,
        }
    }
}

pub fn fit_model(data: &LongitudinalDataset, opts: &FitOptions) -> Result<FitOutput> {
    let start = Instant::now();
    let work = if opts.standardize {
        standardize(data)?
    } else {
        data.clone()
    };
    let mut s1 = Stage1Config::new(1);
    s1.tol = opts.tol;
    s1.max_outer = opts.max_iter;
    let (k, rank_reports, stage1) = match &opts.rank {
        RankSpec::Fixed(k) => {
            s1.k = *k;
            (*k, Vec::new(), fit_stage1(&work, &s1)?)
        }
        RankSpec::Grid(grid) => {
            let sel = select_k(&work, grid, &s1)?;
            let fit = sel.selected_fit().clone();
            (sel.k, sel.reports, fit)
        }
    };
    let mut s2 = Stage2Config {
        tol: opts.tol,
        max_outer: opts.max_iter,
        weights: opts.weights,
        ..Stage2Config::default()
    };
    match &opts.penalty {
        PenaltySpec::Fixed { lambda_d, lambda_b } => {
            s2.tune_per_iteration = false;
            s2.lambda_d = *lambda_d;
            s2.lambda_b = *lambda_b;
        }
        PenaltySpec::Tune { grid_d, grid_b } => {
            s2.tune_per_iteration = true;
            s2.grid_d = grid_d.clone();
            s2.grid_b = grid_b.clone();
        }
    }
    let stage2 = fit_stage2(&work, &stage1.params, &s2)?;
    let scales = work.scales();
    let b_original = &stage2.params.b.b * scales.design_map();
    let g_original = scales.covariance_to_original(&stage2.params.cov.dense());
    Ok(FitOutput {
        scales,
        k,
        rank_reports,
        stage1,
        stage2,
        b_original,
        g_original,
        seconds: start.elapsed().as_secs_f64(),
    })
}

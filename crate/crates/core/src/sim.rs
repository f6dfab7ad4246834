//! Synthetic multi-outcome growth data with four outcome archetypes, and
//! the accuracy metrics used to score fits against the truth.
//!
//! Outcome types:
//! 1. constant mean, constant variance (no fixed slope, no random slope)
//! 2. sloped mean, constant variance (`mu_1 ~ U(1, 2)`, no random slope)
//! 3. constant mean, time-varying variance (random slope only)
//! 4. sloped mean, time-varying variance (`mu_1 ~ U(-2, -1)` and random slope)

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::model::{
    assemble_g, FactorCovariance, FixedEffects, LongitudinalDataset, Subject,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub r: usize,
    pub n: usize,
    /// Noise sd as a fraction of the sd of each outcome's conditional mean.
    pub noise_pct: f64,
    pub k_star: usize,
    /// Shares of the four outcome types; types 2 to 4 are rounded and the
    /// remainder goes to type 1.
    pub proportions: [f64; 4],
    /// Share of outcomes with a nonzero `u * g` interaction.
    pub alpha1_nonzero_frac: f64,
    pub t_choices: Vec<usize>,
    pub g1_range: (f64, f64),
    pub ar1_rho: f64,
    pub ar1_sd: f64,
    /// Emit the pooled-standardized age as the time variable, so that the
    /// true coefficients live on a unit time scale. Off means raw ages.
    pub standardize_time: bool,
    pub seed: u64,
    pub replication: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            r: 100,
            n: 100,
            noise_pct: 0.2,
            k_star: 3,
            proportions: [0.7, 0.1, 0.1, 0.1],
            alpha1_nonzero_frac: 0.05,
            t_choices: vec![3, 4, 5],
            g1_range: (20.0, 60.0),
            ar1_rho: 0.5,
            ar1_sd: 1.0,
            standardize_time: true,
            seed: 1,
            replication: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.r == 0 || self.n < 2 {
            return bad("need r >= 1 and n >= 2");
        }
        if !(self.noise_pct > 0.0 && self.noise_pct.is_finite()) {
            return bad("noise percentage must be positive");
        }
        if self.k_star == 0 {
            return bad("K* must be at least 1");
        }
        let total: f64 = self.proportions.iter().sum();
        if self.proportions.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return bad("type proportions must be nonnegative and sum to 1");
        }
        if self.type_counts().is_none() {
            return bad("type proportions cannot be met with this r");
        }
        if !(0.0..=1.0).contains(&self.alpha1_nonzero_frac) {
            return bad("alpha_1 share must lie in [0, 1]");
        }
        if self.t_choices.is_empty() || self.t_choices.contains(&0) {
            return bad("visit counts must be positive");
        }
        if !(self.g1_range.0 < self.g1_range.1) {
            return bad("baseline age range is empty");
        }
        if !(self.ar1_rho.abs() < 1.0) || !(self.ar1_sd > 0.0) {
            return bad("AR-1 needs |rho| < 1 and sd > 0");
        }
        Ok(())
    }

    /// Outcomes per type, `None` when the rounded counts exceed `r`.
    pub fn type_counts(&self) -> Option<[usize; 4]> {
        let mut c = [0usize; 4];
        for t in 1..4 {
            c[t] = (self.proportions[t] * self.r as f64).round() as usize;
        }
        let rest = self.r.checked_sub(c[1] + c[2] + c[3])?;
        c[0] = rest;
        Some(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub b: FixedEffects,
    pub q: DMatrix<f64>,
    pub delta: DVector<f64>,
    pub g: DMatrix<f64>,
    pub sigma: DVector<f64>,
    /// Outcome type in `1..=4`.
    pub types: Vec<u8>,
    /// Nonzero pattern of `B2` (`mu_1 | alpha_1`).
    pub fixed_slope_mask: DMatrix<bool>,
    /// Outcomes with a random slope.
    pub random_slope_mask: Vec<bool>,
    pub k_star: usize,
}

/// Accuracy of one fit against the truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimMetrics {
    pub err_b: f64,
    pub err_g: f64,
    pub tpr_fixed: f64,
    pub fpr_fixed: f64,
    pub tpr_random: f64,
    pub fpr_random: f64,
    pub k_hat: usize,
    pub k_correct: bool,
}

impl SimMetrics {
    pub const NAMES: [&'static str; 8] = [
        "err_B",
        "err_G",
        "tpr_fixed",
        "fpr_fixed",
        "tpr_random",
        "fpr_random",
        "k_hat",
        "k_correct",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.err_b,
            self.err_g,
            self.tpr_fixed,
            self.fpr_fixed,
            self.tpr_random,
            self.fpr_random,
            self.k_hat as f64,
            if self.k_correct { 1.0 } else { 0.0 },
        ]
    }
}

/// `T` draws of a stationary AR-1 with innovation sd `sd`.
pub fn ar1_series(t: usize, rho: f64, sd: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(rho.abs() < 1.0) || !(sd > 0.0) {
        return Err(Error::Config("AR-1 needs |rho| < 1 and sd > 0".into()));
    }
    let mut out = Vec::with_capacity(t);
    let mut prev = 0.0;
    for k in 0..t {
        let z: f64 = StandardNormal.sample(rng);
        prev = if k == 0 {
            z * sd / (1.0 - rho * rho).sqrt()
        } else {
            rho * prev + sd * z
        };
        out.push(prev);
    }
    Ok(out)
}

/// Seeded generator for one replication; replications use separate streams.
pub fn rng_for(seed: u64, replication: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication);
    rng
}

/// Draw one dataset and its truth.
pub fn generate_dataset(cfg: &SimConfig) -> Result<(LongitudinalDataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, cfg.replication);
    let (r, n, k) = (cfg.r, cfg.n, cfg.k_star);
    let counts = cfg.type_counts().expect("validated");

    let mut types: Vec<u8> = Vec::with_capacity(r);
    for (t, c) in counts.iter().enumerate() {
        types.extend(std::iter::repeat(t as u8 + 1).take(*c));
    }
    types.shuffle(&mut rng);

    let small = Normal::new(0.0, 0.1).expect("valid sd");
    let unit = Uniform::new(1.0, 2.0);
    // columns: 1 | u | w | g | u g
    let mut b = DMatrix::zeros(r, 5);
    for j in 0..r {
        b[(j, 0)] = StandardNormal.sample(&mut rng);
        b[(j, 1)] = small.sample(&mut rng);
        b[(j, 2)] = small.sample(&mut rng);
        b[(j, 3)] = match types[j] {
            2 => unit.sample(&mut rng),
            4 => -unit.sample(&mut rng),
            _ => 0.0,
        };
    }
    let n_alpha = (cfg.alpha1_nonzero_frac * r as f64).round() as usize;
    let mut order: Vec<usize> = (0..r).collect();
    order.shuffle(&mut rng);
    for &j in order.iter().take(n_alpha) {
        b[(j, 4)] = unit.sample(&mut rng);
    }

    let random_slope_mask: Vec<bool> = types.iter().map(|t| *t >= 3).collect();
    let loading = Uniform::new(-1.0, 1.0);
    let mut q = DMatrix::zeros(2 * r, k);
    let mut delta = DVector::zeros(2 * r);
    for j in 0..r {
        let active = [true, random_slope_mask[j]];
        for (off, on) in active.iter().enumerate() {
            if *on {
                for c in 0..k {
                    q[(2 * j + off, c)] = loading.sample(&mut rng);
                }
                delta[2 * j + off] = 1.0;
            }
        }
    }
    let factor = FactorCovariance {
        q: q.clone(),
        delta: delta.clone(),
    };

    // subjects: design and random effects first, noise once sigma is known
    let age1 = Uniform::new(cfg.g1_range.0, cfg.g1_range.1);
    let mut ages: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut us = Vec::with_capacity(n);
    let mut ws = Vec::with_capacity(n);
    let mut zetas = Vec::with_capacity(n);
    for _ in 0..n {
        let t = *cfg.t_choices.choose(&mut rng).expect("nonempty");
        let g1 = age1.sample(&mut rng);
        ages.push((0..t).map(|s| g1 + s as f64).collect());
        us.push(if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        ws.push(ar1_series(t, cfg.ar1_rho, cfg.ar1_sd, &mut rng)?);
        let z = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut rng));
        let e = DVector::from_fn(2 * r, |_, _| StandardNormal.sample(&mut rng));
        zetas.push(&q * z + e.component_mul(&delta.map(f64::sqrt)));
    }
    let times: Vec<Vec<f64>> = if cfg.standardize_time {
        let all: Vec<f64> = ages.iter().flatten().copied().collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let sd = (all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
        ages.iter()
            .map(|v| v.iter().map(|a| (a - mean) / sd).collect())
            .collect()
    } else {
        ages
    };

    let means: Vec<DMatrix<f64>> = (0..n)
        .map(|i| {
            let t = times[i].len();
            DMatrix::from_fn(r, t, |j, s| {
                let g = times[i][s];
                let x = [1.0, us[i], ws[i][s], g, us[i] * g];
                let fixed: f64 = (0..5).map(|c| b[(j, c)] * x[c]).sum();
                fixed + zetas[i][2 * j] + g * zetas[i][2 * j + 1]
            })
        })
        .collect();
    let n_obs: usize = times.iter().map(|t| t.len()).sum();
    let sigma = DVector::from_fn(r, |j, _| {
        let vals = means.iter().flat_map(|m| m.row(j).iter().copied().collect::<Vec<_>>());
        let (s1, s2) = vals.fold((0.0, 0.0), |(a, b), v| (a + v, b + v * v));
        let mean = s1 / n_obs as f64;
        let var = (s2 / n_obs as f64 - mean * mean).max(0.0);
        cfg.noise_pct * cfg.noise_pct * var
    });
    let noise_sd = sigma.map(f64::sqrt);

    let subjects: Vec<Subject> = (0..n)
        .map(|i| {
            let mut y = means[i].clone();
            for s in 0..y.ncols() {
                for j in 0..r {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    y[(j, s)] += noise_sd[j] * z;
                }
            }
            Subject {
                id: format!("{}", i + 1),
                times: times[i].clone(),
                u: DVector::from_element(1, us[i]),
                w: DMatrix::from_row_slice(1, ws[i].len(), &ws[i]),
                y,
            }
        })
        .collect();

    let fixed_slope_mask = DMatrix::from_fn(r, 2, |j, c| b[(j, 3 + c)] != 0.0);
    let truth = GroundTruth {
        b: FixedEffects { b, p_u: 1, p_w: 1 },
        g: assemble_g(&factor),
        q,
        delta,
        sigma,
        types,
        fixed_slope_mask,
        random_slope_mask,
        k_star: k,
    };
    Ok((LongitudinalDataset::new(subjects)?, truth))
}

/// A fit expressed on the scale of the data it was given.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub b: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub k: usize,
}

fn rates(est: impl Iterator<Item = bool>, truth: impl Iterator<Item = bool>) -> (f64, f64) {
    let (mut tp, mut pos, mut fp, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (e, t) in est.zip(truth) {
        if t {
            pos += 1;
            tp += e as usize;
        } else {
            neg += 1;
            fp += e as usize;
        }
    }
    let tpr = if pos == 0 { 1.0 } else { tp as f64 / pos as f64 };
    let fpr = if neg == 0 { 0.0 } else { fp as f64 / neg as f64 };
    (tpr, fpr)
}

/// Estimation errors and selection rates. A fixed slope counts as selected
/// when its `B2` entry is nonzero and a random slope when its variance in
/// `G` is nonzero.
pub fn evaluate(est: &Estimate, truth: &GroundTruth) -> Result<SimMetrics> {
    let r = truth.g.nrows() / 2;
    if est.b.shape() != truth.b.b.shape() || est.g.shape() != truth.g.shape() {
        return Err(Error::Dimension {
            what: "estimate against truth",
            expected: truth.b.b.len() + truth.g.len(),
            actual: est.b.len() + est.g.len(),
        });
    }
    let p = truth.b.b.ncols();
    let err_b = (&est.b - &truth.b.b).norm_squared() / (p * r) as f64;
    let err_g = (&est.g - &truth.g).norm_squared() / (4 * r * r) as f64;
    let p1 = truth.b.p1();
    let q = p - p1;
    let est_b2 = est.b.columns(p1, q);
    let truth_b2 = truth.b.b.columns(p1, q);
    let (tpr_fixed, fpr_fixed) = rates(est_b2.iter().map(|v| *v != 0.0), truth_b2.iter().map(|v| *v != 0.0));
    let (tpr_random, fpr_random) = rates(
        (0..r).map(|j| est.g[(2 * j + 1, 2 * j + 1)] != 0.0),
        truth.random_slope_mask.iter().copied(),
    );
    Ok(SimMetrics {
        err_b,
        err_g,
        tpr_fixed,
        fpr_fixed,
        tpr_random,
        fpr_random,
        k_hat: est.k,
        k_correct: est.k == truth.k_star,
    })
}

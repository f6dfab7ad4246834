//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! Criteria 4 and 5 fit 25 simulated datasets at r = 100 to 200 and take
//! several minutes per core. `HDGCM_ACCEPTANCE=1,2,3` runs a subset.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use hdgcm::accel::oracle::{loglik_direct_oracle, posterior_direct_oracle};
use hdgcm::accel::{loglik, mean_second_moment, posterior_eta, posterior_zeta, posteriors};
use hdgcm::em::q_function;
use hdgcm::model::{
    standardize, to_factor, to_scaled, Covariance, FactorCovariance, FixedEffects, LongitudinalDataset,
    ModelParams, ScaledCorrelation, Subject,
};
use hdgcm::pipeline::{fit_model, FitOptions};
use hdgcm::sim::{evaluate, generate_dataset, SimConfig, SimMetrics};
use hdgcm::stage1::{estep1, fit_stage1, update_b_dense, update_sigma_dense, Stage1Config};
use hdgcm::stage2::{
    even_coefficients, fit_stage2, ols_b2, project_rows, threshold_d, update_b1, update_b2, update_d_odd, DataStats,
    PostStats, Stage2Config,
};
use hdgcm::tuning::df_unpenalized;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn rel_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn random_subjects(rng: &mut ChaCha8Rng, n: usize, r: usize) -> LongitudinalDataset {
    let subjects = (0..n)
        .map(|i| {
            let t = rng.gen_range(1..=5);
            let mut times: Vec<f64> = (0..t).map(|_| rng.gen_range(-2.0..2.0)).collect();
            times.sort_by(f64::total_cmp);
            Subject {
                id: format!("s{i}"),
                times,
                u: DVector::from_fn(1, |_, _| rng.gen_range(0..2) as f64),
                w: DMatrix::from_fn(1, t, |_, _| rng.gen_range(-1.0..1.0)),
                y: DMatrix::from_fn(r, t, |_, _| rng.gen_range(-3.0..3.0)),
            }
        })
        .collect();
    LongitudinalDataset::new(subjects).expect("valid random data")
}

fn random_params(rng: &mut ChaCha8Rng, data: &LongitudinalDataset, k: usize, scaled: bool) -> ModelParams {
    let dims = data.dims;
    let dim = 2 * dims.r;
    let b = FixedEffects {
        b: DMatrix::from_fn(dims.r, dims.p(), |_, _| rng.gen_range(-1.0..1.0)),
        p_u: dims.p_u,
        p_w: dims.p_w,
    };
    let sigma = DVector::from_fn(dims.r, |_, _| rng.gen_range(0.2..2.0));
    let cov = if scaled {
        let mut p = DMatrix::from_fn(dim, k, |_, _| rng.gen_range(-0.8..0.8));
        project_rows(&mut p, 0.05);
        let d = DVector::from_fn(dim, |_, _| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.1..2.0) });
        Covariance::Scaled(ScaledCorrelation::new(p, d).unwrap())
    } else {
        let q = DMatrix::from_fn(dim, k, |_, _| rng.gen_range(-1.0..1.0));
        let delta = DVector::from_fn(dim, |_, _| rng.gen_range(0.05..1.5));
        Covariance::Factor(FactorCovariance::new(q, delta).unwrap())
    };
    ModelParams::new(b, sigma, cov).unwrap()
}

fn criterion_1() -> Result<Outcome> {
    let start = Instant::now();
    let (mut worst_m, mut worst_omega, mut worst_ll) = (0.0f64, 0.0f64, 0.0f64);
    let instances = 240;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let r = rng.gen_range(1..=20);
        let k = rng.gen_range(1..=3);
        let n = rng.gen_range(1..=4);
        let data = random_subjects(&mut rng, n, r);
        let theta = random_params(&mut rng, &data, k, seed % 2 == 0);
        for s in &data.subjects {
            let fast = if seed % 2 == 0 {
                posterior_eta(&theta, s)?
            } else {
                posterior_zeta(&theta, s)?
            };
            let slow = posterior_direct_oracle(&theta, s)?;
            let scale = slow.m.norm().max(slow.omega.norm());
            worst_m = worst_m.max((&fast.m - &slow.m).norm() / scale);
            worst_omega = worst_omega.max(rel_mat(&fast.omega, &slow.omega));
        }
        worst_ll = worst_ll.max(rel(loglik(&theta, &data)?, loglik_direct_oracle(&theta, &data)?));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_m < 1e-8 && worst_omega < 1e-8 && worst_ll < 1e-8 && secs < 60.0;
    outcome(
        pass,
        format!(
            "{instances} instances, worst rel err: mean {worst_m:.1e}, cov {worst_omega:.1e}, loglik {worst_ll:.1e}; {secs:.1}s"
        ),
    )
}

fn sim_data(r: usize, n: usize, seed: u64) -> Result<LongitudinalDataset> {
    let (data, _) = generate_dataset(&SimConfig {
        r,
        n,
        seed,
        ..SimConfig::default()
    })?;
    Ok(standardize(&data)?)
}

fn criterion_2() -> Result<Outcome> {
    let slack = 1e-6;
    let runs: Vec<(usize, usize)> = (0..20).map(|i| (10 + 2 * i, 1 + i % 3)).collect();
    let results: Vec<Result<(f64, f64, usize, usize)>> = runs
        .par_iter()
        .enumerate()
        .map(|(i, &(r, k))| {
            let data = sim_data(r, 50, 200 + i as u64)?;
            let mut cfg = Stage1Config::new(k);
            cfg.max_outer = 200;
            let s1 = fit_stage1(&data, &cfg)?;
            let mut worst1: f64 = 0.0;
            for w in s1.trace.windows(2) {
                let drop = (w[0].loglik - w[1].loglik) / w[0].loglik.abs();
                worst1 = worst1.max(drop);
            }
            worst1 = worst1.max((s1.trace.last().unwrap().loglik - s1.loglik) / s1.loglik.abs());

            let s2cfg = Stage2Config {
                tune_per_iteration: false,
                lambda_d: [0.1, 0.5, 2.0][i % 3],
                lambda_b: [0.01, 0.05, 0.2][(i / 3) % 3],
                max_outer: 200,
                ..Stage2Config::default()
            };
            let s2 = fit_stage2(&data, &s1.params, &s2cfg)?;
            let obj: Vec<f64> = s2.trace.iter().map(|t| t.objective.expect("stage 2 objective")).collect();
            let mut worst2: f64 = 0.0;
            for w in obj.windows(2) {
                worst2 = worst2.max((w[1] - w[0]) / w[0].abs());
            }
            Ok((worst1, worst2, s1.trace.len(), s2.trace.len()))
        })
        .collect();
    let mut worst1: f64 = 0.0;
    let mut worst2: f64 = 0.0;
    let (mut it1, mut it2) = (0, 0);
    for r in results {
        let (a, b, c, d) = r?;
        worst1 = worst1.max(a);
        worst2 = worst2.max(b);
        it1 += c;
        it2 += d;
    }
    outcome(
        worst1 <= slack && worst2 <= slack,
        format!(
            "20+20 runs ({it1} and {it2} iterations), largest relative step against monotonicity: loglik {worst1:.1e}, objective {worst2:.1e}"
        ),
    )
}

/// Central differences of `f` along each coordinate of `x`.
fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let mut up = x.to_vec();
            up[k] += h;
            let mut dn = x.to_vec();
            dn[k] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..300 {
        let a = hi - phi * (hi - lo);
        let b = lo + phi * (hi - lo);
        if f(a) < f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    0.5 * (lo + hi)
}

fn set_d(theta: &ModelParams, k: usize, v: f64) -> ModelParams {
    let mut out = theta.clone();
    if let Covariance::Scaled(s) = &mut out.cov {
        s.d[k] = v;
    }
    out
}

fn criterion_3() -> Result<Outcome> {
    let h = 1e-5;
    let (mut g_b, mut g_sigma, mut g_dodd, mut g_b1) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut e_soft, mut e_prox) = (0.0f64, 0.0f64);
    for seed in 0..5u64 {
        let data = sim_data(4 + seed as usize % 2, 40, 300 + seed)?;
        let dims = data.dims;
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);

        // stage 1: fixed effects and noise variances
        let theta = random_params(&mut rng, &data, 2, false);
        let posts = estep1(&theta, &data)?;
        let psi_bar = mean_second_moment(&posts);
        let b_new = update_b_dense(&posts, &data)?;
        let sigma_new = update_sigma_dense(&posts, &b_new, &data);
        let mut upd = theta.clone();
        upd.b = b_new.clone();
        upd.sigma = sigma_new.clone();
        let q_b = |x: &[f64]| {
            let mut t = upd.clone();
            t.b.b = DMatrix::from_column_slice(dims.r, dims.p(), x);
            q_function(&t, &posts, &psi_bar, &data).unwrap()
        };
        g_b = g_b.max(max_abs(&fd_grad(q_b, upd.b.b.as_slice(), h)));
        let q_s = |x: &[f64]| {
            let mut t = upd.clone();
            t.sigma = DVector::from_column_slice(x);
            q_function(&t, &posts, &psi_bar, &data).unwrap()
        };
        g_sigma = g_sigma.max(max_abs(&fd_grad(q_s, upd.sigma.as_slice(), h)));

        // stage 2: intercept scales, unpenalized fixed effects, slope
        // scales and the penalized slope block
        let theta = random_params(&mut rng, &data, 2, true);
        let posts = posteriors(&theta, &data)?;
        let ds = DataStats::new(&data)?;
        let ps = PostStats::new(&ds, &posts);
        let q_at = |t: &ModelParams| q_function(t, &posts, &ps.psi_bar, &data).unwrap();
        let d = theta.cov.as_scaled().d;
        for j in 0..dims.r {
            let d0 = update_d_odd(j, &ps, &theta.b.b, d[2 * j + 1])?;
            let at = set_d(&theta, 2 * j, d0);
            let g = (q_at(&set_d(&at, 2 * j, d0 + h)) - q_at(&set_d(&at, 2 * j, d0 - h))) / (2.0 * h);
            g_dodd = g_dodd.max(g.abs());

            let (a, c) = even_coefficients(j, &ds, &ps, &theta.b.b, d0, theta.sigma[j]);
            for (lambda, dbar) in [(0.0, 1.0), (0.05, 0.7), (0.4, 0.3)] {
                let v = threshold_d(a, c, lambda, dbar)?;
                let obj = |x: f64| -q_at(&set_d(&at, 2 * j + 1, x)) + 0.5 * lambda * x.abs() / dbar;
                e_soft = e_soft.max((v - golden_min(obj, -20.0, 20.0)).abs());
            }
        }

        let p1 = dims.p1();
        let q = dims.p2();
        let b1 = update_b1(&ds, &ps, &theta.b.b2(), &d);
        let mut at = theta.clone();
        at.b.set_b1(&b1);
        let q_b1 = |x: &[f64]| {
            let mut t = at.clone();
            t.b.set_b1(&DMatrix::from_column_slice(dims.r, p1, x));
            q_at(&t)
        };
        g_b1 = g_b1.max(max_abs(&fd_grad(q_b1, b1.as_slice(), h)));

        // Proximal gradient on -Q + lambda sum |b| / |b_bar|, with the
        // quadratic read off Q itself.
        let lambda = 0.02;
        let bbar = ols_b2(&ds, &ps, &b1, &d);
        let q_b2 = |x: &[f64]| {
            let mut t = at.clone();
            t.b.set_b2(&DMatrix::from_column_slice(dims.r, q, x));
            q_at(&t)
        };
        let m = dims.r * q;
        let zero = vec![0.0; m];
        let step = 0.1;
        let lin = DVector::from_vec(fd_grad(&q_b2, &zero, step));
        let hess = DMatrix::from_fn(m, m, |a, b| {
            let e = |k: usize, s: f64| {
                let mut v = zero.clone();
                v[k] += s;
                v
            };
            let mut pp = e(a, step);
            pp[b] += step;
            let mut pm = e(a, step);
            pm[b] -= step;
            let mut mp = e(a, -step);
            mp[b] += step;
            let mut mm = e(a, -step);
            mm[b] -= step;
            -(q_b2(&pp) - q_b2(&pm) - q_b2(&mp) + q_b2(&mm)) / (4.0 * step * step)
        });
        let hess = (&hess + hess.transpose()) * 0.5;
        let thr = DVector::from_fn(m, |k, _| lambda / bbar.as_slice()[k].abs());
        let lip = hess.symmetric_eigenvalues().amax();
        let mut x = DVector::zeros(m);
        for _ in 0..200_000 {
            let grad = &hess * &x - &lin;
            let z = &x - grad / lip;
            let next = DVector::from_fn(m, |k, _| {
                let t = thr[k] / lip;
                z[k].signum() * (z[k].abs() - t).max(0.0)
            });
            let moved = (&next - &x).amax();
            x = next;
            if moved < 1e-15 {
                break;
            }
        }
        let b2 = update_b2(&ds, &ps, &b1, &d, &theta.sigma, lambda, &bbar, &DMatrix::zeros(dims.r, q), 1e-14, 100_000);
        e_prox = e_prox.max((DVector::from_column_slice(b2.as_slice()) - x).amax());
    }
    let grad_worst = g_b.max(g_sigma).max(g_dodd).max(g_b1);
    outcome(
        grad_worst < 1e-5 && e_soft < 1e-6 && e_prox < 1e-6,
        format!(
            "max |dQ|: B {g_b:.1e}, sigma {g_sigma:.1e}, d_odd {g_dodd:.1e}, B1 {g_b1:.1e}; soft-threshold gap {e_soft:.1e}; B2 proximal gap {e_prox:.1e}"
        ),
    )
}

/// `(noise, n, r)` configuration and replication index.
type Job = ((f64, usize, usize), u64);

fn run_jobs(jobs: &[Job]) -> Result<Vec<SimMetrics>> {
    jobs.par_iter()
        .map(|&((noise, n, r), rep)| {
            let cfg = SimConfig {
                r,
                n,
                noise_pct: noise,
                seed: 2024,
                replication: rep,
                ..SimConfig::default()
            };
            let (data, truth) = generate_dataset(&cfg)?;
            let fit = fit_model(&data, &FitOptions::default())?;
            Ok(evaluate(&fit.estimate(), &truth)?)
        })
        .collect()
}

fn mean(ms: &[SimMetrics], f: impl Fn(&SimMetrics) -> f64) -> f64 {
    ms.iter().map(f).sum::<f64>() / ms.len() as f64
}

const BASE: (f64, usize, usize) = (0.2, 100, 100);

fn criterion_4(base: &[SimMetrics]) -> Result<Outcome> {
    let eb = mean(base, |m| m.err_b);
    let eg = mean(base, |m| m.err_g);
    let tf = mean(base, |m| m.tpr_fixed);
    let ff = mean(base, |m| m.fpr_fixed);
    let tr = mean(base, |m| m.tpr_random);
    let fr = mean(base, |m| m.fpr_random);
    let kc = base.iter().filter(|m| m.k_correct).count();
    let pass = (0.012..=0.028).contains(&eb)
        && (0.008..=0.030).contains(&eg)
        && tf >= 0.98
        && ff <= 0.05
        && tr >= 0.97
        && fr <= 0.06
        && kc * 10 >= 9 * base.len();
    outcome(
        pass,
        format!(
            "{} reps: err_B {eb:.4}, err_G {eg:.4}, TPR-fixed {tf:.4}, FPR-fixed {ff:.4}, TPR-random {tr:.4}, FPR-random {fr:.4}, K correct {kc}/{}",
            base.len(),
            base.len()
        ),
    )
}

fn criterion_5(base: &[SimMetrics], small_n: &[SimMetrics], noisy: &[SimMetrics], wide: &[SimMetrics]) -> Result<Outcome> {
    let e = |ms: &[SimMetrics]| mean(ms, |m| m.err_b);
    let (a, b, c, d) = (e(base), e(small_n), e(noisy), e(wide));
    let shift = (d - a).abs() / a;
    outcome(
        b > a && c > a && shift < 0.5,
        format!("mean err_B: base {a:.4}, n=50 {b:.4}, 50% noise {c:.4}, r=200 {d:.4} ({:.0}% change)", 100.0 * shift),
    )
}

fn criterion_6() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let dim = 2 * rng.gen_range(1..=10);
        let k = rng.gen_range(1..=4);
        let q = DMatrix::from_fn(dim, k, |_, _| rng.gen_range(-2.0..2.0));
        let delta = DVector::from_fn(dim, |_, _| rng.gen_range(0.01..2.0));
        let back = to_factor(&to_scaled(&FactorCovariance::new(q.clone(), delta.clone())?));
        worst = worst.max((&back.q - &q).amax() / q.amax().max(1.0));
        worst = worst.max((&back.delta - &delta).amax() / delta.amax().max(1.0));

        let mut p = DMatrix::from_fn(dim, k, |_, _| rng.gen_range(-1.0..1.0));
        project_rows(&mut p, 0.01);
        let d = DVector::from_fn(dim, |_, _| rng.gen_range(0.0..3.0));
        let again = to_scaled(&to_factor(&ScaledCorrelation::new(p.clone(), d.clone())?));
        worst = worst.max((&again.p - &p).amax());
        worst = worst.max((&again.d - &d).amax() / d.amax().max(1.0));
    }
    let a = df_unpenalized(100, 3);
    let b = df_unpenalized(2006, 2);
    outcome(
        worst <= 1e-12 && a == 797 && b == 12035,
        format!("1000 round trips each way, worst error {worst:.1e}; df(100, 3) = {a}, df(2006, 2) = {b}"),
    )
}

fn run_cli(args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_hdgcm"))
        .args(args)
        .env_remove("HDGCM_THREADS")
        .output()
        .context("running hdgcm")?;
    ensure!(
        out.status.success(),
        "hdgcm {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn params_without_timing(path: &Path) -> Result<serde_json::Value> {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    v.as_object_mut().context("params is an object")?.remove("seconds");
    Ok(v)
}

fn criterion_7() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let p = |s: &str| dir.path().join(s).display().to_string();
    run_cli(&["simulate", "--r", "40", "--n", "80", "--noise", "0.2", "--seed", "7", "--out", &p("data")])?;
    for threads in ["1", "4"] {
        let fit_dir = p(&format!("fit{threads}"));
        run_cli(&[
            "fit", "--data", &p("data/data.csv"), "--k-grid", "1..4", "--tune", "--seed", "7", "--threads", threads,
            "--out", &fit_dir,
        ])?;
        run_cli(&["eval", "--fit", &fit_dir, "--truth", &p("data/truth.json")])?;
    }
    let m1 = std::fs::read(dir.path().join("fit1/metrics.csv"))?;
    let m4 = std::fs::read(dir.path().join("fit4/metrics.csv"))?;
    let same_params =
        params_without_timing(&dir.path().join("fit1/params.json"))? == params_without_timing(&dir.path().join("fit4/params.json"))?;
    let same_curves = std::fs::read(dir.path().join("fit1/curves.csv"))? == std::fs::read(dir.path().join("fit4/curves.csv"))?;
    outcome(
        m1 == m4 && same_params,
        format!(
            "metrics identical: {}, params identical apart from timing: {same_params}, curves identical: {same_curves}",
            m1 == m4
        ),
    )
}

fn report(id: usize, name: &str, started: Instant, res: Result<Outcome>) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match res {
        Ok(o) => {
            println!("criterion {id} [{name}]: {} ({}; {secs:.0}s)", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            o.pass
        }
        Err(e) => {
            println!("criterion {id} [{name}]: FAIL (error: {e:#})");
            false
        }
    }
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("HDGCM_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let want = |id: usize| only.as_ref().map_or(true, |o| o.contains(&id));
    let skip = |id: usize, name: &str| println!("criterion {id} [{name}]: SKIPPED");
    let run = |id: usize, name: &str, f: &dyn Fn() -> Result<Outcome>| -> bool {
        if want(id) {
            let t = Instant::now();
            report(id, name, t, f())
        } else {
            skip(id, name);
            true
        }
    };
    let mut all = run(1, "oracle equivalence", &criterion_1);
    all &= run(2, "EM monotonicity", &criterion_2);
    all &= run(3, "M-step stationarity", &criterion_3);

    if want(4) || want(5) {
        let t = Instant::now();
        let mut jobs: Vec<Job> = (0..10).map(|rep| (BASE, rep)).collect();
        for cfg in [(0.2, 50, 100), (0.5, 100, 100), (0.2, 100, 200)] {
            jobs.extend((0..5).map(|rep| (cfg, rep)));
        }
        let fits = run_jobs(&jobs);
        let (r4, r5) = match &fits {
            Ok(ms) => (criterion_4(&ms[..10]), criterion_5(&ms[..5], &ms[10..15], &ms[15..20], &ms[20..25])),
            Err(e) => (Err(anyhow::anyhow!("{e:#}")), Err(anyhow::anyhow!("{e:#}"))),
        };
        all &= report(4, "desk-scale reproduction", t, r4);
        all &= report(5, "trends across configurations", t, r5);
    } else {
        skip(4, "desk-scale reproduction");
        skip(5, "trends across configurations");
    }

    all &= run(6, "parameterization round trip and df", &criterion_6);
    all &= run(7, "thread-count determinism", &criterion_7);
    if !all {
        std::process::exit(1);
    }
}

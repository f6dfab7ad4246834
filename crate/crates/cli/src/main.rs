use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use hdgcm::io::{self, BicRow, ConfigEcho, ParamsFile, TruthFile};
use hdgcm::pipeline::{fit_model, FitOptions, PenaltySpec, RankSpec};
use hdgcm::sim::{evaluate, generate_dataset, SimConfig};
use hdgcm::stage1::Stage1Config;
use hdgcm::stage2::{LambdaGrid, WeightSchedule};
use hdgcm::tuning::select_k;

/// Growth curve models for many outcomes, fitted by two-stage EM.
#[derive(Parser, Debug)]
#[command(name = "hdgcm", version)]
struct Cli {
    /// Worker threads for subject-parallel work (default: all cores).
    #[arg(long, global = true, env = "HDGCM_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its ground truth.
    Simulate(SimulateArgs),
    /// Fit the model and write params.json, trace.csv and curves.csv.
    Fit(FitArgs),
    /// Choose the rank by BIC and write bic.csv.
    Tune(TuneArgs),
    /// Emit growth curves from a saved fit.
    Predict(PredictArgs),
    /// Score a saved fit against simulation truth.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 100)]
    r: usize,
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Noise sd as a fraction of the conditional-mean sd.
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 3)]
    k_star: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    replication: u64,
    /// Emit raw ages instead of the pooled-standardized time.
    #[arg(long)]
    raw_time: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Common {
    /// Long-format CSV input.
    #[arg(long)]
    data: PathBuf,
    /// Relative-change tolerance for both EM stages.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    /// Fit on the raw covariate and time scales.
    #[arg(long)]
    no_standardize: bool,
    /// Recorded in the output; the fit itself draws no random numbers.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    /// Fixed rank.
    #[arg(long, conflicts_with = "k_grid")]
    k: Option<usize>,
    /// Rank candidates chosen by BIC, `A..B` (inclusive) or `a,b,c`.
    #[arg(long, value_parser = parse_k_grid)]
    k_grid: Option<KGrid>,
    #[arg(long)]
    lambda_d: Option<f64>,
    #[arg(long)]
    lambda_b: Option<f64>,
    /// Re-tune the penalties by BIC at every iteration. A penalty also
    /// given explicitly is held at that single value.
    #[arg(long)]
    tune: bool,
    /// Points on each log-spaced penalty grid.
    #[arg(long, default_value_t = 20)]
    grid_size: usize,
    /// Recompute the adaptive weights every iteration instead of once.
    #[arg(long)]
    refresh_weights: bool,
}

#[derive(Args, Debug)]
struct TuneArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_k_grid, default_value = "1..5")]
    k_grid: KGrid,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Directory holding params.json.
    #[arg(long)]
    fit: PathBuf,
    /// Subjects to draw individual curves for.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output CSV (default: curves.csv in the fit directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Output CSV (default: metrics.csv in the fit directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
struct KGrid(Vec<usize>);

fn parse_k_grid(s: &str) -> Result<KGrid, String> {
    let bad = || format!("`{s}` is not a rank grid like `1..5` or `1,2,4`");
    let ks: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|t| t.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    };
    if ks.is_empty() || ks.contains(&0) {
        return Err("ranks must be at least 1".into());
    }
    Ok(KGrid(ks))
}

fn echo(value: Value) -> ConfigEcho {
    match value {
        Value::Object(map) => map,
        _ => ConfigEcho::new(),
    }
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let cfg = SimConfig {
        r: a.r,
        n: a.n,
        noise_pct: a.noise,
        k_star: a.k_star,
        standardize_time: !a.raw_time,
        seed: a.seed,
        replication: a.replication,
        ..SimConfig::default()
    };
    let (data, truth) = generate_dataset(&cfg)?;
    prepare_dir(&a.out)?;
    io::write_long_csv(&data, a.out.join("data.csv"))?;
    let config = echo(json!({
        "r": a.r, "n": a.n, "noise": a.noise, "k_star": a.k_star,
        "seed": a.seed, "replication": a.replication, "raw_time": a.raw_time,
    }));
    TruthFile::new(&truth, config).save(a.out.join("truth.json"))?;
    println!("wrote {} subjects x {} outcomes to {}", data.dims.n, data.dims.r, a.out.display());
    Ok(())
}

fn penalty_spec(a: &FitArgs) -> Result<PenaltySpec> {
    let grid = |fixed: Option<f64>| -> Result<LambdaGrid> {
        Ok(match fixed {
            Some(v) => LambdaGrid::Fixed(vec![v]),
            None => {
                if a.grid_size == 0 {
                    bail!("--grid-size must be positive");
                }
                LambdaGrid::log_spaced(a.grid_size)
            }
        })
    };
    let explicit = a.lambda_d.is_some() || a.lambda_b.is_some();
    if a.tune || !explicit {
        Ok(PenaltySpec::Tune {
            grid_d: grid(a.lambda_d)?,
            grid_b: grid(a.lambda_b)?,
        })
    } else {
        Ok(PenaltySpec::Fixed {
            lambda_d: a.lambda_d.unwrap_or(0.0),
            lambda_b: a.lambda_b.unwrap_or(0.0),
        })
    }
}

fn fit(a: &FitArgs) -> Result<()> {
    let c = &a.common;
    let data = io::load_long_csv(&c.data).with_context(|| format!("reading {}", c.data.display()))?;
    let rank = match (a.k, &a.k_grid) {
        (Some(k), _) => RankSpec::Fixed(k),
        (None, Some(g)) => RankSpec::Grid(g.0.clone()),
        (None, None) => RankSpec::Grid((1..=5).collect()),
    };
    let opts = FitOptions {
        rank: rank.clone(),
        penalty: penalty_spec(a)?,
        tol: c.tol,
        max_iter: c.max_iter,
        standardize: !c.no_standardize,
        weights: if a.refresh_weights {
            WeightSchedule::Refresh
        } else {
            WeightSchedule::Frozen
        },
    };
    let out = fit_model(&data, &opts)?;
    prepare_dir(&c.out)?;
    let config = echo(json!({
        "data": c.data.display().to_string(),
        "rank": format!("{:?}", rank),
        "penalty": format!("{:?}", opts.penalty),
        "tol": c.tol,
        "max_iter": c.max_iter,
        "standardize": opts.standardize,
        "weights": format!("{:?}", opts.weights),
        "seed": c.seed,
    }));
    let params = ParamsFile::from_fit(&out, data.dims.n, config);
    params.save(c.out.join("params.json"))?;
    io::write_trace(&io::trace_rows(&out), c.out.join("trace.csv"))?;
    let curves = io::curve_table(&out.stage2.params, &out.scales, Some(&data))?;
    io::write_curves(&curves, c.out.join("curves.csv"))?;
    println!(
        "K = {}, lambda_d = {:.4e}, lambda_B = {:.4e}, converged = {}, {} random slopes and {} fixed slopes kept",
        out.k,
        out.stage2.lambda_d,
        out.stage2.lambda_b,
        params.converged,
        out.stage2.slope_mask.iter().filter(|m| **m).count(),
        out.stage2.b2_mask.iter().filter(|m| **m).count(),
    );
    if !params.converged {
        eprintln!("warning: iteration cap reached before convergence; results written anyway");
    }
    Ok(())
}

fn tune(a: &TuneArgs) -> Result<()> {
    let c = &a.common;
    let data = io::load_long_csv(&c.data).with_context(|| format!("reading {}", c.data.display()))?;
    let work = if c.no_standardize {
        data
    } else {
        hdgcm::model::standardize(&data)?
    };
    let mut base = Stage1Config::new(1);
    base.tol = c.tol;
    base.max_outer = c.max_iter;
    let sel = select_k(&work, &a.k_grid.0, &base)?;
    prepare_dir(&c.out)?;
    let rows: Vec<BicRow> = sel.reports.iter().map(BicRow::from).collect();
    io::write_bic(&rows, c.out.join("bic.csv"))?;
    println!("K = {}", sel.k);
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let params = ParamsFile::load(a.fit.join("params.json"))?;
    let theta = params.theta()?;
    let scales = params.standardization.to_standardization();
    let data = match &a.data {
        Some(p) => Some(io::load_long_csv(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let rows = io::curve_table(&theta, &scales, data.as_ref())?;
    let out = a.out.clone().unwrap_or_else(|| a.fit.join("curves.csv"));
    io::write_curves(&rows, &out)?;
    println!("wrote {} curves to {}", rows.len(), out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let params = ParamsFile::load(a.fit.join("params.json"))?;
    let truth = TruthFile::load(&a.truth)?.to_truth()?;
    let m = evaluate(&params.estimate()?, &truth)?;
    let out = a.out.clone().unwrap_or_else(|| a.fit.join("metrics.csv"));
    io::write_metrics(&[m], &out)?;
    for (name, v) in hdgcm::sim::SimMetrics::NAMES.iter().zip(m.values()) {
        println!("{name:>10} {v}");
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            bail!("--threads must be at least 1");
        }
        pool = pool.num_threads(t);
    }
    let pool = pool.build()?;
    pool.install(|| match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Tune(a) => tune(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
    })
}

//! File formats: long-format CSV data, the fitted-parameter document,
//! simulation truth, and the plot-ready tables written next to a fit.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so every
//! emitted value reads back bit-for-bit.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::accel::posterior_eta;
use crate::em::IterRecord;
use crate::error::{Error, Result};
use crate::model::{
    to_factor, ColumnScale, Covariance, FactorCovariance, FixedEffects, LongitudinalDataset, ModelParams,
    ScaledCorrelation, Standardization, Subject,
};
use crate::pipeline::FitOutput;
use crate::sim::{Estimate, GroundTruth, SimMetrics};
use crate::tuning::{BicReport, Candidate};

/// Version tag carried by every JSON document written here.
pub const SCHEMA_VERSION: u32 = 1;

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

struct Layout {
    p_u: usize,
    p_w: usize,
    r: usize,
}

fn parse_header(fields: &csv::StringRecord) -> Result<Layout> {
    let names: Vec<&str> = fields.iter().map(str::trim).collect();
    if names.len() < 3 || names[0] != "subject" || names[1] != "time" {
        return Err(parse_err(1, "header must start with `subject,time` and name at least one outcome"));
    }
    let mut counts = [0usize; 3];
    let mut stage = 0;
    for (col, name) in names.iter().enumerate().skip(2) {
        let (prefix, idx) = name
            .split_once('_')
            .ok_or_else(|| parse_err(1, format!("column {}: unexpected name `{name}`", col + 1)))?;
        let kind = match prefix {
            "u" => 0,
            "w" => 1,
            "y" => 2,
            _ => return Err(parse_err(1, format!("column {}: unexpected name `{name}`", col + 1))),
        };
        if kind < stage {
            return Err(parse_err(1, format!("column {}: `{name}` out of order (u, then w, then y)", col + 1)));
        }
        stage = kind;
        counts[kind] += 1;
        if idx.parse::<usize>().ok() != Some(counts[kind]) {
            return Err(parse_err(
                1,
                format!("column {}: expected `{prefix}_{}`, found `{name}`", col + 1, counts[kind]),
            ));
        }
    }
    if counts[2] == 0 {
        return Err(parse_err(1, "no outcome columns `y_1..`"));
    }
    Ok(Layout {
        p_u: counts[0],
        p_w: counts[1],
        r: counts[2],
    })
}

struct Visit {
    line: usize,
    time: f64,
    w: Vec<f64>,
    y: Vec<f64>,
}

/// Read long-format data: header `subject,time,u_1..,w_1..,y_1..`, one row
/// per visit. Subjects keep their order of first appearance and visits are
/// sorted by time.
pub fn read_long_csv<R: Read>(reader: R) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = records.next().ok_or_else(|| parse_err(1, "empty file"))??;
    let layout = parse_header(&header)?;
    let width = 2 + layout.p_u + layout.p_w + layout.r;
    let col_name = |c: usize| -> String {
        match c {
            0 => "subject".into(),
            1 => "time".into(),
            c if c < 2 + layout.p_u => format!("u_{}", c - 1),
            c if c < 2 + layout.p_u + layout.p_w => format!("w_{}", c - 1 - layout.p_u),
            c => format!("y_{}", c - 1 - layout.p_u - layout.p_w),
        }
    };

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (Vec<f64>, usize, Vec<Visit>)> = HashMap::new();
    for rec in records {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != width {
            return Err(parse_err(line, format!("expected {width} fields, found {}", rec.len())));
        }
        let mut vals = Vec::with_capacity(width - 2);
        for c in 1..width {
            let raw = rec[c].trim();
            if raw.is_empty() {
                return Err(parse_err(line, format!("missing value in column `{}`", col_name(c))));
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(line, format!("column `{}`: `{raw}` is not a number", col_name(c))))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column `{}`: non-finite value", col_name(c))));
            }
            vals.push(v);
        }
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            return Err(parse_err(line, "missing value in column `subject`"));
        }
        let time = vals[0];
        let u = vals[1..1 + layout.p_u].to_vec();
        let w = vals[1 + layout.p_u..1 + layout.p_u + layout.p_w].to_vec();
        let y = vals[1 + layout.p_u + layout.p_w..].to_vec();
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (u.clone(), line, Vec::new())
        });
        if entry.0 != u {
            return Err(parse_err(
                line,
                format!("subject `{id}` changes its time-invariant covariates (first seen on line {})", entry.1),
            ));
        }
        if let Some(prev) = entry.2.iter().find(|v| v.time == time) {
            return Err(parse_err(
                line,
                format!("duplicate visit for subject `{id}` at time {time} (also on line {})", prev.line),
            ));
        }
        entry.2.push(Visit { line, time, w, y });
    }
    if order.is_empty() {
        return Err(parse_err(2, "no data rows"));
    }

    let subjects = order
        .into_iter()
        .map(|id| {
            let (u, _, mut visits) = groups.remove(&id).expect("grouped above");
            visits.sort_by(|a, b| a.time.total_cmp(&b.time));
            let t = visits.len();
            Subject {
                times: visits.iter().map(|v| v.time).collect(),
                u: DVector::from_vec(u),
                w: DMatrix::from_fn(layout.p_w, t, |k, c| visits[c].w[k]),
                y: DMatrix::from_fn(layout.r, t, |k, c| visits[c].y[k]),
                id,
            }
        })
        .collect();
    LongitudinalDataset::new(subjects)
}

pub fn load_long_csv(path: impl AsRef<Path>) -> Result<LongitudinalDataset> {
    read_long_csv(BufReader::new(File::open(path)?))
}

pub fn write_long_csv_to<W: Write>(data: &LongitudinalDataset, writer: W) -> Result<()> {
    let dims = data.dims;
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["subject".to_string(), "time".to_string()];
    header.extend((1..=dims.p_u).map(|k| format!("u_{k}")));
    header.extend((1..=dims.p_w).map(|k| format!("w_{k}")));
    header.extend((1..=dims.r).map(|k| format!("y_{k}")));
    wtr.write_record(&header)?;
    for s in &data.subjects {
        for t in 0..s.n_visits() {
            let mut row = vec![s.id.clone(), s.times[t].to_string()];
            row.extend(s.u.iter().map(|v| v.to_string()));
            row.extend(s.w.column(t).iter().map(|v| v.to_string()));
            row.extend(s.y.column(t).iter().map(|v| v.to_string()));
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_long_csv(data: &LongitudinalDataset, path: impl AsRef<Path>) -> Result<()> {
    write_long_csv_to(data, BufWriter::new(File::create(path)?))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(what: &'static str, rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
        return Err(Error::Dimension {
            what,
            expected: ncols,
            actual: bad.len(),
        });
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |a, b| rows[a][b]))
}

fn width(rows: &[Vec<f64>]) -> usize {
    rows.first().map_or(0, Vec::len)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub center: f64,
    pub scale: f64,
}

impl From<ColumnScale> for ScaleRecord {
    fn from(c: ColumnScale) -> Self {
        ScaleRecord {
            center: c.center,
            scale: c.scale,
        }
    }
}

impl From<ScaleRecord> for ColumnScale {
    fn from(c: ScaleRecord) -> Self {
        ColumnScale {
            center: c.center,
            scale: c.scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationRecord {
    pub time: ScaleRecord,
    pub u: Vec<ScaleRecord>,
    pub w: Vec<ScaleRecord>,
}

impl From<&Standardization> for StandardizationRecord {
    fn from(s: &Standardization) -> Self {
        StandardizationRecord {
            time: s.time.into(),
            u: s.u.iter().map(|c| (*c).into()).collect(),
            w: s.w.iter().map(|c| (*c).into()).collect(),
        }
    }
}

impl StandardizationRecord {
    pub fn to_standardization(&self) -> Standardization {
        Standardization {
            time: self.time.into(),
            u: self.u.iter().map(|c| (*c).into()).collect(),
            w: self.w.iter().map(|c| (*c).into()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicRow {
    /// `rank`, `lambda_d` or `lambda_b`.
    pub kind: String,
    pub value: f64,
    pub loglik: f64,
    pub df: usize,
    pub bic: f64,
    pub selected: bool,
}

impl From<&BicReport> for BicRow {
    fn from(r: &BicReport) -> Self {
        let (kind, value) = match r.candidate {
            Candidate::Rank(k) => ("rank", k as f64),
            Candidate::LambdaD(l) => ("lambda_d", l),
            Candidate::LambdaB(l) => ("lambda_b", l),
        };
        BicRow {
            kind: kind.into(),
            value,
            loglik: r.loglik,
            df: r.df,
            bic: r.bic,
            selected: r.selected,
        }
    }
}

/// Free-form echo of the settings a fit ran with.
pub type ConfigEcho = serde_json::Map<String, serde_json::Value>;

/// Everything a fit produces that later commands need, as one JSON document.
///
/// `b`, `sigma`, `p`, `d`, `q` and `delta` are on the scale the model was
/// fitted on; `b_original` and `g_original` are on the data's own scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub schema_version: u32,
    pub n: usize,
    pub r: usize,
    pub p_u: usize,
    pub p_w: usize,
    pub k: usize,
    pub converged: bool,
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    pub loglik: f64,
    pub lambda_d: f64,
    pub lambda_b: f64,
    pub standardization: StandardizationRecord,
    pub b: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    pub p: Vec<Vec<f64>>,
    pub d: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub delta: Vec<f64>,
    pub b_original: Vec<Vec<f64>>,
    pub g_original: Vec<Vec<f64>>,
    /// Per outcome, whether the random slope survived selection.
    pub random_slope_mask: Vec<bool>,
    /// Nonzero pattern of the slope block `B2`, one row per outcome.
    pub fixed_slope_mask: Vec<Vec<bool>>,
    pub rank_bic: Vec<BicRow>,
    pub lambda_bic: Vec<BicRow>,
    pub config: ConfigEcho,
    pub seconds: f64,
}

impl ParamsFile {
    pub fn from_fit(fit: &FitOutput, n: usize, config: ConfigEcho) -> Self {
        let theta = &fit.stage2.params;
        let scaled = theta.cov.as_scaled();
        let factor = to_factor(&scaled);
        ParamsFile {
            schema_version: SCHEMA_VERSION,
            n,
            r: theta.r(),
            p_u: theta.b.p_u,
            p_w: theta.b.p_w,
            k: fit.k,
            converged: fit.stage1.converged && fit.stage2.converged,
            stage1_iterations: fit.stage1.iterations,
            stage2_iterations: fit.stage2.iterations,
            loglik: fit.stage2.loglik,
            lambda_d: fit.stage2.lambda_d,
            lambda_b: fit.stage2.lambda_b,
            standardization: (&fit.scales).into(),
            b: rows(&theta.b.b),
            sigma: theta.sigma.iter().copied().collect(),
            p: rows(&scaled.p),
            d: scaled.d.iter().copied().collect(),
            q: rows(&factor.q),
            delta: factor.delta.iter().copied().collect(),
            b_original: rows(&fit.b_original),
            g_original: rows(&fit.g_original),
            random_slope_mask: fit.stage2.slope_mask.clone(),
            fixed_slope_mask: fit
                .stage2
                .b2_mask
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            rank_bic: fit.rank_reports.iter().map(BicRow::from).collect(),
            lambda_bic: fit.stage2.lambda_reports.iter().map(BicRow::from).collect(),
            config,
            seconds: fit.seconds,
        }
    }

    fn check_version(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported params schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        Ok(())
    }

    /// Fitted parameters on the fitting scale, in the scaled parameterization.
    pub fn theta(&self) -> Result<ModelParams> {
        let p_cols = 2 + 2 * self.p_u + self.p_w;
        let b = from_rows("fixed effects", &self.b, p_cols)?;
        let p = from_rows("correlation loadings", &self.p, self.k)?;
        let cov = ScaledCorrelation::new(p, DVector::from_vec(self.d.clone()))?;
        ModelParams::new(
            FixedEffects {
                b,
                p_u: self.p_u,
                p_w: self.p_w,
            },
            DVector::from_vec(self.sigma.clone()),
            Covariance::Scaled(cov),
        )
    }

    pub fn factor(&self) -> Result<FactorCovariance> {
        FactorCovariance::new(
            from_rows("factor loadings", &self.q, self.k)?,
            DVector::from_vec(self.delta.clone()),
        )
    }

    pub fn estimate(&self) -> Result<Estimate> {
        Ok(Estimate {
            b: from_rows("fixed effects", &self.b_original, width(&self.b_original))?,
            g: from_rows("random-effect covariance", &self.g_original, 2 * self.r)?,
            k: self.k,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p: ParamsFile = load_json(path)?;
        p.check_version()?;
        Ok(p)
    }
}

fn save_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn load_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Simulation ground truth, written next to generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub schema_version: u32,
    pub p_u: usize,
    pub p_w: usize,
    pub k_star: usize,
    pub b: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub types: Vec<u8>,
    pub fixed_slope_mask: Vec<Vec<bool>>,
    pub random_slope_mask: Vec<bool>,
    pub config: ConfigEcho,
}

impl TruthFile {
    pub fn new(truth: &GroundTruth, config: ConfigEcho) -> Self {
        TruthFile {
            schema_version: SCHEMA_VERSION,
            p_u: truth.b.p_u,
            p_w: truth.b.p_w,
            k_star: truth.k_star,
            b: rows(&truth.b.b),
            q: rows(&truth.q),
            delta: truth.delta.iter().copied().collect(),
            sigma: truth.sigma.iter().copied().collect(),
            types: truth.types.clone(),
            fixed_slope_mask: truth
                .fixed_slope_mask
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            random_slope_mask: truth.random_slope_mask.clone(),
            config,
        }
    }

    pub fn to_truth(&self) -> Result<GroundTruth> {
        let b = from_rows("true fixed effects", &self.b, 2 + 2 * self.p_u + self.p_w)?;
        let cov = FactorCovariance::new(
            from_rows("true loadings", &self.q, self.k_star)?,
            DVector::from_vec(self.delta.clone()),
        )?;
        let q2 = 1 + self.p_u;
        if let Some(bad) = self.fixed_slope_mask.iter().find(|r| r.len() != q2) {
            return Err(Error::Dimension {
                what: "true slope mask",
                expected: q2,
                actual: bad.len(),
            });
        }
        let mask = DMatrix::from_fn(self.fixed_slope_mask.len(), q2, |a, c| self.fixed_slope_mask[a][c]);
        Ok(GroundTruth {
            g: crate::model::assemble_g(&cov),
            b: FixedEffects {
                b,
                p_u: self.p_u,
                p_w: self.p_w,
            },
            q: cov.q,
            delta: cov.delta,
            sigma: DVector::from_vec(self.sigma.clone()),
            types: self.types.clone(),
            fixed_slope_mask: mask,
            random_slope_mask: self.random_slope_mask.clone(),
            k_star: self.k_star,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let t: TruthFile = load_json(path)?;
        if t.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported truth schema version {}",
                t.schema_version
            )));
        }
        Ok(t)
    }
}

/// One straight-line growth curve `intercept + slope * time` on the
/// original time scale.
///
/// `population` rows hold the curve at all covariates zero, `group` rows the
/// curve at one time-invariant covariate equal to one, and `individual` rows
/// a subject's curve at its own covariates. For every row
/// `intercept = fixed_intercept + random_intercept` and likewise for the
/// slope, with the random part nonzero only for individuals. Time-varying
/// covariates are held at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub kind: String,
    pub label: String,
    pub outcome: usize,
    pub intercept: f64,
    pub slope: f64,
    pub fixed_intercept: f64,
    pub fixed_slope: f64,
    pub random_intercept: f64,
    pub random_slope: f64,
}

impl CurveRow {
    fn fixed(kind: &str, label: String, outcome: usize, a: f64, b: f64) -> Self {
        CurveRow {
            kind: kind.into(),
            label,
            outcome,
            intercept: a,
            slope: b,
            fixed_intercept: a,
            fixed_slope: b,
            random_intercept: 0.0,
            random_slope: 0.0,
        }
    }
}

/// Population, group and (when `data` is given) individual curves of a fit.
///
/// `theta` and `scales` describe the fitting scale; `data` is on the
/// original scale and individual random effects are posterior means.
pub fn curve_table(
    theta: &ModelParams,
    scales: &Standardization,
    data: Option<&LongitudinalDataset>,
) -> Result<Vec<CurveRow>> {
    let r = theta.r();
    let pu = theta.b.p_u;
    let pw = theta.b.p_w;
    let g_col = 1 + pu + pw;
    let b = &theta.b.b * scales.design_map();
    let mut out = Vec::new();
    for j in 0..r {
        out.push(CurveRow::fixed("population", String::new(), j + 1, b[(j, 0)], b[(j, g_col)]));
    }
    for k in 0..pu {
        for j in 0..r {
            out.push(CurveRow::fixed(
                "group",
                format!("u_{}", k + 1),
                j + 1,
                b[(j, 0)] + b[(j, 1 + k)],
                b[(j, g_col)] + b[(j, g_col + 1 + k)],
            ));
        }
    }
    let Some(data) = data else {
        return Ok(out);
    };
    let fitted_scale = scales.apply(data)?;
    let d = theta.cov.as_scaled().d;
    let map = scales.random_effect_map();
    for (orig, s) in data.subjects.iter().zip(&fitted_scale.subjects) {
        let post = posterior_eta(theta, s)?;
        for j in 0..r {
            let mut a = b[(j, 0)];
            let mut sl = b[(j, g_col)];
            for k in 0..pu {
                a += orig.u[k] * b[(j, 1 + k)];
                sl += orig.u[k] * b[(j, g_col + 1 + k)];
            }
            let zeta = nalgebra::Vector2::new(d[2 * j] * post.m[2 * j], d[2 * j + 1] * post.m[2 * j + 1]);
            let re = map * zeta;
            out.push(CurveRow {
                kind: "individual".into(),
                label: orig.id.clone(),
                outcome: j + 1,
                intercept: a + re[0],
                slope: sl + re[1],
                fixed_intercept: a,
                fixed_slope: sl,
                random_intercept: re[0],
                random_slope: re[1],
            });
        }
    }
    Ok(out)
}

pub fn write_curves(rows: &[CurveRow], path: impl AsRef<Path>) -> Result<()> {
    write_rows(rows, path)
}

pub fn read_curves(path: impl AsRef<Path>) -> Result<Vec<CurveRow>> {
    read_rows(path)
}

fn write_rows<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(rows)
}

/// One line of `trace.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub stage: u8,
    pub iteration: usize,
    pub loglik: f64,
    pub objective: Option<f64>,
    pub change_cov_a: f64,
    pub change_cov_b: f64,
    pub change_b: f64,
    pub change_sigma: f64,
    pub lambda_d: Option<f64>,
    pub lambda_b: Option<f64>,
}

impl TraceRow {
    pub fn new(stage: u8, rec: &IterRecord) -> Self {
        TraceRow {
            stage,
            iteration: rec.iteration,
            loglik: rec.loglik,
            objective: rec.objective,
            change_cov_a: rec.changes[0],
            change_cov_b: rec.changes[1],
            change_b: rec.changes[2],
            change_sigma: rec.changes[3],
            lambda_d: rec.lambda_d,
            lambda_b: rec.lambda_b,
        }
    }
}

/// Stage-1 trace of the selected rank followed by the stage-2 trace.
pub fn trace_rows(fit: &FitOutput) -> Vec<TraceRow> {
    fit.stage1
        .trace
        .iter()
        .map(|r| TraceRow::new(1, r))
        .chain(fit.stage2.trace.iter().map(|r| TraceRow::new(2, r)))
        .collect()
}

pub fn write_trace(rows: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    write_rows(rows, path)
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    read_rows(path)
}

pub fn write_bic(rows: &[BicRow], path: impl AsRef<Path>) -> Result<()> {
    write_rows(rows, path)
}

pub fn read_bic(path: impl AsRef<Path>) -> Result<Vec<BicRow>> {
    read_rows(path)
}

/// `metrics.csv`: a header of metric names and one line per evaluation.
pub fn write_metrics(metrics: &[SimMetrics], path: impl AsRef<Path>) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(SimMetrics::NAMES)?;
    for m in metrics {
        wtr.write_record(m.values().iter().map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<SimMetrics>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.iter().ne(SimMetrics::NAMES) {
        return Err(parse_err(1, "unexpected metrics header"));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| parse_err(line, format!("`{s}` is not a number"))))
            .collect::<Result<_>>()?;
        if v.len() != SimMetrics::NAMES.len() {
            return Err(parse_err(line, "wrong number of metrics"));
        }
        out.push(SimMetrics {
            err_b: v[0],
            err_g: v[1],
            tpr_fixed: v[2],
            fpr_fixed: v[3],
            tpr_random: v[4],
            fpr_random: v[5],
            k_hat: v[6] as usize,
            k_correct: v[7] != 0.0,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<LongitudinalDataset> {
        read_long_csv(text.as_bytes())
    }

    #[test]
    fn tiny_file() {
        let data = parse(
            "subject,time,u_1,y_1,y_2\n\
             a,1,0,1.5,2\n\
             b,0,1,3,4\n\
             a,0,0,0.5,1\n\
             b,2,1,5,6\n",
        )
        .unwrap();
        assert_eq!(data.dims.n, 2);
        assert_eq!(data.dims.r, 2);
        assert_eq!(data.dims.p_u, 1);
        assert_eq!(data.dims.p_w, 0);
        let a = &data.subjects[0];
        assert_eq!(a.id, "a");
        assert_eq!(a.times, vec![0.0, 1.0]);
        assert_eq!(a.y[(0, 0)], 0.5);
        assert_eq!(a.y[(1, 1)], 2.0);
        assert_eq!(data.subjects[1].times, vec![0.0, 2.0]);
    }

    fn line_of(e: Error) -> (usize, String) {
        match e {
            Error::Parse { line, msg } => (line, msg),
            other => panic!("expected a parse error, got {other}"),
        }
    }

    #[test]
    fn missing_cell_names_row_and_column() {
        let e = parse("subject,time,y_1,y_2\na,0,1,2\na,1,,3\n").unwrap_err();
        let (line, msg) = line_of(e);
        assert_eq!(line, 3);
        assert!(msg.contains("y_1"), "{msg}");
    }

    #[test]
    fn rejects_bad_rows() {
        let (line, msg) = line_of(parse("subject,time,y_1\na,0,1\na,0,2\n").unwrap_err());
        assert_eq!(line, 3);
        assert!(msg.contains("duplicate"), "{msg}");
        let (line, _) = line_of(parse("subject,time,y_1\na,0,1,4\n").unwrap_err());
        assert_eq!(line, 2);
        let (_, msg) = line_of(parse("subject,time,y_1\na,0,x\n").unwrap_err());
        assert!(msg.contains("not a number"), "{msg}");
        let (_, msg) = line_of(parse("subject,time,u_1,y_1\na,0,0,1\na,1,1,1\n").unwrap_err());
        assert!(msg.contains("time-invariant"), "{msg}");
        assert!(matches!(parse("subject,time,y_2\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("subject,time,y_1,u_1\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn curve_parts_add_up() {
        use crate::sim::{generate_dataset, SimConfig};
        let (data, truth) = generate_dataset(&SimConfig {
            r: 4,
            n: 6,
            proportions: [0.25, 0.25, 0.25, 0.25],
            ..SimConfig::default()
        })
        .unwrap();
        let theta = ModelParams::new(
            truth.b.clone(),
            truth.sigma.clone(),
            Covariance::Factor(FactorCovariance::new(truth.q.clone(), truth.delta.clone()).unwrap()),
        )
        .unwrap();
        let theta = ModelParams {
            cov: Covariance::Scaled(theta.cov.as_scaled()),
            ..theta
        };
        let scales = Standardization::identity(&data.dims);
        let rows = curve_table(&theta, &scales, Some(&data)).unwrap();
        assert_eq!(rows.len(), 4 + 4 + 6 * 4);
        for row in &rows {
            assert_eq!(row.intercept, row.fixed_intercept + row.random_intercept);
            assert_eq!(row.slope, row.fixed_slope + row.random_slope);
        }
        assert!(rows.iter().any(|r| r.kind == "individual" && r.random_intercept != 0.0));
    }
}

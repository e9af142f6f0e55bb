//! Scoring held-out entries: error metrics, interval coverage, and the
//! method x regime x rate benchmark grid.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::baselines::{impute_average, impute_mean, impute_svd, SvdConfig};
use crate::data::{apply_mask, Mask, MaskSpec, NormScheme, NormalizationParams, Regime, TrafficTensor, UnitTag};
use crate::error::{Error, Result};
use crate::graph::SensorGraph;
use crate::model::{Architecture, GaussianField, ModelConfig};
use crate::tensor::Tensor2D;
use crate::train::{FittedModel, TrainingConfig};

fn scored_pairs<'a>(
    truth: &'a Tensor2D,
    imputed: &'a Tensor2D,
    scored: &'a Mask,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    truth.expect_same_shape("metric", imputed)?;
    scored.expect_shape(truth.shape())?;
    if scored.observed_count() == 0 {
        return Err(Error::invalid("evaluation mask selects no entries"));
    }
    Ok(truth
        .as_slice()
        .iter()
        .zip(imputed.as_slice())
        .zip(scored.as_slice())
        .filter(|(_, &s)| s)
        .map(|((&y, &yh), _)| (y, yh)))
}

/// Mean absolute error over entries where `scored` is true.
pub fn mae(truth: &Tensor2D, imputed: &Tensor2D, scored: &Mask) -> Result<f64> {
    let n = scored.observed_count() as f64;
    Ok(scored_pairs(truth, imputed, scored)?.map(|(y, yh)| (y - yh).abs()).sum::<f64>() / n)
}

/// Mean squared error over entries where `scored` is true.
pub fn mse(truth: &Tensor2D, imputed: &Tensor2D, scored: &Mask) -> Result<f64> {
    let n = scored.observed_count() as f64;
    Ok(scored_pairs(truth, imputed, scored)?.map(|(y, yh)| (y - yh).powi(2)).sum::<f64>() / n)
}

/// Flow cannot be negative: clamps means at zero for flow data, no-op otherwise.
pub fn clip_negative(field: &GaussianField, unit: UnitTag) -> GaussianField {
    match unit {
        UnitTag::Flow => GaussianField { mu: field.mu.map(|v| v.max(0.0)), sigma2: field.sigma2.clone() },
        UnitTag::Speed | UnitTag::Synthetic => field.clone(),
    }
}

/// Two-sided standard-normal quantile: `z` with `P(|Z| <= z) = level`.
pub fn two_sided_z(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let std = Normal::standard();
    Ok(std.inverse_cdf(0.5 + level / 2.0))
}

/// Fraction of scored entries with `|y - μ| <= z(level) · σ`.
pub fn interval_coverage(field: &GaussianField, truth: &Tensor2D, scored: &Mask, level: f64) -> Result<f64> {
    let z = two_sided_z(level)?;
    field.sigma2.expect_same_shape("interval_coverage", truth)?;
    let n = scored.observed_count() as f64;
    let hits = scored_pairs(truth, &field.mu, scored)?
        .zip(field.sigma2.as_slice().iter().zip(scored.as_slice()).filter(|(_, &s)| s).map(|(v, _)| *v))
        .map(|((y, mu), var)| {
            if !(var > 0.0) {
                return Err(Error::invalid(format!("non-positive variance {var}")));
            }
            Ok((y - mu).abs() <= z * var.sqrt())
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.into_iter().filter(|&h| h).count() as f64 / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Average,
    Mean,
    Svd,
    Bigru,
    Gcn,
    Stgin,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Average, Method::Mean, Method::Svd, Method::Bigru, Method::Gcn, Method::Stgin];

    /// The classical imputers need observed values on each sensor and are not
    /// run on whole-sensor outages.
    pub fn supports(self, regime: Regime) -> bool {
        match self {
            Method::Average | Method::Mean | Method::Svd => regime == Regime::Random,
            Method::Bigru | Method::Gcn | Method::Stgin => true,
        }
    }

    pub fn architecture(self) -> Option<Architecture> {
        match self {
            Method::Bigru => Some(Architecture::TemporalOnly),
            Method::Gcn => Some(Architecture::SpatialOnly),
            Method::Stgin => Some(Architecture::Full),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Average => "Average",
            Method::Mean => "Mean",
            Method::Svd => "SVD",
            Method::Bigru => "BiGRU",
            Method::Gcn => "GCN",
            Method::Stgin => "ST-GIN",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Average => "average",
            Method::Mean => "mean",
            Method::Svd => "svd",
            Method::Bigru => "bigru",
            Method::Gcn => "gcn",
            Method::Stgin => "stgin",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "average" => Ok(Method::Average),
            "mean" => Ok(Method::Mean),
            "svd" => Ok(Method::Svd),
            "bigru" | "temporal-only" => Ok(Method::Bigru),
            "gcn" | "spatial-only" => Ok(Method::Gcn),
            "stgin" | "st-gin" | "full" => Ok(Method::Stgin),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }
}

/// Units in which errors are reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportUnits {
    /// Scaled by the normalization fitted on the masked input.
    Normalized,
    Raw,
}

impl FromStr for ReportUnits {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(ReportUnits::Normalized),
            "raw" => Ok(ReportUnits::Raw),
            other => Err(Error::invalid(format!("unknown report units {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchmarkSpec {
    pub methods: Vec<Method>,
    pub regimes: Vec<Regime>,
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Confidence level for interval coverage of the network methods.
    pub level: f64,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub scheme: NormScheme,
    pub units: ReportUnits,
    pub svd: SvdConfig,
    pub steps_per_day: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            regimes: vec![Regime::Random],
            rates: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
            seeds: vec![0],
            level: 0.95,
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            scheme: NormScheme::MinMax,
            units: ReportUnits::Normalized,
            svd: SvdConfig::default(),
            steps_per_day: crate::data::STEPS_PER_DAY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub method: Method,
    pub regime: Regime,
    pub rate: f64,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
    pub count: usize,
    pub coverage: Option<f64>,
    pub runtime_secs: f64,
}

/// Everything one benchmark cell produced, for callers that need more than the scores.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub cell: EvalCell,
    /// Imputed means (and variances for network methods) in report units.
    pub field: GaussianField,
    pub truth: Tensor2D,
    pub scored: Mask,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
    pub skipped: Vec<String>,
}

/// Runs one method on one held-out mask.
pub fn evaluate_cell(
    truth: &TrafficTensor,
    graph: &SensorGraph,
    method: Method,
    mask_spec: MaskSpec,
    spec: &BenchmarkSpec,
) -> Result<CellOutcome> {
    if !method.supports(mask_spec.regime) {
        return Err(Error::invalid(format!("{method} does not handle the {} regime", mask_spec.regime)));
    }
    let started = Instant::now();
    let held = mask_spec.generate(truth.n(), truth.t())?;
    let masked = apply_mask(truth, &held)?;
    let scored = truth.mask.and_not(&held)?;

    let raw_field = match method.architecture() {
        None => {
            let mu = match method {
                Method::Average => impute_average(&masked.values, &masked.mask)?,
                Method::Mean => impute_mean(&masked.values, &masked.mask, spec.steps_per_day)?,
                Method::Svd => impute_svd(&masked.values, &masked.mask, &spec.svd)?.values,
                _ => unreachable!("network methods have an architecture"),
            };
            let sigma2 = Tensor2D::zeros(mu.rows(), mu.cols());
            GaussianField { mu, sigma2 }
        }
        Some(arch) => {
            let model_cfg = spec.model.with_architecture(arch);
            let (fitted, _) = FittedModel::fit(&masked, graph, &model_cfg, &spec.training, spec.scheme)?;
            fitted.impute(&masked, graph)?
        }
    };
    let raw_field = clip_negative(&raw_field, truth.unit);

    let (field, truth_values) = match spec.units {
        ReportUnits::Raw => (raw_field, truth.values.clone()),
        ReportUnits::Normalized => {
            let norm = NormalizationParams::fit(&masked, spec.scheme)?;
            let field = GaussianField {
                mu: raw_field.mu.map(|v| norm.normalize_value(v)),
                sigma2: raw_field.sigma2.map(|v| v / (norm.scale * norm.scale)),
            };
            (field, truth.values.map(|v| norm.normalize_value(v)))
        }
    };
    let coverage = match method.architecture() {
        Some(_) => Some(interval_coverage(&field, &truth_values, &scored, spec.level)?),
        None => None,
    };
    let cell = EvalCell {
        method,
        regime: mask_spec.regime,
        rate: mask_spec.rate,
        seed: mask_spec.seed,
        mse: mse(&truth_values, &field.mu, &scored)?,
        mae: mae(&truth_values, &field.mu, &scored)?,
        count: scored.observed_count(),
        coverage,
        runtime_secs: started.elapsed().as_secs_f64(),
    };
    Ok(CellOutcome { cell, field, truth: truth_values, scored })
}

/// Full cross product of methods, regimes, rates and seeds. Cells run in
/// parallel; the report is sorted by (regime, method, rate, seed).
pub fn run_benchmark(truth: &TrafficTensor, graph: &SensorGraph, spec: &BenchmarkSpec) -> Result<EvalReport> {
    let level_ok = two_sided_z(spec.level).map(|_| ());
    level_ok?;
    let mut jobs = Vec::new();
    let mut skipped = Vec::new();
    for &regime in &spec.regimes {
        for &method in &spec.methods {
            if !method.supports(regime) {
                skipped.push(format!("{method} skipped for the {regime} regime"));
                continue;
            }
            for &rate in &spec.rates {
                for &seed in &spec.seeds {
                    jobs.push((method, MaskSpec { regime, rate, seed }));
                }
            }
        }
    }
    let mut cells = jobs
        .par_iter()
        .map(|&(method, ms)| evaluate_cell(truth, graph, method, ms, spec).map(|o| o.cell))
        .collect::<Result<Vec<_>>>()?;
    cells.sort_by(|a, b| {
        (a.regime, a.method, a.seed).cmp(&(b.regime, b.method, b.seed)).then(a.rate.total_cmp(&b.rate))
    });
    Ok(EvalReport { cells, skipped })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,regime,rate,seed,mse,mae,count,coverage,runtime_secs\n");
        for c in &self.cells {
            let cov = c.coverage.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{},{},{},{},{},{}", c.method, c.regime, c.rate, c.seed, c.mse, c.mae, c.count, cov, c.runtime_secs)
                .expect("writing to a String");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let mut cells = Vec::new();
        for (k, rec) in reader.records().enumerate() {
            let line = k + 2;
            let rec = rec.map_err(|e| Error::Parse { path: "report".into(), line, message: e.to_string() })?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let num = |i: usize| -> Result<f64> {
                field(i).parse().map_err(|_| Error::Parse {
                    path: "report".into(),
                    line,
                    message: format!("bad number {:?}", field(i)),
                })
            };
            cells.push(EvalCell {
                method: field(0).parse()?,
                regime: field(1).parse()?,
                rate: num(2)?,
                seed: num(3)? as u64,
                mse: num(4)?,
                mae: num(5)?,
                count: num(6)? as usize,
                coverage: if field(7).is_empty() { None } else { Some(num(7)?) },
                runtime_secs: num(8)?,
            });
        }
        Ok(Self { cells, skipped: Vec::new() })
    }

    /// Seed-averaged (MSE, MAE) keyed by regime, method and rate.
    fn averaged(&self) -> BTreeMap<(Regime, Method), BTreeMap<RateKey, (f64, f64, usize)>> {
        let mut acc: BTreeMap<(Regime, Method), BTreeMap<RateKey, (f64, f64, usize)>> = BTreeMap::new();
        for c in &self.cells {
            let e = acc.entry((c.regime, c.method)).or_default().entry(RateKey(c.rate)).or_insert((0.0, 0.0, 0));
            e.0 += c.mse;
            e.1 += c.mae;
            e.2 += 1;
        }
        for per_rate in acc.values_mut() {
            for v in per_rate.values_mut() {
                *v = (v.0 / v.2 as f64, v.1 / v.2 as f64, v.2);
            }
        }
        acc
    }

    /// Plain-text tables: random regime as one row per method with
    /// `MSE / MAE` cells, non-random regime as MSE and MAE blocks.
    pub fn to_table(&self) -> String {
        let avg = self.averaged();
        let mut out = String::new();
        for regime in [Regime::Random, Regime::Nonrandom] {
            let rows: Vec<(Method, &BTreeMap<RateKey, (f64, f64, usize)>)> =
                Method::ALL.iter().filter_map(|&m| avg.get(&(regime, m)).map(|r| (m, r))).collect();
            if rows.is_empty() {
                continue;
            }
            let mut rates: Vec<RateKey> = rows.iter().flat_map(|(_, r)| r.keys().copied()).collect();
            rates.sort();
            rates.dedup();
            let fmt_cell = |r: Option<&(f64, f64, usize)>, pick: Option<bool>| match (r, pick) {
                (None, _) => "-".to_string(),
                (Some(v), None) => format!("{:.4} / {:.4}", v.0, v.1),
                (Some(v), Some(true)) => format!("{:.4}", v.0),
                (Some(v), Some(false)) => format!("{:.4}", v.1),
            };
            let mut grid: Vec<Vec<String>> = Vec::new();
            match regime {
                Regime::Random => {
                    writeln!(out, "MSE and MAE, random missing").ok();
                    let mut header = vec!["Model".to_string()];
                    header.extend(rates.iter().map(|r| format!("{} (MSE/MAE)", r.0)));
                    grid.push(header);
                    for (m, per_rate) in &rows {
                        let mut line = vec![m.label().to_string()];
                        line.extend(rates.iter().map(|r| fmt_cell(per_rate.get(r), None)));
                        grid.push(line);
                    }
                }
                Regime::Nonrandom => {
                    writeln!(out, "MSE and MAE, non-random missing").ok();
                    let mut header = vec!["Metrics".to_string(), "Model".to_string()];
                    header.extend(rates.iter().map(|r| r.0.to_string()));
                    grid.push(header);
                    for (metric, is_mse) in [("MSE", true), ("MAE", false)] {
                        for (k, (m, per_rate)) in rows.iter().enumerate() {
                            let mut line = vec![if k == 0 { metric.to_string() } else { String::new() }, m.label().to_string()];
                            line.extend(rates.iter().map(|r| fmt_cell(per_rate.get(r), Some(is_mse))));
                            grid.push(line);
                        }
                    }
                }
            }
            out.push_str(&align(&grid));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct RateKey(f64);

impl Eq for RateKey {}

impl PartialOrd for RateKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for RateKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn align(grid: &[Vec<String>]) -> String {
    let cols = grid.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..cols).map(|c| grid.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (k, row) in grid.iter().enumerate() {
        let line: Vec<String> = row.iter().enumerate().map(|(c, s)| format!("{s:<w$}", w = widths[c])).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if k == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1)));
            out.push('\n');
        }
    }
    out
}

/// Static SVG of one sensor's series: truth, imputed mean and the `μ ± zσ` band.
pub fn interval_svg(truth: &[f64], mu: &[f64], sigma2: &[f64], level: f64, title: &str) -> Result<String> {
    if truth.len() != mu.len() || mu.len() != sigma2.len() || truth.is_empty() {
        return Err(Error::shape("interval_svg", "series lengths differ or are empty"));
    }
    let z = two_sided_z(level)?;
    let (w, h, pad) = (900.0, 320.0, 40.0);
    let lower: Vec<f64> = mu.iter().zip(sigma2).map(|(m, v)| m - z * v.sqrt()).collect();
    let upper: Vec<f64> = mu.iter().zip(sigma2).map(|(m, v)| m + z * v.sqrt()).collect();
    let all = truth.iter().chain(&lower).chain(&upper);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = truth.len();
    let px = |k: usize| pad + (w - 2.0 * pad) * k as f64 / (n.max(2) - 1) as f64;
    let py = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / span;
    let path = |s: &[f64]| s.iter().enumerate().map(|(k, &v)| format!("{:.2},{:.2}", px(k), py(v))).collect::<Vec<_>>().join(" ");
    let band: Vec<String> = upper
        .iter()
        .enumerate()
        .map(|(k, &v)| format!("{:.2},{:.2}", px(k), py(v)))
        .chain(lower.iter().enumerate().rev().map(|(k, &v)| format!("{:.2},{:.2}", px(k), py(v))))
        .collect();
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).ok();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).ok();
    writeln!(svg, r#"<text x="{pad}" y="24" font-family="sans-serif" font-size="14">{}</text>"#, escape(title)).ok();
    writeln!(svg, r##"<polygon points="{}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>"##, band.join(" ")).ok();
    writeln!(svg, r##"<polyline points="{}" fill="none" stroke="#222222" stroke-width="1.2"/>"##, path(truth)).ok();
    writeln!(svg, r##"<polyline points="{}" fill="none" stroke="#d62728" stroke-width="1.2"/>"##, path(mu)).ok();
    writeln!(
        svg,
        r##"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{:.4} .. {:.4}; black: truth, red: mean, band: {}% interval</text>"##,
        pad,
        h - 10.0,
        lo,
        hi,
        level * 100.0
    )
    .ok();
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

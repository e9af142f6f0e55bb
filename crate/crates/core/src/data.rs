//! Traffic tensors, missingness masks, normalization and the synthetic ring dataset.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ring_distances, SensorGraph};
use crate::io::{parse_matrix_csv, write_file};
use crate::tensor::Tensor2D;

/// Five-minute sampling, as in loop-detector feeds.
pub const STEP_SECONDS: i64 = 300;
/// Steps per calendar day at five-minute spacing.
pub const STEPS_PER_DAY: usize = 288;
/// 2012-03-01 00:00:00 UTC, start of the synthetic clock.
pub const SYNTH_EPOCH: i64 = 1_330_560_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitTag {
    Speed,
    Flow,
    Synthetic,
}

impl fmt::Display for UnitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UnitTag::Speed => "speed",
            UnitTag::Flow => "flow",
            UnitTag::Synthetic => "synthetic",
        })
    }
}

impl FromStr for UnitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speed" => Ok(UnitTag::Speed),
            "flow" => Ok(UnitTag::Flow),
            "synthetic" => Ok(UnitTag::Synthetic),
            other => Err(Error::invalid(format!("unknown unit tag {other:?}"))),
        }
    }
}

/// Boolean N x T grid; `true` means observed.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    rows: usize,
    cols: usize,
    observed: Vec<bool>,
}

impl Mask {
    pub fn all_observed(rows: usize, cols: usize) -> Self {
        Self { rows, cols, observed: vec![true; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, observed: Vec<bool>) -> Result<Self> {
        if observed.len() != rows * cols {
            return Err(Error::shape("mask", format!("{rows}x{cols} needs {} flags", rows * cols)));
        }
        Ok(Self { rows, cols, observed })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, t: usize) -> bool {
        self.observed[i * self.cols + t]
    }

    #[inline]
    pub fn set(&mut self, i: usize, t: usize, observed: bool) {
        self.observed[i * self.cols + t] = observed;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.observed
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn missing_count(&self) -> usize {
        self.observed.len() - self.observed_count()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.expect_shape(other.shape())?;
        let observed = self.observed.iter().zip(&other.observed).map(|(a, b)| *a && *b).collect();
        Ok(Mask { rows: self.rows, cols: self.cols, observed })
    }

    /// Entries observed here but missing in `held_out`: the scored set.
    pub fn and_not(&self, held_out: &Mask) -> Result<Mask> {
        self.expect_shape(held_out.shape())?;
        let observed = self.observed.iter().zip(&held_out.observed).map(|(a, b)| *a && !*b).collect();
        Ok(Mask { rows: self.rows, cols: self.cols, observed })
    }

    pub fn to_weights(&self) -> Tensor2D {
        Tensor2D::from_vec(self.rows, self.cols, self.observed.iter().map(|&o| f64::from(u8::from(o))).collect())
            .expect("consistent shape")
    }

    /// Column range `[start, end)`.
    pub fn window(&self, start: usize, end: usize) -> Mask {
        let cols = end - start;
        let mut observed = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            observed.extend_from_slice(&self.observed[i * self.cols + start..i * self.cols + end]);
        }
        Mask { rows: self.rows, cols, observed }
    }

    pub fn expect_shape(&self, shape: (usize, usize)) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::shape(
                "mask",
                format!("mask is {}x{}, data is {}x{}", self.rows, self.cols, shape.0, shape.1),
            ));
        }
        Ok(())
    }

    /// 0/1 CSV, one row per sensor.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.observed.len() * 2);
        for i in 0..self.rows {
            for t in 0..self.cols {
                if t > 0 {
                    out.push(',');
                }
                out.push(if self.get(i, t) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv().as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = parse_matrix_csv(&text, &path.display().to_string())?;
        let mut observed = Vec::with_capacity(m.len());
        for (k, &v) in m.as_slice().iter().enumerate() {
            match v {
                v if v == 1.0 => observed.push(true),
                v if v == 0.0 => observed.push(false),
                _ => {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        line: k / m.cols().max(1) + 1,
                        message: format!("mask entries must be 0 or 1, found {v}"),
                    })
                }
            }
        }
        Mask::from_vec(m.rows(), m.cols(), observed)
    }
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mask {}x{} ({} missing)", self.rows, self.cols, self.missing_count())
    }
}

/// Sensor readings (N sensors x T steps) plus their observation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficTensor {
    /// Unobserved entries hold 0.
    pub values: Tensor2D,
    pub mask: Mask,
    pub unit: UnitTag,
    /// Unix seconds, strictly increasing, one per step.
    pub timestamps: Vec<i64>,
    pub sensor_ids: Vec<String>,
}

impl TrafficTensor {
    pub fn new(values: Tensor2D, mask: Mask, unit: UnitTag, timestamps: Vec<i64>) -> Result<Self> {
        let ids = (0..values.rows()).map(|i| format!("s{i}")).collect();
        Self::with_ids(values, mask, unit, timestamps, ids)
    }

    pub fn with_ids(
        mut values: Tensor2D,
        mask: Mask,
        unit: UnitTag,
        timestamps: Vec<i64>,
        sensor_ids: Vec<String>,
    ) -> Result<Self> {
        mask.expect_shape(values.shape())?;
        if timestamps.len() != values.cols() {
            return Err(Error::shape(
                "traffic_tensor",
                format!("{} timestamps for {} steps", timestamps.len(), values.cols()),
            ));
        }
        if sensor_ids.len() != values.rows() {
            return Err(Error::shape(
                "traffic_tensor",
                format!("{} sensor ids for {} sensors", sensor_ids.len(), values.rows()),
            ));
        }
        if let Some(w) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!("timestamps not strictly increasing at step {}", w + 1)));
        }
        for (k, v) in values.as_mut_slice().iter_mut().enumerate() {
            if !mask.as_slice()[k] {
                *v = 0.0;
            } else if !v.is_finite() {
                return Err(Error::invalid(format!("non-finite observed value at flat index {k}")));
            } else if unit == UnitTag::Flow && *v < 0.0 {
                return Err(Error::invalid(format!("negative flow value {v} at flat index {k}")));
            }
        }
        Ok(Self { values, mask, unit, timestamps, sensor_ids })
    }

    /// Fully observed tensor on the five-minute synthetic clock.
    pub fn fully_observed(values: Tensor2D, unit: UnitTag) -> Result<Self> {
        let (n, t) = values.shape();
        let ts = (0..t as i64).map(|k| SYNTH_EPOCH + k * STEP_SECONDS).collect();
        Self::new(values, Mask::all_observed(n, t), unit, ts)
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn t(&self) -> usize {
        self.values.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    /// Columns `[start, end)` as an independent tensor.
    pub fn window(&self, start: usize, end: usize) -> TrafficTensor {
        let values = Tensor2D::from_fn(self.n(), end - start, |i, j| self.values[(i, start + j)]);
        TrafficTensor {
            values,
            mask: self.mask.window(start, end),
            unit: self.unit,
            timestamps: self.timestamps[start..end].to_vec(),
            sensor_ids: self.sensor_ids.clone(),
        }
    }

    pub fn load_csv(path: &Path, unit: UnitTag) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, unit, &path.display().to_string())
    }

    /// Header `timestamp,<sensor ids...>`, then one row per step. Empty cells
    /// and `nan` mark pre-existing gaps.
    pub fn parse_csv(text: &str, unit: UnitTag, origin: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse { path: origin.to_string(), line, message };
        let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        if header.len() < 2 {
            return Err(parse_err(1, "expected a timestamp column and at least one sensor".into()));
        }
        let sensor_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let n = sensor_ids.len();
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut observed: Vec<Vec<bool>> = vec![Vec::new(); n];
        let mut timestamps = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                parse_err(line, e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let ts = parse_timestamp(&record[0]).ok_or_else(|| parse_err(line, format!("bad timestamp {:?}", &record[0])))?;
            if let Some(&prev) = timestamps.last() {
                if ts <= prev {
                    return Err(parse_err(line, "timestamps must be strictly increasing".into()));
                }
            }
            timestamps.push(ts);
            for (i, cell) in record.iter().skip(1).enumerate() {
                let (v, obs) = match cell {
                    "" => (0.0, false),
                    c if c.eq_ignore_ascii_case("nan") => (0.0, false),
                    c => {
                        let v: f64 = c.parse().map_err(|_| parse_err(line, format!("not a number: {c:?}")))?;
                        if !v.is_finite() {
                            return Err(parse_err(line, format!("non-finite value {c:?}")));
                        }
                        (v, true)
                    }
                };
                columns[i].push(v);
                observed[i].push(obs);
            }
        }
        let t = timestamps.len();
        let values = Tensor2D::from_vec(n, t, columns.concat())?;
        let mask = Mask::from_vec(n, t, observed.concat())?;
        Self::with_ids(values, mask, unit, timestamps, sensor_ids)
    }

    /// Inverse of [`TrafficTensor::parse_csv`]; unobserved cells are written empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("timestamp");
        for id in &self.sensor_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for t in 0..self.t() {
            out.push_str(&format_timestamp(self.timestamps[t]));
            for i in 0..self.n() {
                out.push(',');
                if self.mask.get(i, t) {
                    out.push_str(&self.values[(i, t)].to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv().as_bytes())
    }

    /// Reorders sensors so that new row `k` is old row `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        crate::graph::check_permutation(perm, self.n())?;
        let t = self.t();
        let values = Tensor2D::from_fn(self.n(), t, |i, j| self.values[(perm[i], j)]);
        let observed = perm.iter().flat_map(|&p| (0..t).map(move |j| (p, j))).map(|(p, j)| self.mask.get(p, j)).collect();
        Ok(TrafficTensor {
            values,
            mask: Mask::from_vec(self.n(), t, observed)?,
            unit: self.unit,
            timestamps: self.timestamps.clone(),
            sensor_ids: perm.iter().map(|&p| self.sensor_ids[p].clone()).collect(),
        })
    }
}

fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    DateTime::parse_from_rfc3339(s).ok().map(|dt| dt.timestamp())
}

fn format_timestamp(ts: i64) -> String {
    match DateTime::from_timestamp(ts, 0) {
        Some(dt) => dt.format("%Y-%m-%d %H:%M:%S").to_string(),
        None => ts.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Random,
    #[serde(alias = "non-random")]
    Nonrandom,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Random => "random",
            Regime::Nonrandom => "nonrandom",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Regime::Random),
            "nonrandom" | "non-random" => Ok(Regime::Nonrandom),
            other => Err(Error::invalid(format!("unknown missingness regime {other:?}"))),
        }
    }
}

/// How to draw the held-out (evaluation) entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub regime: Regime,
    pub rate: f64,
    pub seed: u64,
}

impl MaskSpec {
    /// Mask with `false` at the held-out entries.
    pub fn generate(&self, n: usize, t: usize) -> Result<Mask> {
        match self.regime {
            Regime::Random => random_missing_mask(n, t, self.rate, self.seed),
            Regime::Nonrandom => nonrandom_missing_mask(n, t, self.rate, self.seed),
        }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::invalid(format!("missing rate must lie in (0, 1), got {rate}")));
    }
    Ok(())
}

/// Exactly `round(rate * n * t)` entries missing, sampled without replacement.
pub fn random_missing_mask(n: usize, t: usize, rate: f64, seed: u64) -> Result<Mask> {
    check_rate(rate)?;
    let total = n * t;
    let k = (rate * total as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Mask::all_observed(n, t);
    for flat in index::sample(&mut rng, total, k) {
        mask.observed[flat] = false;
    }
    Ok(mask)
}

/// `round(rate * n)` whole sensors missing for the entire window.
pub fn nonrandom_missing_mask(n: usize, t: usize, sensor_rate: f64, seed: u64) -> Result<Mask> {
    check_rate(sensor_rate)?;
    let k = (sensor_rate * n as f64).round() as usize;
    if k == 0 {
        return Err(Error::invalid(format!("sensor rate {sensor_rate} blanks no sensor out of {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Mask::all_observed(n, t);
    for row in index::sample(&mut rng, n, k) {
        mask.observed[row * t..(row + 1) * t].fill(false);
    }
    Ok(mask)
}

/// Zeroes every entry that `mask` hides and intersects the observation masks.
/// The caller keeps `x` as ground truth.
pub fn apply_mask(x: &TrafficTensor, mask: &Mask) -> Result<TrafficTensor> {
    let combined = x.mask.and(mask)?;
    let mut values = x.values.clone();
    for (v, &obs) in values.as_mut_slice().iter_mut().zip(combined.as_slice()) {
        if !obs {
            *v = 0.0;
        }
    }
    Ok(TrafficTensor { values, mask: combined, ..x.clone() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormScheme {
    MinMax,
    ZScore,
}

impl FromStr for NormScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(NormScheme::MinMax),
            "zscore" => Ok(NormScheme::ZScore),
            other => Err(Error::invalid(format!("unknown normalization scheme {other:?}"))),
        }
    }
}

/// Affine map `normalized = (raw - offset) / scale`, fitted on observed entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub scheme: NormScheme,
    pub offset: f64,
    pub scale: f64,
}

impl NormalizationParams {
    pub fn fit(x: &TrafficTensor, scheme: NormScheme) -> Result<Self> {
        let obs: Vec<f64> = x
            .values
            .as_slice()
            .iter()
            .zip(x.mask.as_slice())
            .filter(|(_, &o)| o)
            .map(|(v, _)| *v)
            .collect();
        if obs.is_empty() {
            return Err(Error::NoObservedData);
        }
        let (offset, scale) = match scheme {
            NormScheme::MinMax => {
                let lo = obs.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = obs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi - lo)
            }
            NormScheme::ZScore => {
                let mean = obs.iter().sum::<f64>() / obs.len() as f64;
                let var = obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / obs.len() as f64;
                (mean, var.sqrt())
            }
        };
        if !(scale > 0.0) {
            return Err(Error::invalid("cannot normalize a constant tensor"));
        }
        Ok(Self { scheme, offset, scale })
    }

    #[inline]
    pub fn normalize_value(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }

    #[inline]
    pub fn denormalize_value(&self, v: f64) -> f64 {
        v * self.scale + self.offset
    }

    #[inline]
    pub fn denormalize_variance(&self, var: f64) -> f64 {
        var * self.scale * self.scale
    }

    /// Observed entries mapped; unobserved entries stay at 0.
    pub fn normalize(&self, x: &TrafficTensor) -> TrafficTensor {
        let mut out = x.clone();
        for (v, &obs) in out.values.as_mut_slice().iter_mut().zip(x.mask.as_slice()) {
            *v = if obs { self.normalize_value(*v) } else { 0.0 };
        }
        out
    }

    pub fn denormalize(&self, x: &TrafficTensor) -> TrafficTensor {
        let mut out = x.clone();
        for (v, &obs) in out.values.as_mut_slice().iter_mut().zip(x.mask.as_slice()) {
            *v = if obs { self.denormalize_value(*v) } else { 0.0 };
        }
        out
    }
}

pub fn normalize(x: &TrafficTensor, scheme: NormScheme) -> Result<(TrafficTensor, NormalizationParams)> {
    let params = NormalizationParams::fit(x, scheme)?;
    Ok((params.normalize(x), params))
}

/// Synthetic ring dataset with its noiseless signal kept alongside.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub tensor: TrafficTensor,
    pub clean: Tensor2D,
    pub distances: Tensor2D,
    pub graph: SensorGraph,
    pub noise_std: f64,
}

/// Noiseless daily + rush-hour harmonics, phase-shifted around the ring.
pub fn synth_signal(n: usize, t: usize) -> Tensor2D {
    Tensor2D::from_fn(n, t, |i, step| {
        let phase = 2.0 * PI * i as f64 / n as f64;
        let s = step as f64;
        50.0 + 15.0 * (2.0 * PI * s / 288.0 + phase).sin() + 5.0 * (2.0 * PI * s / 36.0 + 2.0 * phase).sin()
    })
}

pub fn synth_generate(n: usize, t: usize, seed: u64, noise_std: f64) -> Result<SynthDataset> {
    if n < 2 || t < 8 {
        return Err(Error::invalid(format!("synthetic data needs n >= 2 and t >= 8, got n={n}, t={t}")));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::invalid(format!("noise std must be finite and >= 0, got {noise_std}")));
    }
    let clean = synth_signal(n, t);
    let mut values = clean.clone();
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in values.as_mut_slice() {
            *v += normal.sample(&mut rng);
        }
    }
    let distances = ring_distances(n);
    let graph = SensorGraph::from_distances_default(&distances)?;
    let tensor = TrafficTensor::fully_observed(values, UnitTag::Synthetic)?;
    Ok(SynthDataset { tensor, clean, distances, graph, noise_std })
}

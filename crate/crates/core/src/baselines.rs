//! Classical imputers: cross-sectional average, per-sensor daily mean and
//! iterative low-rank SVD. All of them copy observed entries through untouched.

use nalgebra::DMatrix;

use crate::data::{Mask, STEPS_PER_DAY};
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

fn global_mean(values: &Tensor2D, mask: &Mask) -> Result<f64> {
    mask.expect_shape(values.shape())?;
    let (sum, count) = values
        .as_slice()
        .iter()
        .zip(mask.as_slice())
        .filter(|(_, &o)| o)
        .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1));
    if count == 0 {
        return Err(Error::NoObservedData);
    }
    Ok(sum / count as f64)
}

/// Fills `(i, t)` with the mean of the sensors observed at step `t`; steps
/// with no observed sensor fall back to the global observed mean.
pub fn impute_average(values: &Tensor2D, mask: &Mask) -> Result<Tensor2D> {
    let fallback = global_mean(values, mask)?;
    let (n, t) = values.shape();
    let mut out = values.clone();
    for j in 0..t {
        let (sum, count) = (0..n).filter(|&i| mask.get(i, j)).fold((0.0, 0usize), |(s, c), i| (s + values[(i, j)], c + 1));
        let fill = if count > 0 { sum / count as f64 } else { fallback };
        for i in 0..n {
            if !mask.get(i, j) {
                out[(i, j)] = fill;
            }
        }
    }
    Ok(out)
}

/// Fills `(i, t)` with sensor `i`'s observed mean over the day containing `t`
/// (days are consecutive blocks of `steps_per_day`); empty sensor-days fall
/// back to the global observed mean.
pub fn impute_mean(values: &Tensor2D, mask: &Mask, steps_per_day: usize) -> Result<Tensor2D> {
    if steps_per_day == 0 {
        return Err(Error::invalid("steps per day must be positive"));
    }
    let fallback = global_mean(values, mask)?;
    let (n, t) = values.shape();
    let mut out = values.clone();
    for day_start in (0..t).step_by(steps_per_day) {
        let day_end = (day_start + steps_per_day).min(t);
        for i in 0..n {
            let (sum, count) = (day_start..day_end)
                .filter(|&j| mask.get(i, j))
                .fold((0.0, 0usize), |(s, c), j| (s + values[(i, j)], c + 1));
            let fill = if count > 0 { sum / count as f64 } else { fallback };
            for j in day_start..day_end {
                if !mask.get(i, j) {
                    out[(i, j)] = fill;
                }
            }
        }
    }
    Ok(out)
}

/// [`impute_mean`] with five-minute days.
pub fn impute_mean_daily(values: &Tensor2D, mask: &Mask) -> Result<Tensor2D> {
    impute_mean(values, mask, STEPS_PER_DAY)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvdConfig {
    pub rank: Option<usize>,
    pub max_iterations: usize,
    pub tol: f64,
}

impl Default for SvdConfig {
    fn default() -> Self {
        Self { rank: None, max_iterations: 200, tol: 1e-6 }
    }
}

impl SvdConfig {
    /// `min(10, min(N, T) - 1)` unless set explicitly.
    pub fn rank_for(&self, n: usize, t: usize) -> usize {
        self.rank.unwrap_or_else(|| 10.min(n.min(t).saturating_sub(1)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvdImputation {
    pub values: Tensor2D,
    pub iterations: usize,
    /// Max-norm change of the missing entries in the final iteration.
    pub last_change: f64,
    pub converged: bool,
}

/// Hard-impute: start from column means, then repeatedly replace the missing
/// entries with the rank-`r` reconstruction until they move less than `tol`.
pub fn impute_svd(values: &Tensor2D, mask: &Mask, cfg: &SvdConfig) -> Result<SvdImputation> {
    let (n, t) = values.shape();
    let rank = cfg.rank_for(n, t);
    if rank < 1 || rank >= n.min(t) {
        return Err(Error::invalid(format!("svd rank must lie in [1, {}), got {rank}", n.min(t))));
    }
    let mut current = impute_column_means(values, mask)?;
    let missing: Vec<usize> = (0..n * t).filter(|&k| !mask.as_slice()[k]).collect();
    if missing.is_empty() {
        return Ok(SvdImputation { values: current, iterations: 0, last_change: 0.0, converged: true });
    }
    let mut last_change = f64::INFINITY;
    for iteration in 1..=cfg.max_iterations {
        let low_rank = truncated_reconstruction(&current, rank)
            .ok_or(Error::SvdNotConverged { iterations: iteration, last_change })?;
        last_change = 0.0;
        for &k in &missing {
            let v = low_rank.as_slice()[k];
            last_change = f64::max(last_change, (v - current.as_slice()[k]).abs());
            current.as_mut_slice()[k] = v;
        }
        if last_change < cfg.tol {
            return Ok(SvdImputation { values: current, iterations: iteration, last_change, converged: true });
        }
    }
    Ok(SvdImputation { values: current, iterations: cfg.max_iterations, last_change, converged: false })
}

fn impute_column_means(values: &Tensor2D, mask: &Mask) -> Result<Tensor2D> {
    let fallback = global_mean(values, mask)?;
    let (n, t) = values.shape();
    let mut out = values.clone();
    for j in 0..t {
        let obs: Vec<f64> = (0..n).filter(|&i| mask.get(i, j)).map(|i| values[(i, j)]).collect();
        let fill = if obs.is_empty() { fallback } else { obs.iter().sum::<f64>() / obs.len() as f64 };
        for i in 0..n {
            if !mask.get(i, j) {
                out[(i, j)] = fill;
            }
        }
    }
    Ok(out)
}

fn truncated_reconstruction(m: &Tensor2D, rank: usize) -> Option<Tensor2D> {
    let (n, t) = m.shape();
    let mat = DMatrix::from_row_slice(n, t, m.as_slice());
    let svd = mat.try_svd(true, true, f64::EPSILON, 10_000)?;
    let u = svd.u?;
    let v_t = svd.v_t?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut out = Tensor2D::zeros(n, t);
    for &k in order.iter().take(rank) {
        let s = svd.singular_values[k];
        for i in 0..n {
            let us = u[(i, k)] * s;
            for j in 0..t {
                out[(i, j)] += us * v_t[(k, j)];
            }
        }
    }
    Some(out)
}

//! Masked reconstruction (MSE) and Gaussian negative log-likelihood losses.
//!
//! Only observed entries enter either loss; targets at missing positions are
//! never read.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::model::GaussianField;
use crate::tensor::Tensor2D;

/// How the per-entry NLL terms are aggregated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NllReduction {
    /// Divide by the number of observed entries, matching the MSE term's scale.
    #[default]
    Mean,
    /// Plain sum over observed entries.
    Sum,
}

fn observed_count(mask: &Mask, shape: (usize, usize)) -> Result<usize> {
    mask.expect_shape(shape)?;
    match mask.observed_count() {
        0 => Err(Error::NoObservedData),
        k => Ok(k),
    }
}

/// `(1/k) Σ (x_i - μ_i)^2` over the `k` observed entries.
pub fn reconstruction_loss(field: &GaussianField, x: &Tensor2D, mask: &Mask) -> Result<f64> {
    field.mu.expect_same_shape("reconstruction_loss", x)?;
    let k = observed_count(mask, x.shape())?;
    let sum: f64 = x
        .as_slice()
        .iter()
        .zip(field.mu.as_slice())
        .zip(mask.as_slice())
        .filter(|(_, &o)| o)
        .map(|((xv, mv), _)| (xv - mv).powi(2))
        .sum();
    Ok(sum / k as f64)
}

/// Per-entry Gaussian NLL `½ ln(2π σ²) + (x - μ)² / (2σ²)`, summed or averaged.
pub fn nll_loss(field: &GaussianField, x: &Tensor2D, mask: &Mask, reduction: NllReduction) -> Result<f64> {
    field.mu.expect_same_shape("nll_loss", x)?;
    field.sigma2.expect_same_shape("nll_loss", x)?;
    let k = observed_count(mask, x.shape())?;
    let mut sum = 0.0;
    for (idx, &obs) in mask.as_slice().iter().enumerate() {
        if !obs {
            continue;
        }
        let var = field.sigma2.as_slice()[idx];
        if !(var > 0.0) {
            return Err(Error::invalid(format!("non-positive variance {var} at flat index {idx}")));
        }
        let r = x.as_slice()[idx] - field.mu.as_slice()[idx];
        sum += 0.5 * (2.0 * PI * var).ln() + r * r / (2.0 * var);
    }
    Ok(match reduction {
        NllReduction::Mean => sum / k as f64,
        NllReduction::Sum => sum,
    })
}

/// `λ · recon + (1 - λ) · regularization`.
pub fn combined_loss(recon: f64, regularization: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * recon + (1.0 - lambda) * regularization)
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// The three loss values of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub recon: f64,
    pub reg: f64,
    pub combined: f64,
}

/// Loss nodes recorded on a tape.
pub struct LossVars {
    pub recon: Var,
    pub reg: Var,
    pub combined: Var,
}

/// Records both losses and their λ-combination for `target` under `mask`.
pub fn losses_on_tape(
    tape: &Tape,
    mu: Var,
    sigma2: Var,
    target: &Tensor2D,
    mask: &Mask,
    lambda: f64,
    reduction: NllReduction,
) -> Result<LossVars> {
    check_lambda(lambda)?;
    let k = observed_count(mask, target.shape())? as f64;
    let weights = Arc::new(mask.to_weights());
    // missing targets are replaced by 0 so they cannot leak through 0 * NaN
    let clean = Tensor2D::from_fn(target.rows(), target.cols(), |i, j| {
        if mask.get(i, j) {
            target[(i, j)]
        } else {
            0.0
        }
    });
    let y = tape.constant(clean);
    let diff = tape.sub(mu, y)?;
    let sq = tape.mul(diff, diff)?;
    let recon = tape.scale(tape.masked_sum(sq, weights.clone())?, 1.0 / k)?;

    let log_var = tape.log(sigma2)?;
    let ratio = tape.div(sq, sigma2)?;
    let per_entry = tape.add_scalar(tape.scale(tape.add(log_var, ratio)?, 0.5)?, 0.5 * (2.0 * PI).ln())?;
    let nll_sum = tape.masked_sum(per_entry, weights)?;
    let reg = match reduction {
        NllReduction::Mean => tape.scale(nll_sum, 1.0 / k)?,
        NllReduction::Sum => nll_sum,
    };
    let combined = tape.add(tape.scale(recon, lambda)?, tape.scale(reg, 1.0 - lambda)?)?;
    Ok(LossVars { recon, reg, combined })
}

//! Compound soft-Dice + binary cross-entropy loss.
//!
//! All functions take probabilities and binary targets of identical shape.
//! A leading batch dimension is allowed: Dice is computed per sample over the
//! trailing two dimensions and averaged, BCE is averaged over every element.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::config::LossConfig;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the logarithm.
pub const BCE_CLAMP: f64 = 1e-7;

fn check(probs: &Tensor, target: &Tensor) -> Result<()> {
    if probs.dims() != target.dims() {
        return Err(Error::shape(format!(
            "probabilities {:?} and target {:?} differ in shape",
            probs.dims(),
            target.dims()
        )));
    }
    if probs.rank() < 2 {
        return Err(Error::shape(format!("expected [.., H, W], got {:?}", probs.dims())));
    }
    Ok(())
}

/// Per-sample sums over the last two dims, as `[N]`.
fn spatial_sum(x: &Tensor) -> candle_core::Result<Tensor> {
    x.flatten_from(x.rank() - 2)?.sum(D::Minus1)?.flatten_all()
}

/// `1 − (2·Σpt + ε) / (Σp + Σt + ε)`, averaged over leading dimensions.
pub fn dice_loss(probs: &Tensor, target: &Tensor, epsilon: f64) -> Result<Tensor> {
    check(probs, target)?;
    let inter = spatial_sum(&(probs * target)?)?;
    let denom = ((spatial_sum(probs)? + spatial_sum(target)?)? + epsilon)?;
    let numer = ((inter * 2.0)? + epsilon)?;
    // (denom − numer) / denom avoids the cancellation in 1 − numer / denom.
    Ok((&denom - numer)?.div(&denom)?.mean_all()?)
}

/// Mean of `−[t·ln p + (1−t)·ln(1−p)]` with clamped `p`.
pub fn bce_loss(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    check(probs, target)?;
    let p = probs.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let pos = (target * p.log()?)?;
    let neg = (target.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.neg()?.mean_all()?)
}

/// The weighted total together with its two terms, all scalar tensors.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub dice: Tensor,
    pub bce: Tensor,
}

/// Scalar values of [`LossTerms`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub dice: f64,
    pub bce: f64,
}

impl LossTerms {
    pub fn values(&self) -> Result<LossValues> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossValues {
            total: f(&self.total)?,
            dice: f(&self.dice)?,
            bce: f(&self.bce)?,
        })
    }
}

pub fn loss_terms(probs: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<LossTerms> {
    cfg.validate()?;
    let dice = dice_loss(probs, target, cfg.epsilon)?;
    let bce = bce_loss(probs, target)?;
    let total = ((&dice * cfg.lambda1)? + (&bce * cfg.lambda2)?)?;
    Ok(LossTerms { total, dice, bce })
}

/// `λ₁·dice + λ₂·bce`.
pub fn total_loss(probs: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    Ok(loss_terms(probs, target, cfg)?.total)
}

/// Logistic sigmoid as `(1 + tanh(x / 2)) / 2`, which stays finite in both
/// directions for any logit.
pub fn sigmoid(logits: &Tensor) -> Result<Tensor> {
    Ok((logits * 0.5)?.tanh()?.affine(0.5, 0.5)?)
}

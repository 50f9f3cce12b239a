//! Training objectives: mask BCE + DICE and the token-classification CE.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

fn default_bce_eps() -> f64 {
    1e-7
}

fn default_dice_smooth() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_text: f64,
    pub lambda_mask: f64,
    #[serde(default = "default_bce_eps")]
    pub bce_eps: f64,
    #[serde(default = "default_dice_smooth")]
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_text: 1.0,
            lambda_mask: 1.0,
            bce_eps: default_bce_eps(),
            dice_smooth: default_dice_smooth(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.lambda_text) || !ok(self.lambda_mask) || !ok(self.dice_smooth) {
            return Err(invalid("LossConfig", "lambdas and dice_smooth must be finite and >= 0"));
        }
        if !(self.bce_eps > 0.0 && self.bce_eps < 0.5) {
            return Err(invalid("LossConfig", "bce_eps must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

fn same_dims(op: &'static str, probs: &Var<'_>, gt: &Tensor) -> Result<()> {
    let pd = probs.dims();
    if pd != gt.dims() {
        return Err(shape_err(op, &pd, gt.dims()));
    }
    Ok(())
}

/// Mean per-pixel binary cross-entropy, with `probs` clamped to
/// `[eps, 1 − eps]`.
pub fn bce_loss<'t>(probs: &Var<'t>, gt: &Tensor, eps: f64) -> Result<Var<'t>> {
    same_dims("bce_loss", probs, gt)?;
    let tape = probs.tape();
    let p = probs.clamp(eps, 1.0 - eps);
    let g = tape.constant(gt.clone());
    let not_g = tape.constant(gt.map(|v| 1.0 - v));
    let pos = g.mul(&p.ln())?;
    let neg = not_g.mul(&p.affine(-1.0, 1.0).ln())?;
    Ok(pos.add(&neg)?.mean().scale(-1.0))
}

/// `1 − (2·Σpg + smooth) / (Σp + Σg + smooth)`.
pub fn dice_loss<'t>(probs: &Var<'t>, gt: &Tensor, smooth: f64) -> Result<Var<'t>> {
    same_dims("dice_loss", probs, gt)?;
    let g = probs.tape().constant(gt.clone());
    let inter = probs.mul(&g)?.sum();
    let g_sum: f64 = gt.data().iter().sum();
    let num = inter.affine(2.0, smooth);
    let den = probs.sum().affine(1.0, g_sum + smooth);
    Ok(num.div(&den)?.affine(-1.0, 1.0))
}

/// Mean negative log-likelihood of `targets` under row-wise softmax.
pub fn ce_loss<'t>(logits: &Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    Ok(logits.log_softmax_rows()?.pick(targets)?.mean().scale(-1.0))
}

/// BCE + DICE on one predicted probability map.
pub fn mask_loss<'t>(probs: &Var<'t>, gt: &Tensor, cfg: &LossConfig) -> Result<Var<'t>> {
    bce_loss(probs, gt, cfg.bce_eps)?.add(&dice_loss(probs, gt, cfg.dice_smooth)?)
}

pub fn total_loss<'t>(text_loss: &Var<'t>, mask_loss: &Var<'t>, cfg: &LossConfig) -> Result<Var<'t>> {
    text_loss.scale(cfg.lambda_text).add(&mask_loss.scale(cfg.lambda_mask))
}

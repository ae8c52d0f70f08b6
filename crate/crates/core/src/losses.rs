//! Training objective: deep-supervised soft Dice, latent regression and latent alignment.

use serde::{Deserialize, Serialize};
use wavegms_autodiff::{Float, Tensor};

use crate::error::{Error, Result};
use crate::types::{DeepSupervisionBundle, Latent, Mask, NUM_STAGES};

pub const DICE_EPS: f64 = 1e-5;
pub const ALIGN_COSINE_WEIGHT: f64 = 0.9;
pub const ALIGN_L1_WEIGHT: f64 = 0.1;
/// Added to the squared norm product, so a zero vector has cosine 0.
const COSINE_EPS_SQ: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub seg: f64,
    pub lm: f64,
    pub align: f64,
    pub total: f64,
    pub per_stage_seg: [f64; NUM_STAGES],
    pub per_stage_lm: [f64; NUM_STAGES],
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.seg, self.lm, self.align, self.total].iter().all(|v| v.is_finite())
    }
}

fn same_shape<F: Float>(what: &str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn scalar<F: Float>(t: &Tensor<F>) -> f64 {
    t.to_scalar().map(Float::as_f64).unwrap_or(f64::NAN)
}

/// `1 - (2 Σ p t + ε) / (Σ p + Σ t + ε)` per sample, averaged over the batch.
pub fn soft_dice<F: Float>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<Tensor<F>> {
    same_shape("soft dice", pred, target)?;
    let axes: Vec<usize> = (1..pred.ndim()).collect();
    let eps = F::cast(DICE_EPS);
    let inter = pred.mul(target)?.sum_keepdim(&axes)?;
    let denom = pred.sum_keepdim(&axes)?.add(&target.sum_keepdim(&axes)?)?.add_scalar(eps);
    let ratio = inter.affine(F::cast(2.0), eps).div(&denom)?;
    Ok(ratio.mean_all().affine(-F::one(), F::one()))
}

/// Mean of the per-stage soft Dice losses.
pub fn seg_loss<F: Float>(bundle: &DeepSupervisionBundle<F>, target: &Mask) -> Result<(Tensor<F>, [f64; NUM_STAGES])> {
    let t = target.to_tensor::<F>();
    let losses = bundle
        .stage_masks
        .iter()
        .map(|p| soft_dice(p, &t))
        .collect::<Result<Vec<_>>>()?;
    mean_of_stages(losses)
}

/// Mean over stages of the mean squared error between each stage latent and z_M.
pub fn lm_loss<F: Float>(bundle: &DeepSupervisionBundle<F>, z_m: &Latent<F>) -> Result<(Tensor<F>, [f64; NUM_STAGES])> {
    let losses = bundle
        .stage_latents
        .iter()
        .map(|s| {
            same_shape("latent regression", &s.tensor, &z_m.tensor)?;
            Ok(s.tensor.sub(&z_m.tensor)?.square().mean_all())
        })
        .collect::<Result<Vec<_>>>()?;
    mean_of_stages(losses)
}

fn mean_of_stages<F: Float>(losses: Vec<Tensor<F>>) -> Result<(Tensor<F>, [f64; NUM_STAGES])> {
    if losses.len() != NUM_STAGES {
        return Err(Error::Shape(format!("expected {NUM_STAGES} stages, got {}", losses.len())));
    }
    let mut per = [0.0; NUM_STAGES];
    for (p, l) in per.iter_mut().zip(&losses) {
        *p = scalar(l);
    }
    let mut sum = losses[0].clone();
    for l in &losses[1..] {
        sum = sum.add(l)?;
    }
    Ok((sum.mul_scalar(F::cast(1.0 / NUM_STAGES as f64)), per))
}

/// Cosine similarity of each sample's flattened latents, `[B, 1]`.
pub fn cosine_per_sample<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    same_shape("cosine", a, b)?;
    let n = a.shape()[0];
    let a = a.reshape(&[n, a.numel() / n.max(1)])?;
    let b = b.reshape(&[n, b.numel() / n.max(1)])?;
    let dot = a.mul(&b)?.sum_keepdim(&[1])?;
    let sa = a.square().sum_keepdim(&[1])?;
    let sb = b.square().sum_keepdim(&[1])?;
    let inv = sa.mul(&sb)?.add_scalar(F::cast(COSINE_EPS_SQ)).powf(F::cast(-0.5));
    Ok(dot.mul(&inv)?)
}

/// `0.9 (1 - cos) + 0.1 mean|z_MR - z_I|`, cosine per sample and averaged over the batch.
pub fn align_loss<F: Float>(z_mr: &Latent<F>, z_i: &Latent<F>) -> Result<Tensor<F>> {
    let cos = cosine_per_sample(&z_mr.tensor, &z_i.tensor)?;
    let cos_term = cos.mean_all().affine(-F::one(), F::one());
    let l1 = z_mr.tensor.sub(&z_i.tensor)?.abs().mean_all();
    Ok(cos_term
        .mul_scalar(F::cast(ALIGN_COSINE_WEIGHT))
        .add(&l1.mul_scalar(F::cast(ALIGN_L1_WEIGHT)))?)
}

/// `seg + lm + align`, with the alignment term left out entirely when disabled.
pub fn total_loss<F: Float>(
    bundle: &DeepSupervisionBundle<F>,
    target: &Mask,
    z_m: &Latent<F>,
    z_mr: &Latent<F>,
    z_i: &Latent<F>,
    align_enabled: bool,
) -> Result<(Tensor<F>, LossReport)> {
    let (seg, per_stage_seg) = seg_loss(bundle, target)?;
    let (lm, per_stage_lm) = lm_loss(bundle, z_m)?;
    let mut total = seg.add(&lm)?;
    let mut align_value = 0.0;
    if align_enabled {
        let align = align_loss(z_mr, z_i)?;
        align_value = scalar(&align);
        total = total.add(&align)?;
    }
    let report = LossReport {
        seg: scalar(&seg),
        lm: scalar(&lm),
        align: align_value,
        total: scalar(&total),
        per_stage_seg,
        per_stage_lm,
    };
    Ok((total, report))
}

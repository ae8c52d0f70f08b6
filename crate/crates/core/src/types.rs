//! Image, mask and latent containers shared by every stage of the pipeline.

use ndarray::{s, Array4, ArrayView4, Axis};
use serde::{Deserialize, Serialize};
use wavegms_autodiff::{Float, Tensor};

use crate::error::{Error, Result};

/// Spatial dimensions must be divisible by this so three halvings land on the latent grid.
pub const SPATIAL_MULTIPLE: usize = 8;
pub const LATENT_CHANNELS: usize = 4;
pub const MASK_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueRange {
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    Signed,
}

impl ValueRange {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Signed => (-1.0, 1.0),
        }
    }
}

pub(crate) fn check_spatial(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
        return Err(Error::Shape(format!(
            "spatial size {h}x{w} must be a nonzero multiple of {SPATIAL_MULTIPLE}"
        )));
    }
    Ok(())
}

/// An RGB batch `[B, 3, H, W]` tagged with its value range.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array4<f32>,
    range: ValueRange,
}

impl Image {
    pub fn new(data: Array4<f32>, range: ValueRange) -> Result<Self> {
        let (_, c, h, w) = data.dim();
        if c != 3 {
            return Err(Error::Shape(format!("image needs 3 channels, got {c}")));
        }
        check_spatial(h, w)?;
        let (lo, hi) = range.bounds();
        if let Some(v) = data.iter().find(|v| !(**v >= lo && **v <= hi)) {
            return Err(Error::Range(format!("value {v} outside {range:?} range [{lo}, {hi}]")));
        }
        Ok(Image { data, range })
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().2
    }

    pub fn width(&self) -> usize {
        self.data.dim().3
    }

    /// `x -> 2x - 1`. Fails unless the image is in the unit range.
    pub fn to_signed(&self) -> Result<Image> {
        if self.range != ValueRange::Unit {
            return Err(Error::Range("to_signed expects a unit-range image".into()));
        }
        Ok(Image {
            data: self.data.mapv(|v| 2.0 * v - 1.0),
            range: ValueRange::Signed,
        })
    }

    /// `x -> (x + 1) / 2`. Fails unless the image is in the signed range.
    pub fn to_unit(&self) -> Result<Image> {
        if self.range != ValueRange::Signed {
            return Err(Error::Range("to_unit expects a signed-range image".into()));
        }
        Ok(Image {
            data: self.data.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)),
            range: ValueRange::Unit,
        })
    }

    pub fn to_tensor<F: Float>(&self) -> Tensor<F> {
        Tensor::constant(self.data.mapv(|v| F::cast(v as f64)).into_dyn())
    }
}

pub fn to_signed_range(img: &Image) -> Result<Image> {
    img.to_signed()
}

/// A binary mask batch `[B, 1, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    data: Array4<f32>,
}

impl Mask {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        let (_, c, h, w) = data.dim();
        if c != 1 {
            return Err(Error::Shape(format!("mask needs 1 channel, got {c}")));
        }
        check_spatial(h, w)?;
        if let Some(v) = data.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::NonBinary(*v));
        }
        Ok(Mask { data })
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().2
    }

    pub fn width(&self) -> usize {
        self.data.dim().3
    }

    /// Sample `i` as a 2-d array.
    pub fn sample(&self, i: usize) -> ndarray::Array2<f32> {
        self.data.slice(s![i, 0, .., ..]).to_owned()
    }

    /// Three identical channels in the signed range, the form the VAE encoder consumes.
    pub fn broadcast_signed(&self) -> Image {
        let (b, _, h, w) = self.data.dim();
        let signed = self.data.mapv(|v| 2.0 * v - 1.0);
        let data = signed.broadcast((b, 3, h, w)).expect("channel axis has length 1").to_owned();
        Image {
            data,
            range: ValueRange::Signed,
        }
    }

    pub fn to_tensor<F: Float>(&self) -> Tensor<F> {
        Tensor::constant(self.data.mapv(|v| F::cast(v as f64)).into_dyn())
    }

    pub fn stack(masks: &[Mask]) -> Result<Mask> {
        let views: Vec<_> = masks.iter().map(|m| m.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        Mask::new(data)
    }
}

/// `1` where `pred > threshold`, else `0`.
///
/// Panics if `threshold` is not strictly between 0 and 1.
pub fn binarize(pred: ArrayView4<'_, f32>, threshold: f32) -> Result<Mask> {
    assert!(threshold > 0.0 && threshold < 1.0, "threshold {threshold} outside (0, 1)");
    Mask::new(pred.mapv(|v| if v > threshold { 1.0 } else { 0.0 }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentKind {
    /// z_I
    Image,
    /// z_M
    Mask,
    /// z_MR
    Multires,
    /// ẑ_M
    Predicted,
}

/// A `[B, 4, h, w]` latent.
#[derive(Debug, Clone)]
pub struct Latent<F: Float> {
    pub tensor: Tensor<F>,
    pub kind: LatentKind,
}

impl<F: Float> Latent<F> {
    pub fn new(tensor: Tensor<F>, kind: LatentKind) -> Result<Self> {
        let (_, c, _, _) = tensor.dims4()?;
        if c != LATENT_CHANNELS {
            return Err(Error::Shape(format!(
                "{kind:?} latent needs {LATENT_CHANNELS} channels, got shape {:?}",
                tensor.shape()
            )));
        }
        Ok(Latent { tensor, kind })
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    /// Checks the latent grid against an image of size `h x w`.
    pub fn expect_image_size(&self, h: usize, w: usize) -> Result<()> {
        let (_, _, lh, lw) = self.tensor.dims4()?;
        if lh * SPATIAL_MULTIPLE != h || lw * SPATIAL_MULTIPLE != w {
            return Err(Error::Shape(format!(
                "{:?} latent {lh}x{lw} does not match image {h}x{w}",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Per-stage latents and decoded mask probabilities from the mapping model's four decoder stages.
#[derive(Debug, Clone)]
pub struct DeepSupervisionBundle<F: Float> {
    pub stage_latents: Vec<Latent<F>>,
    /// `[B, 1, H, W]` in `[0, 1]`
    pub stage_masks: Vec<Tensor<F>>,
}

pub const NUM_STAGES: usize = 4;

impl<F: Float> DeepSupervisionBundle<F> {
    pub fn new(stage_latents: Vec<Latent<F>>, stage_masks: Vec<Tensor<F>>) -> Result<Self> {
        if stage_latents.len() != NUM_STAGES || stage_masks.len() != NUM_STAGES {
            return Err(Error::Shape(format!(
                "bundle needs {NUM_STAGES} stages, got {} latents and {} masks",
                stage_latents.len(),
                stage_masks.len()
            )));
        }
        for m in &stage_masks {
            let (_, c, _, _) = m.dims4()?;
            if c != 1 {
                return Err(Error::Shape(format!("stage mask must have 1 channel, got {:?}", m.shape())));
            }
        }
        Ok(DeepSupervisionBundle {
            stage_latents,
            stage_masks,
        })
    }

    /// ẑ_M
    pub fn prediction(&self) -> &Latent<F> {
        &self.stage_latents[NUM_STAGES - 1]
    }
}

//! The trainable wavelet encoder: per-level feature extractors, dyadic fusion and an aggregation network.

use serde::{Deserialize, Serialize};
use wavegms_autodiff::{Builder, Float, Tensor};

use crate::error::{Error, Result};
use crate::nn::{default_groups, same_spatial, Conv2d, GroupNorm, ResBlock};
use crate::types::{Image, Latent, LatentKind, ValueRange, LATENT_CHANNELS};
use crate::wavelet::{multires_decompose, NUM_LEVELS};

pub const SUBBAND_CHANNELS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub per_level_channels: usize,
    pub aggregation_channels: usize,
    pub blocks_per_module: usize,
    /// Convolution biases and norm shifts. Off makes every submodule map zero to zero.
    pub bias: bool,
    pub parameter_budget: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            per_level_channels: 32,
            aggregation_channels: 64,
            blocks_per_module: 2,
            bias: true,
            parameter_budget: 1_030_000,
        }
    }
}

/// U-Net layout with skip connections but no resampling: every tensor keeps the input's spatial size.
#[derive(Debug, Clone)]
pub struct FlatUNet<F: Float> {
    conv_in: Conv2d<F>,
    down: Vec<ResBlock<F>>,
    mid: ResBlock<F>,
    up: Vec<ResBlock<F>>,
    norm_out: GroupNorm<F>,
    conv_out: Conv2d<F>,
}

impl<F: Float> FlatUNet<F> {
    pub fn new(b: &Builder<F>, cin: usize, width: usize, cout: usize, blocks: usize, bias: bool) -> Result<Self> {
        let conv_in = Conv2d::same3(&b.pp("conv_in"), cin, width, bias)?;
        let down = (0..blocks)
            .map(|i| ResBlock::new(&b.pp(format!("down.{i}")), width, width, bias))
            .collect::<Result<Vec<_>>>()?;
        let mid = ResBlock::new(&b.pp("mid"), width, width, bias)?;
        // one decoder block per stored skip: conv_in output plus each down block
        let up = (0..=blocks)
            .map(|i| ResBlock::new(&b.pp(format!("up.{i}")), 2 * width, width, bias))
            .collect::<Result<Vec<_>>>()?;
        Ok(FlatUNet {
            conv_in,
            down,
            mid,
            up,
            norm_out: GroupNorm::new(&b.pp("norm_out"), width, default_groups(width), bias)?,
            conv_out: Conv2d::same3(&b.pp("conv_out"), width, cout, bias)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv_in.in_channels()
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut h = self.conv_in.forward(x)?;
        let mut skips = vec![h.clone()];
        for blk in &self.down {
            h = blk.forward(&h)?;
            skips.push(h.clone());
        }
        h = self.mid.forward(&h)?;
        for blk in &self.up {
            let skip = skips.pop().expect("one skip per decoder block");
            h = blk.forward(&Tensor::cat(&[h, skip], 1)?)?;
        }
        let y = self.conv_out.forward(&self.norm_out.forward(&h)?.silu())?;
        same_spatial("flat U-Net", x, &y)?;
        Ok(y)
    }
}

/// 2x2 average pooling `times` times.
fn pool<F: Float>(x: &Tensor<F>, times: usize) -> Result<Tensor<F>> {
    let mut y = x.clone();
    for _ in 0..times {
        y = y.avg_pool2x2()?;
    }
    Ok(y)
}

/// `[pool(pool(F1)) | pool(F2) | F3]` along channels.
pub fn fuse_levels<F: Float>(f1: &Tensor<F>, f2: &Tensor<F>, f3: &Tensor<F>) -> Result<Tensor<F>> {
    let (b1, c1, h1, w1) = f1.dims4()?;
    let (b2, c2, h2, w2) = f2.dims4()?;
    let (b3, c3, h3, w3) = f3.dims4()?;
    if b1 != b2 || b2 != b3 || c1 != c2 || c2 != c3 {
        return Err(Error::Shape(format!(
            "feature maps disagree on batch or channels: {:?} {:?} {:?}",
            f1.shape(),
            f2.shape(),
            f3.shape()
        )));
    }
    if (h1, w1) != (4 * h3, 4 * w3) || (h2, w2) != (2 * h3, 2 * w3) {
        return Err(Error::Shape(format!(
            "feature maps are not dyadic: {h1}x{w1}, {h2}x{w2}, {h3}x{w3}"
        )));
    }
    Ok(Tensor::cat(&[pool(f1, 2)?, pool(f2, 1)?, f3.clone()], 1)?)
}

#[derive(Debug, Clone)]
pub struct MultiResEncoder<F: Float> {
    phi: Vec<FlatUNet<F>>,
    aggregate: FlatUNet<F>,
    config: EncoderConfig,
}

impl<F: Float> MultiResEncoder<F> {
    pub fn new(b: &Builder<F>, config: EncoderConfig) -> Result<Self> {
        let c = config.per_level_channels;
        let a = config.aggregation_channels;
        if c == 0 || a == 0 {
            return Err(Error::InvalidArgument("encoder widths must be positive".into()));
        }
        let phi = (1..=NUM_LEVELS)
            .map(|l| FlatUNet::new(&b.pp(format!("phi{l}")), SUBBAND_CHANNELS, c, c, config.blocks_per_module, config.bias))
            .collect::<Result<Vec<_>>>()?;
        let aggregate = FlatUNet::new(
            &b.pp("aggregate"),
            NUM_LEVELS * c,
            a,
            LATENT_CHANNELS,
            config.blocks_per_module,
            config.bias,
        )?;
        Ok(MultiResEncoder { phi, aggregate, config })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// φ_l on one 12-channel subband stack; `level` is 1-based.
    pub fn extract_features(&self, stack: &Tensor<F>, level: usize) -> Result<Tensor<F>> {
        if !(1..=NUM_LEVELS).contains(&level) {
            return Err(Error::InvalidArgument(format!("level {level} outside 1..={NUM_LEVELS}")));
        }
        let (_, c, _, _) = stack.dims4()?;
        if c != SUBBAND_CHANNELS {
            return Err(Error::Shape(format!("level stack needs {SUBBAND_CHANNELS} channels, got {c}")));
        }
        self.phi[level - 1].forward(stack)
    }

    pub fn aggregate(&self, fused: &Tensor<F>) -> Result<Latent<F>> {
        let (_, c, _, _) = fused.dims4()?;
        if c != self.aggregate.in_channels() {
            return Err(Error::Shape(format!(
                "aggregation expects {} channels, got {c}",
                self.aggregate.in_channels()
            )));
        }
        Latent::new(self.aggregate.forward(fused)?, LatentKind::Multires)
    }

    /// The encoder applied to already decomposed stacks, finest first.
    pub fn forward_stacks(&self, stacks: &[Tensor<F>]) -> Result<Latent<F>> {
        if stacks.len() != NUM_LEVELS {
            return Err(Error::Shape(format!("expected {NUM_LEVELS} stacks, got {}", stacks.len())));
        }
        let feats = stacks
            .iter()
            .enumerate()
            .map(|(i, s)| self.extract_features(s, i + 1))
            .collect::<Result<Vec<_>>>()?;
        self.aggregate(&fuse_levels(&feats[0], &feats[1], &feats[2])?)
    }

    /// z_MR for a signed-range image.
    pub fn encode(&self, img: &Image) -> Result<Latent<F>> {
        if img.range() != ValueRange::Signed {
            return Err(Error::Range("the wavelet encoder expects a signed-range image".into()));
        }
        let dec = multires_decompose::<F>(img)?;
        let stacks: Vec<Tensor<F>> = dec.levels().iter().map(|s| Tensor::constant(s.clone().into_dyn())).collect();
        let z = self.forward_stacks(&stacks)?;
        z.expect_image_size(img.height(), img.width())?;
        Ok(z)
    }
}

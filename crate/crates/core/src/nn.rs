//! Building blocks shared by the encoder and the mapping model.

use wavegms_autodiff::{Builder, Conv2dOpts, Float, Init, Param, Tensor};

use crate::error::{Error, Result};

pub const GN_EPS: f64 = 1e-5;

/// Largest group count not above 8 that divides `channels`.
pub fn default_groups(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Errors unless `y` has the same spatial size as `x`.
pub(crate) fn same_spatial<F: Float>(what: &str, x: &Tensor<F>, y: &Tensor<F>) -> Result<()> {
    let (_, _, h, w) = x.dims4()?;
    let (_, _, h2, w2) = y.dims4()?;
    if (h, w) != (h2, w2) {
        return Err(Error::Shape(format!("{what} changed spatial size {h}x{w} -> {h2}x{w2}")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Conv2d<F: Float> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    opts: Conv2dOpts,
}

impl<F: Float> Conv2d<F> {
    pub fn new(b: &Builder<F>, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Result<Self> {
        let fan_in = cin * k * k;
        let weight = b.param("weight", &[cout, cin, k, k], Init::FanIn(fan_in))?;
        let bias = if bias {
            Some(b.param("bias", &[cout], Init::FanIn(fan_in))?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            opts: Conv2dOpts { stride, padding: k / 2 },
        })
    }

    /// 3x3, stride 1, same padding.
    pub fn same3(b: &Builder<F>, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        Self::new(b, cin, cout, 3, 1, bias)
    }

    pub fn pointwise(b: &Builder<F>, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        Self::new(b, cin, cout, 1, 1, bias)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let bias = self.bias.as_ref().map(Param::tensor);
        Ok(x.conv2d(&self.weight.tensor(), bias.as_ref(), self.opts)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm<F: Float> {
    pub gamma: Param<F>,
    pub beta: Option<Param<F>>,
    groups: usize,
    channels: usize,
}

impl<F: Float> GroupNorm<F> {
    pub fn new(b: &Builder<F>, channels: usize, groups: usize, shift: bool) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::InvalidArgument(format!("{groups} groups do not divide {channels} channels")));
        }
        let gamma = b.param("weight", &[channels], Init::Ones)?;
        let beta = if shift {
            Some(b.param("bias", &[channels], Init::Zeros)?)
        } else {
            None
        };
        Ok(GroupNorm {
            gamma,
            beta,
            groups,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!("group norm over {} channels got {c}", self.channels)));
        }
        let g = self.groups;
        let xg = x.reshape(&[n, g, (c / g) * h * w])?;
        let mean = xg.mean_keepdim(&[2])?;
        let xc = xg.sub(&mean)?;
        let var = xc.square().mean_keepdim(&[2])?;
        let xn = xc.mul(&var.add_scalar(F::cast(GN_EPS)).powf(F::cast(-0.5)))?;
        let y = xn.reshape(&[n, c, h, w])?.mul(&self.gamma.tensor().reshape(&[1, c, 1, 1])?)?;
        match &self.beta {
            Some(beta) => Ok(y.add(&beta.tensor().reshape(&[1, c, 1, 1])?)?),
            None => Ok(y),
        }
    }
}

/// `GN -> SiLU -> conv3 -> GN -> SiLU -> conv3`, plus a 1x1 projection on the skip when widths differ.
#[derive(Debug, Clone)]
pub struct ResBlock<F: Float> {
    norm1: GroupNorm<F>,
    conv1: Conv2d<F>,
    norm2: GroupNorm<F>,
    conv2: Conv2d<F>,
    skip: Option<Conv2d<F>>,
}

impl<F: Float> ResBlock<F> {
    pub fn new(b: &Builder<F>, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        Ok(ResBlock {
            norm1: GroupNorm::new(&b.pp("norm1"), cin, default_groups(cin), bias)?,
            conv1: Conv2d::same3(&b.pp("conv1"), cin, cout, bias)?,
            norm2: GroupNorm::new(&b.pp("norm2"), cout, default_groups(cout), bias)?,
            conv2: Conv2d::same3(&b.pp("conv2"), cout, cout, bias)?,
            skip: if cin != cout {
                Some(Conv2d::pointwise(&b.pp("skip"), cin, cout, bias)?)
            } else {
                None
            },
        })
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu())?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu())?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        let y = h.add(&skip)?;
        same_spatial("residual block", x, &y)?;
        Ok(y)
    }
}

/// Single-head self-attention over all spatial positions, with a residual connection.
#[derive(Debug, Clone)]
pub struct SelfAttention<F: Float> {
    norm: GroupNorm<F>,
    q: Conv2d<F>,
    k: Conv2d<F>,
    v: Conv2d<F>,
    proj: Conv2d<F>,
}

impl<F: Float> SelfAttention<F> {
    pub fn new(b: &Builder<F>, channels: usize) -> Result<Self> {
        Ok(SelfAttention {
            norm: GroupNorm::new(&b.pp("norm"), channels, default_groups(channels), true)?,
            q: Conv2d::pointwise(&b.pp("q"), channels, channels, true)?,
            k: Conv2d::pointwise(&b.pp("k"), channels, channels, true)?,
            v: Conv2d::pointwise(&b.pp("v"), channels, channels, true)?,
            proj: Conv2d::pointwise(&b.pp("proj"), channels, channels, true)?,
        })
    }

    fn scores(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let (n, c, h, w) = x.dims4()?;
        let hn = self.norm.forward(x)?;
        let q = self.q.forward(&hn)?.reshape(&[n, c, h * w])?.permute(&[0, 2, 1])?;
        let k = self.k.forward(&hn)?.reshape(&[n, c, h * w])?;
        let attn = q.bmm(&k)?.mul_scalar(F::cast(1.0 / (c as f64).sqrt())).softmax_last()?;
        Ok((attn, hn))
    }

    /// Row-stochastic attention `[B, N, N]` with `N = h*w`; row `i` weights the keys seen by query `i`.
    pub fn attention(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.scores(x)?.0)
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (n, c, h, w) = x.dims4()?;
        let (attn, hn) = self.scores(x)?;
        let v = self.v.forward(&hn)?.reshape(&[n, c, h * w])?;
        let out = v.bmm(&attn.permute(&[0, 2, 1])?)?.reshape(&[n, c, h, w])?;
        Ok(x.add(&self.proj.forward(&out)?)?)
    }
}

/// Residual unit followed by spatial self-attention.
#[derive(Debug, Clone)]
pub struct ResAttnBlock<F: Float> {
    pub res: ResBlock<F>,
    pub attn: SelfAttention<F>,
}

impl<F: Float> ResAttnBlock<F> {
    pub fn new(b: &Builder<F>, cin: usize, cout: usize) -> Result<Self> {
        Ok(ResAttnBlock {
            res: ResBlock::new(&b.pp("res"), cin, cout, true)?,
            attn: SelfAttention::new(&b.pp("attn"), cout)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.res.out_channels()
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let y = self.attn.forward(&self.res.forward(x)?)?;
        same_spatial("attention block", x, &y)?;
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;
    use wavegms_autodiff::ParamStore;

    fn builder() -> Builder<f64> {
        Builder::new(Arc::new(ParamStore::new()), 7, true)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::constant(ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn group_norm_matches_direct_statistics() {
        let b = builder();
        let gn = GroupNorm::new(&b, 4, 2, true).unwrap();
        let x = random(&[2, 4, 3, 3], 1);
        let y = gn.forward(&x).unwrap();
        let xv = x.value();
        for n in 0..2 {
            for g in 0..2 {
                let vals: Vec<f64> = (2 * g..2 * g + 2)
                    .flat_map(|c| (0..3).flat_map(move |i| (0..3).map(move |j| (c, i, j))))
                    .map(|(c, i, j)| xv[[n, c, i, j]])
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                for c in 2 * g..2 * g + 2 {
                    let want = (xv[[n, c, 1, 2]] - mean) / (var + GN_EPS).sqrt();
                    assert!((y.value()[[n, c, 1, 2]] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let b = builder();
        let attn = SelfAttention::new(&b, 8).unwrap();
        let a = attn.attention(&random(&[2, 8, 3, 4], 2)).unwrap();
        assert_eq!(a.shape(), &[2, 12, 12]);
        for row in a.value().lanes(ndarray::Axis(2)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn blocks_keep_resolution() {
        let b = builder();
        let blk = ResAttnBlock::new(&b, 8, 16).unwrap();
        let y = blk.forward(&random(&[1, 8, 5, 3], 3)).unwrap();
        assert_eq!(y.shape(), &[1, 16, 5, 3]);
    }

    #[test]
    fn groups_divide_channels() {
        assert_eq!(default_groups(32), 8);
        assert_eq!(default_groups(12), 6);
        assert_eq!(default_groups(7), 7);
        assert_eq!(default_groups(11), 1);
    }
}

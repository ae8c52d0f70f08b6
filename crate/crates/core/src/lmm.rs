//! The latent mapping model: z_MR to ẑ_M at constant resolution, with a head on every decoder stage.

use serde::{Deserialize, Serialize};
use wavegms_autodiff::{Builder, Float, Tensor};

use crate::error::{Error, Result};
use crate::nn::{same_spatial, Conv2d, ResAttnBlock};
use crate::types::{Latent, LatentKind, LATENT_CHANNELS, NUM_STAGES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmmConfig {
    pub stem_channels: usize,
    /// Encoder widths; the decoder runs them in reverse.
    pub stage_channels: [usize; NUM_STAGES],
    pub parameter_budget: usize,
}

impl Default for LmmConfig {
    fn default() -> Self {
        LmmConfig {
            stem_channels: 32,
            stage_channels: [32, 64, 96, 128],
            parameter_budget: 1_560_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Lmm<F: Float> {
    stem: Conv2d<F>,
    encoder: Vec<ResAttnBlock<F>>,
    decoder: Vec<ResAttnBlock<F>>,
    heads: Vec<Conv2d<F>>,
    config: LmmConfig,
}

/// What to collect along the way.
#[derive(Default)]
struct Probe<F: Float> {
    /// Replace the skip tensor from this encoder stage (0-based) with zeros.
    zero_skip: Option<usize>,
    attention: Option<Vec<Tensor<F>>>,
}

impl<F: Float> Lmm<F> {
    pub fn new(b: &Builder<F>, config: LmmConfig) -> Result<Self> {
        let ch = config.stage_channels;
        if config.stem_channels == 0 || ch.contains(&0) {
            return Err(Error::InvalidArgument("mapping model widths must be positive".into()));
        }
        let stem = Conv2d::same3(&b.pp("stem"), LATENT_CHANNELS, config.stem_channels, true)?;
        let mut encoder = Vec::with_capacity(NUM_STAGES);
        let mut cin = config.stem_channels;
        for (i, &c) in ch.iter().enumerate() {
            encoder.push(ResAttnBlock::new(&b.pp(format!("enc.{i}")), cin, c)?);
            cin = c;
        }
        // Decoder stage 0 takes the deepest encoder output as its input; stages 1..3 concatenate the
        // previous decoder output with encoder stage 3-k.
        let mut decoder = Vec::with_capacity(NUM_STAGES);
        let mut heads = Vec::with_capacity(NUM_STAGES);
        for k in 0..NUM_STAGES {
            let width = ch[NUM_STAGES - 1 - k];
            let input = if k == 0 { cin } else { ch[NUM_STAGES - k] + width };
            decoder.push(ResAttnBlock::new(&b.pp(format!("dec.{k}")), input, width)?);
            heads.push(Conv2d::pointwise(&b.pp(format!("head.{k}")), width, LATENT_CHANNELS, true)?);
        }
        Ok(Lmm {
            stem,
            encoder,
            decoder,
            heads,
            config,
        })
    }

    pub fn config(&self) -> &LmmConfig {
        &self.config
    }

    fn check_input(z: &Latent<F>) -> Result<()> {
        let (_, c, _, _) = z.tensor.dims4()?;
        if c != LATENT_CHANNELS {
            return Err(Error::Shape(format!("mapping model input must have 4 channels, got {c}")));
        }
        Ok(())
    }

    /// Decoder features of every stage.
    fn features(&self, z: &Tensor<F>, probe: &mut Probe<F>) -> Result<Vec<Tensor<F>>> {
        let mut h = self.stem.forward(z)?;
        same_spatial("stem", z, &h)?;
        let mut skips = Vec::with_capacity(NUM_STAGES);
        for blk in &self.encoder {
            if let Some(maps) = probe.attention.as_mut() {
                maps.push(blk.attn.attention(&blk.res.forward(&h)?)?);
            }
            h = blk.forward(&h)?;
            skips.push(h.clone());
        }
        if let Some(i) = probe.zero_skip {
            skips[i] = Tensor::zeros(skips[i].shape());
        }
        let mut feats = Vec::with_capacity(NUM_STAGES);
        for (k, blk) in self.decoder.iter().enumerate() {
            let input = if k == 0 {
                skips[NUM_STAGES - 1].clone()
            } else {
                Tensor::cat(&[h.clone(), skips[NUM_STAGES - 1 - k].clone()], 1)?
            };
            if let Some(maps) = probe.attention.as_mut() {
                maps.push(blk.attn.attention(&blk.res.forward(&input)?)?);
            }
            h = blk.forward(&input)?;
            feats.push(h.clone());
        }
        Ok(feats)
    }

    fn heads(&self, feats: &[Tensor<F>]) -> Result<Vec<Latent<F>>> {
        feats
            .iter()
            .zip(&self.heads)
            .enumerate()
            .map(|(k, (f, head))| {
                let kind = if k == NUM_STAGES - 1 { LatentKind::Predicted } else { LatentKind::Mask };
                Latent::new(head.forward(f)?, kind)
            })
            .collect()
    }

    /// One latent per decoder stage; the last is ẑ_M.
    pub fn forward_stages(&self, z_mr: &Latent<F>) -> Result<Vec<Latent<F>>> {
        Self::check_input(z_mr)?;
        let feats = self.features(&z_mr.tensor, &mut Probe::default())?;
        self.heads(&feats)
    }

    /// ẑ_M only, computed exactly as the last stage of [`Lmm::forward_stages`].
    pub fn forward_inference(&self, z_mr: &Latent<F>) -> Result<Latent<F>> {
        Self::check_input(z_mr)?;
        let feats = self.features(&z_mr.tensor, &mut Probe::default())?;
        let last = feats.last().expect("four stages");
        Latent::new(self.heads[NUM_STAGES - 1].forward(last)?, LatentKind::Predicted)
    }

    /// Attention matrices of all eight blocks, encoder first.
    pub fn attention_maps(&self, z_mr: &Latent<F>) -> Result<Vec<Tensor<F>>> {
        Self::check_input(z_mr)?;
        let mut probe = Probe {
            zero_skip: None,
            attention: Some(Vec::new()),
        };
        self.features(&z_mr.tensor, &mut probe)?;
        Ok(probe.attention.unwrap_or_default())
    }

    /// Decoder features with the skip from encoder stage `stage` (0-based) replaced by zeros.
    pub fn decoder_features_without_skip(&self, z_mr: &Latent<F>, stage: usize) -> Result<Vec<Tensor<F>>> {
        Self::check_input(z_mr)?;
        if stage >= NUM_STAGES {
            return Err(Error::InvalidArgument(format!("stage {stage} out of range")));
        }
        self.features(
            &z_mr.tensor,
            &mut Probe {
                zero_skip: Some(stage),
                attention: None,
            },
        )
    }

    pub fn decoder_features(&self, z_mr: &Latent<F>) -> Result<Vec<Tensor<F>>> {
        Self::check_input(z_mr)?;
        self.features(&z_mr.tensor, &mut Probe::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, Axis, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;
    use wavegms_autodiff::ParamStore;

    fn lmm() -> (Arc<ParamStore<f32>>, Lmm<f32>) {
        let store = Arc::new(ParamStore::new());
        let m = Lmm::new(&Builder::new(Arc::clone(&store), 2333, true).pp("lmm"), LmmConfig::default()).unwrap();
        (store, m)
    }

    fn latent(shape: &[usize], seed: u64) -> Latent<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::constant(ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0)));
        Latent::new(t, LatentKind::Multires).unwrap()
    }

    #[test]
    fn parameter_count_within_budget() {
        let (store, m) = lmm();
        let n = store.num_trainable_elements();
        assert_eq!(n, 1_519_376);
        let budget = m.config().parameter_budget as f64;
        assert!((n as f64 - budget).abs() <= 0.15 * budget);
    }

    #[test]
    fn stages_keep_shape_and_inference_matches_last() {
        let (_, m) = lmm();
        let z = latent(&[2, 4, 2, 2], 1);
        let stages = m.forward_stages(&z).unwrap();
        assert_eq!(stages.len(), 4);
        for s in &stages {
            assert_eq!(s.shape(), &[2, 4, 2, 2]);
        }
        let inf = m.forward_inference(&z).unwrap();
        assert_eq!(inf.tensor.value(), stages[3].tensor.value());
        assert_eq!(inf.kind, LatentKind::Predicted);
        let again = m.forward_inference(&z).unwrap();
        assert_eq!(inf.tensor.value(), again.tensor.value());
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let (_, m) = lmm();
        let maps = m.attention_maps(&latent(&[1, 4, 3, 3], 2)).unwrap();
        assert_eq!(maps.len(), 8);
        for a in maps {
            for row in a.value().lanes(Axis(2)) {
                assert!((row.sum() - 1.0).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn zeroed_skip_changes_paired_stage() {
        let (_, m) = lmm();
        let z = latent(&[1, 4, 3, 3], 3);
        let base = m.decoder_features(&z).unwrap();
        for stage in 0..4 {
            let paired = 3 - stage;
            let probe = m.decoder_features_without_skip(&z, stage).unwrap();
            let diff: f32 = (probe[paired].value() - base[paired].value()).mapv(f32::abs).sum();
            assert!(diff > 1e-4, "stage {stage}: paired decoder output unchanged");
        }
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let (_, m) = lmm();
        let bad = Latent {
            tensor: Tensor::zeros(&[1, 3, 2, 2]),
            kind: LatentKind::Multires,
        };
        assert!(m.forward_stages(&bad).is_err());
    }
}

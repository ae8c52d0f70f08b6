//! Wires the wavelet encoder, the frozen VAE and the LMM into one model.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::{ArrayD, Array4, Ix4};
use serde::{Deserialize, Serialize};
use wavegms_autodiff::{no_grad, safetensors, Builder, Float, ParamStore, Tensor};

use crate::encoder::{EncoderConfig, MultiResEncoder};
use crate::error::{Error, Result};
use crate::lmm::{Lmm, LmmConfig};
use crate::types::{binarize, DeepSupervisionBundle, Image, Latent, LatentKind, Mask, ValueRange, MASK_THRESHOLD};
use crate::vae::{decoded_to_mask_probability, FrozenVae};

pub const ENCODER_PREFIX: &str = "encoder.";
pub const LMM_PREFIX: &str = "lmm.";

/// What the LMM sees as its input latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    /// The trainable wavelet encoder (z_MR).
    #[default]
    Wavelet,
    /// The frozen VAE encoder's image latent (z_I), no wavelet encoder at all.
    TinyVae,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub lmm: LmmConfig,
    pub latent_source: LatentSource,
}

/// Everything the loss needs from one training forward pass.
pub struct TrainForward<F: Float> {
    pub bundle: DeepSupervisionBundle<F>,
    /// The LMM input: z_MR for the wavelet source, z_I otherwise.
    pub z_mr: Latent<F>,
    /// Present when alignment is requested or the VAE is the latent source.
    pub z_i: Option<Latent<F>>,
    pub z_m: Latent<F>,
}

/// Inference output: per-pixel foreground probability `[B, 1, H, W]` and its binarization.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub probability: Array4<f32>,
    pub mask: Mask,
}

pub struct WaveGms<F: Float> {
    store: Arc<ParamStore<F>>,
    encoder: Option<MultiResEncoder<F>>,
    lmm: Lmm<F>,
    vae: Arc<FrozenVae<F>>,
    config: ModelConfig,
}

fn to_signed(img: &Image) -> Result<Image> {
    match img.range() {
        ValueRange::Signed => Ok(img.clone()),
        ValueRange::Unit => img.to_signed(),
    }
}

fn to_f32(a: &ArrayD<impl Float>) -> Result<Array4<f32>> {
    a.mapv(|v| v.as_f64() as f32)
        .into_dimensionality::<Ix4>()
        .map_err(|e| Error::Shape(e.to_string()))
}

impl<F: Float> WaveGms<F> {
    /// Fresh trainable weights drawn from `seed`.
    pub fn new(config: ModelConfig, vae: Arc<FrozenVae<F>>, seed: u64) -> Result<Self> {
        let store = Arc::new(ParamStore::new());
        let b = Builder::new(Arc::clone(&store), seed, true);
        let encoder = match config.latent_source {
            LatentSource::Wavelet => Some(MultiResEncoder::new(&b.pp("encoder"), config.encoder.clone())?),
            LatentSource::TinyVae => None,
        };
        let lmm = Lmm::new(&b.pp("lmm"), config.lmm.clone())?;
        Ok(WaveGms {
            store,
            encoder,
            lmm,
            vae,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Trainable parameters: `encoder.*` and `lmm.*`.
    pub fn store(&self) -> &Arc<ParamStore<F>> {
        &self.store
    }

    pub fn vae(&self) -> &Arc<FrozenVae<F>> {
        &self.vae
    }

    pub fn encoder(&self) -> Option<&MultiResEncoder<F>> {
        self.encoder.as_ref()
    }

    pub fn lmm(&self) -> &Lmm<F> {
        &self.lmm
    }

    fn count(&self, prefix: &str) -> usize {
        self.store
            .params()
            .iter()
            .filter(|p| p.name().starts_with(prefix))
            .map(|p| p.numel())
            .sum()
    }

    pub fn encoder_parameters(&self) -> usize {
        self.count(ENCODER_PREFIX)
    }

    pub fn lmm_parameters(&self) -> usize {
        self.count(LMM_PREFIX)
    }

    pub fn trainable_parameters(&self) -> usize {
        self.store.num_trainable_elements()
    }

    pub fn frozen_parameters(&self) -> usize {
        self.vae.encoder_parameters() + self.vae.decoder_parameters()
    }

    /// The LMM input latent for a signed image.
    fn source_latent(&self, signed: &Image) -> Result<Latent<F>> {
        match &self.encoder {
            Some(enc) => enc.encode(signed),
            None => {
                let z = self.vae.encode_image(signed)?;
                Latent::new(z.tensor, LatentKind::Multires)
            }
        }
    }

    /// Stage decodes as foreground probabilities `[B, 1, H, W]`.
    fn decode_probability(&self, z: &Latent<F>) -> Result<Tensor<F>> {
        decoded_to_mask_probability(&self.vae.decode(&z.tensor)?)
    }

    /// Full training dataflow. `with_z_i` requests the VAE image latent for the alignment term.
    pub fn forward_train(&self, img: &Image, mask: &Mask, with_z_i: bool) -> Result<TrainForward<F>> {
        if img.batch() != mask.batch() || img.height() != mask.height() || img.width() != mask.width() {
            return Err(Error::Shape(format!(
                "image batch {}x{}x{} does not match mask batch {}x{}x{}",
                img.batch(),
                img.height(),
                img.width(),
                mask.batch(),
                mask.height(),
                mask.width()
            )));
        }
        let signed = to_signed(img)?;
        let z_mr = self.source_latent(&signed)?;
        let z_i = match (with_z_i, self.config.latent_source) {
            (_, LatentSource::TinyVae) => Some(Latent::new(z_mr.tensor.clone(), LatentKind::Image)?),
            (true, LatentSource::Wavelet) => Some(self.vae.encode_image(&signed)?),
            (false, LatentSource::Wavelet) => None,
        };
        let z_m = self.vae.encode_mask(mask)?;
        let stages = self.lmm.forward_stages(&z_mr)?;
        let masks = stages
            .iter()
            .map(|z| self.decode_probability(z))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainForward {
            bundle: DeepSupervisionBundle::new(stages, masks)?,
            z_mr,
            z_i,
            z_m,
        })
    }

    /// Latent source, last LMM stage, decoder, channel-mean probability, threshold. Records no graph.
    pub fn forward_infer(&self, img: &Image) -> Result<Prediction> {
        no_grad(|| {
            let signed = to_signed(img)?;
            let z = self.source_latent(&signed)?;
            let z_hat = self.lmm.forward_inference(&z)?;
            let prob = to_f32(self.decode_probability(&z_hat)?.value())?;
            let mask = binarize(prob.view(), MASK_THRESHOLD)?;
            Ok(Prediction { probability: prob, mask })
        })
    }

    /// Replaces the LMM weights with an external set named either `lmm.*` or unprefixed. When any
    /// name is prefixed (a full model checkpoint), tensors outside `lmm.` are ignored.
    pub fn load_lmm_weights(&self, tensors: &BTreeMap<String, ArrayD<F>>) -> Result<()> {
        let prefixed = tensors.keys().any(|k| k.starts_with(LMM_PREFIX));
        let mut lmm_only = BTreeMap::new();
        for (k, v) in tensors {
            if prefixed && !k.starts_with(LMM_PREFIX) {
                continue;
            }
            let key = if prefixed { k.clone() } else { format!("{LMM_PREFIX}{k}") };
            lmm_only.insert(key, v.clone());
        }
        let mut problems = Vec::new();
        let mut updates = Vec::new();
        for p in self.store.params().into_iter().filter(|p| p.name().starts_with(LMM_PREFIX)) {
            match lmm_only.remove(p.name()) {
                Some(v) if v.shape() == p.shape().as_slice() => updates.push((p, v)),
                Some(v) => problems.push(format!("{}: expected {:?}, found {:?}", p.name(), p.shape(), v.shape())),
                None => problems.push(format!("{}: missing", p.name())),
            }
        }
        problems.extend(lmm_only.keys().map(|k| format!("{k}: unexpected")));
        if !problems.is_empty() {
            return Err(Error::ArchitectureMismatch(problems));
        }
        for (p, v) in updates {
            p.set(v)?;
        }
        Ok(())
    }

    pub fn load_lmm_file(&self, path: &Path) -> Result<()> {
        if !path.is_file() {
            return Err(Error::Checkpoint(format!("LMM weight file {} not found", path.display())));
        }
        let st = safetensors::load::<F>(path)?;
        self.load_lmm_weights(&st.tensors)
    }
}

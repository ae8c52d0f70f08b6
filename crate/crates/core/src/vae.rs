//! The frozen compact autoencoder that defines the latent space.
//!
//! Architecture and tensor names follow the diffusers `AutoencoderTiny` layout
//! (`encoder.layers.{i}.*`, `decoder.layers.{i}.*`). The original two-file release
//! (`taesd_encoder.safetensors`, `taesd_decoder.safetensors`) stores the same tensors as `{i}.*`,
//! with decoder indices shifted by one because its first decoder layer is a parameter-free clamp;
//! [`convert_split_release`] does the renaming.
//!
//! The raw networks work in `[0, 1]`. This adapter takes signed `[-1, 1]` inputs, maps them to the
//! unit range before encoding, and returns decoded images in the signed range clamped to `[-1, 1]`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::ArrayD;
use sha2::{Digest, Sha256};
use wavegms_autodiff::{safetensors, Builder, Float, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::types::{check_spatial, Image, Latent, LatentKind, Mask, ValueRange, LATENT_CHANNELS};

pub const WIDTH: usize = 64;
pub const DOWNSAMPLE: usize = 8;
pub const ENCODER_FILE: &str = "taesd_encoder.safetensors";
pub const DECODER_FILE: &str = "taesd_decoder.safetensors";
/// Tolerance on the signed-range precondition of [`FrozenVae::encode`].
const RANGE_SLACK: f64 = 1e-6;

/// `conv3 -> ReLU -> conv3 -> ReLU -> conv3`, added to the (identity or 1x1) skip, then ReLU.
#[derive(Debug, Clone)]
struct TinyBlock<F: Float> {
    convs: [Conv2d<F>; 3],
    skip: Option<Conv2d<F>>,
}

impl<F: Float> TinyBlock<F> {
    fn new(b: &Builder<F>, cin: usize, cout: usize) -> Result<Self> {
        let convs = [
            Conv2d::same3(&b.pp("conv.0"), cin, cout, true)?,
            Conv2d::same3(&b.pp("conv.2"), cout, cout, true)?,
            Conv2d::same3(&b.pp("conv.4"), cout, cout, true)?,
        ];
        let skip = if cin != cout {
            Some(Conv2d::pointwise(&b.pp("skip"), cin, cout, false)?)
        } else {
            None
        };
        Ok(TinyBlock { convs, skip })
    }

    fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let h = self.convs[0].forward(x)?.relu();
        let h = self.convs[1].forward(&h)?.relu();
        let h = self.convs[2].forward(&h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok(h.add(&skip)?.relu())
    }
}

#[derive(Debug, Clone)]
enum Layer<F: Float> {
    Conv(Conv2d<F>),
    Block(TinyBlock<F>),
    Relu,
    Upsample,
}

impl<F: Float> Layer<F> {
    fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::Block(b) => b.forward(x),
            Layer::Relu => Ok(x.relu()),
            Layer::Upsample => Ok(x.upsample_nearest2x()?),
        }
    }
}

fn build_encoder<F: Float>(b: &Builder<F>) -> Result<Vec<Layer<F>>> {
    let mut layers = Vec::new();
    let at = |i: usize| b.pp(i.to_string());
    layers.push(Layer::Conv(Conv2d::same3(&at(0), 3, WIDTH, true)?));
    layers.push(Layer::Block(TinyBlock::new(&at(1), WIDTH, WIDTH)?));
    for stage in 0..3 {
        let base = 2 + 4 * stage;
        layers.push(Layer::Conv(Conv2d::new(&at(base), WIDTH, WIDTH, 3, 2, false)?));
        for k in 1..=3 {
            layers.push(Layer::Block(TinyBlock::new(&at(base + k), WIDTH, WIDTH)?));
        }
    }
    layers.push(Layer::Conv(Conv2d::same3(&at(14), WIDTH, LATENT_CHANNELS, true)?));
    Ok(layers)
}

fn build_decoder<F: Float>(b: &Builder<F>) -> Result<Vec<Layer<F>>> {
    let mut layers = Vec::new();
    let at = |i: usize| b.pp(i.to_string());
    layers.push(Layer::Conv(Conv2d::same3(&at(0), LATENT_CHANNELS, WIDTH, true)?));
    layers.push(Layer::Relu);
    let mut i = 2;
    for blocks in [3, 3, 3] {
        for _ in 0..blocks {
            layers.push(Layer::Block(TinyBlock::new(&at(i), WIDTH, WIDTH)?));
            i += 1;
        }
        layers.push(Layer::Upsample);
        i += 1;
        layers.push(Layer::Conv(Conv2d::same3(&at(i), WIDTH, WIDTH, false)?));
        i += 1;
    }
    layers.push(Layer::Block(TinyBlock::new(&at(i), WIDTH, WIDTH)?));
    layers.push(Layer::Conv(Conv2d::same3(&at(i + 1), WIDTH, 3, true)?));
    Ok(layers)
}

/// How to obtain the frozen VAE; stored in configs and checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSettings {
    /// A diffusers-style file or a directory with the two-file release.
    pub weights: Option<PathBuf>,
    /// Fall back to a seeded random VAE when `weights` is unset or missing.
    pub allow_stand_in: bool,
    pub stand_in_seed: u64,
}

impl Default for VaeSettings {
    fn default() -> Self {
        VaeSettings {
            weights: None,
            allow_stand_in: true,
            stand_in_seed: 0,
        }
    }
}

impl VaeSettings {
    pub fn load<F: Float>(&self) -> Result<FrozenVae<F>> {
        FrozenVae::load_or_stand_in(self.weights.as_deref(), self.allow_stand_in, self.stand_in_seed)
    }
}

/// Where the weights came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VaeOrigin {
    Pretrained(PathBuf),
    /// Seeded random initialization with the same architecture.
    RandomStandIn(u64),
}

/// The frozen encoder/decoder pair. Its parameters never require gradients.
pub struct FrozenVae<F: Float> {
    store: Arc<ParamStore<F>>,
    encoder: Vec<Layer<F>>,
    decoder: Vec<Layer<F>>,
    origin: VaeOrigin,
    fingerprint: String,
    encode_calls: AtomicUsize,
    decode_calls: AtomicUsize,
}

impl<F: Float> std::fmt::Debug for FrozenVae<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrozenVae")
            .field("origin", &self.origin)
            .field("fingerprint", &self.fingerprint)
            .finish()
    }
}

impl<F: Float> FrozenVae<F> {
    fn build(seed: u64) -> Result<(Arc<ParamStore<F>>, Vec<Layer<F>>, Vec<Layer<F>>)> {
        let store = Arc::new(ParamStore::new());
        let b = Builder::new(Arc::clone(&store), seed, false);
        let encoder = build_encoder(&b.pp("encoder.layers"))?;
        let decoder = build_decoder(&b.pp("decoder.layers"))?;
        Ok((store, encoder, decoder))
    }

    fn finish(store: Arc<ParamStore<F>>, encoder: Vec<Layer<F>>, decoder: Vec<Layer<F>>, origin: VaeOrigin) -> Self {
        let fingerprint = fingerprint(&store);
        FrozenVae {
            store,
            encoder,
            decoder,
            origin,
            fingerprint,
            encode_calls: AtomicUsize::new(0),
            decode_calls: AtomicUsize::new(0),
        }
    }

    /// Same architecture, weights drawn from a seeded stream. For tests and pipelines without weights.
    pub fn random_stand_in(seed: u64) -> Result<Self> {
        let (store, encoder, decoder) = Self::build(seed)?;
        Ok(Self::finish(store, encoder, decoder, VaeOrigin::RandomStandIn(seed)))
    }

    /// Loads pretrained weights from a single diffusers-style file or a directory holding the
    /// two-file release.
    pub fn load_pretrained(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::WeightsMissing(path.to_path_buf()));
        }
        let named = if path.is_dir() {
            let enc_path = path.join(ENCODER_FILE);
            let dec_path = path.join(DECODER_FILE);
            for p in [&enc_path, &dec_path] {
                if !p.exists() {
                    return Err(Error::WeightsMissing(p.clone()));
                }
            }
            let enc = safetensors::load::<F>(&enc_path)?.tensors;
            let dec = safetensors::load::<F>(&dec_path)?.tensors;
            convert_split_release(enc, dec)?
        } else {
            safetensors::load::<F>(path)?.tensors
        };
        let (store, encoder, decoder) = Self::build(0)?;
        store.load_named(&named).map_err(Error::ArchitectureMismatch)?;
        log::info!(
            "loaded VAE from {}: encoder {} params, decoder {} params",
            path.display(),
            count_prefix(&store, "encoder."),
            count_prefix(&store, "decoder.")
        );
        Ok(Self::finish(store, encoder, decoder, VaeOrigin::Pretrained(path.to_path_buf())))
    }

    /// Pretrained weights when `path` exists; otherwise the stand-in if allowed, else an error.
    pub fn load_or_stand_in(path: Option<&Path>, allow_stand_in: bool, seed: u64) -> Result<Self> {
        match path {
            Some(p) if p.exists() => Self::load_pretrained(p),
            Some(p) if !allow_stand_in => Err(Error::WeightsMissing(p.to_path_buf())),
            None if !allow_stand_in => Err(Error::InvalidArgument(
                "no VAE weights configured and the random stand-in is not allowed".into(),
            )),
            _ => {
                log::warn!("using a randomly initialized VAE stand-in (seed {seed}); metrics are not meaningful");
                Self::random_stand_in(seed)
            }
        }
    }

    pub fn origin(&self) -> &VaeOrigin {
        &self.origin
    }

    pub fn is_pretrained(&self) -> bool {
        matches!(self.origin, VaeOrigin::Pretrained(_))
    }

    pub fn store(&self) -> &Arc<ParamStore<F>> {
        &self.store
    }

    /// Hex SHA-256 of the weights as loaded.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Hash of the current weights, for checking they were never modified.
    pub fn current_fingerprint(&self) -> String {
        fingerprint(&self.store)
    }

    pub fn encoder_parameters(&self) -> usize {
        count_prefix(&self.store, "encoder.")
    }

    pub fn decoder_parameters(&self) -> usize {
        count_prefix(&self.store, "decoder.")
    }

    pub fn encode_calls(&self) -> usize {
        self.encode_calls.load(Ordering::Relaxed)
    }

    pub fn decode_calls(&self) -> usize {
        self.decode_calls.load(Ordering::Relaxed)
    }

    /// Latent of a signed-range `[B, 3, H, W]` tensor.
    pub fn encode(&self, x: &Tensor<F>, kind: LatentKind) -> Result<Latent<F>> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("VAE encoder needs 3 channels, got {c}")));
        }
        check_spatial(h, w)?;
        let bound = 1.0 + RANGE_SLACK;
        if let Some(v) = x.value().iter().find(|v| !(v.as_f64().abs() <= bound)) {
            return Err(Error::Range(format!("VAE input value {v} outside [-1, 1]")));
        }
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        let mut h = x.affine(F::cast(0.5), F::cast(0.5));
        for layer in &self.encoder {
            h = layer.forward(&h)?;
        }
        Latent::new(h, kind)
    }

    pub fn encode_image(&self, img: &Image) -> Result<Latent<F>> {
        if img.range() != ValueRange::Signed {
            return Err(Error::Range("VAE encoder expects a signed-range image".into()));
        }
        self.encode(&img.to_tensor(), LatentKind::Image)
    }

    /// Encodes the 3-channel signed broadcast of a binary mask.
    pub fn encode_mask(&self, mask: &Mask) -> Result<Latent<F>> {
        self.encode(&mask.broadcast_signed().to_tensor(), LatentKind::Mask)
    }

    /// `[B, 4, h, w]` to a signed `[B, 3, 8h, 8w]` image clamped to `[-1, 1]`.
    pub fn decode(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        let (_, c, _, _) = z.dims4()?;
        if c != LATENT_CHANNELS {
            return Err(Error::Shape(format!("VAE decoder needs {LATENT_CHANNELS} channels, got {c}")));
        }
        self.decode_calls.fetch_add(1, Ordering::Relaxed);
        let three = F::cast(3.0);
        let mut h = z.mul_scalar(F::one() / three).tanh().mul_scalar(three);
        for layer in &self.decoder {
            h = layer.forward(&h)?;
        }
        Ok(h.affine(F::cast(2.0), F::cast(-1.0)).clamp(-F::one(), F::one()))
    }
}

/// Channel mean of a signed decoded image, mapped to `[0, 1]`.
pub fn decoded_to_mask_probability<F: Float>(decoded: &Tensor<F>) -> Result<Tensor<F>> {
    decoded.dims4()?;
    Ok(decoded.mean_keepdim(&[1])?.affine(F::cast(0.5), F::cast(0.5)))
}

fn count_prefix<F: Float>(store: &ParamStore<F>, prefix: &str) -> usize {
    store.params().iter().filter(|p| p.name().starts_with(prefix)).map(|p| p.numel()).sum()
}

/// SHA-256 over every tensor's name, shape and little-endian `f32` values, in name order.
pub fn fingerprint<F: Float>(store: &ParamStore<F>) -> String {
    let mut h = Sha256::new();
    for (name, value) in store.to_named() {
        h.update(name.as_bytes());
        for d in value.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in value.iter() {
            h.update((v.as_f64() as f32).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Renames the two-file release (`{i}.*` in each file) to the single-file layout used here.
pub fn convert_split_release<F: Float>(
    encoder: BTreeMap<String, ArrayD<F>>,
    decoder: BTreeMap<String, ArrayD<F>>,
) -> Result<BTreeMap<String, ArrayD<F>>> {
    let mut out = BTreeMap::new();
    for (name, t) in encoder {
        out.insert(format!("encoder.layers.{name}"), t);
    }
    for (name, t) in decoder {
        let (idx, rest) = name
            .split_once('.')
            .ok_or_else(|| Error::ArchitectureMismatch(vec![format!("unexpected decoder tensor `{name}`")]))?;
        let idx: usize = idx
            .parse()
            .map_err(|_| Error::ArchitectureMismatch(vec![format!("unexpected decoder tensor `{name}`")]))?;
        if idx == 0 {
            return Err(Error::ArchitectureMismatch(vec![format!("decoder layer 0 has no parameters, found `{name}`")]));
        }
        out.insert(format!("decoder.layers.{}.{rest}", idx - 1), t);
    }
    Ok(out)
}

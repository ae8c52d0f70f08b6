use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] wavegms_autodiff::Error),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("value range error: {0}")]
    Range(String),

    #[error("mask is not binary: found value {0}")]
    NonBinary(f32),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(
        "VAE weights not found at {0}; download the pretrained tiny autoencoder (taesd_encoder.safetensors and \
         taesd_decoder.safetensors, or a single diffusers AutoencoderTiny file) and point `vae.weights` at it"
    )]
    WeightsMissing(PathBuf),

    #[error("weights do not match the architecture:\n  {}", .0.join("\n  "))]
    ArchitectureMismatch(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: seg={seg} lm={lm} align={align} total={total}")]
    NonFiniteLoss {
        step: usize,
        seg: f64,
        lm: f64,
        align: f64,
        total: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("source and target datasets share files: {0:?}")]
    Overlap(Vec<PathBuf>),

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use image::{GrayImage, Luma};
use ndarray::{Array2, Array4, Axis};
use wavegms_core::data::{
    is_image_path, read_image, read_mask, write_fixture, write_mask, AuditLog, DatasetName, DatasetSpec, FixtureSpec,
};
use wavegms_core::experiments::{
    evaluate_checkpoint, read_record, run_experiment_with, table_for_records, ExperimentConfig, Protocol, RunOptions,
    RunRecord, Variant,
};
use wavegms_core::metrics::evaluate_named;
use wavegms_core::pipeline::{ModelConfig, WaveGms};
use wavegms_core::training::{load_model_with_vae, predict, LAST_CHECKPOINT};
use wavegms_core::types::{Image, ValueRange};
use wavegms_core::vae::{FrozenVae, VaeSettings};
use wavegms_core::wavelet::decompose_levels;

#[derive(Parser)]
#[command(name = "wavegms", version, about = "Wavelet-encoded latent segmentation: train, evaluate, tabulate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint; without a value, from `last.safetensors` in the output directory.
        #[arg(long, num_args = 0..=1)]
        resume: Option<Option<PathBuf>>,
        /// Stop after this many epochs in this invocation.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// `name:root`, e.g. `busi:/data/BUSI`.
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resize: Option<usize>,
    },
    /// Train on one dataset and evaluate on another.
    CrossEval {
        /// `name:root` of the source dataset.
        #[arg(long)]
        train: String,
        /// `name:root` of the target dataset.
        #[arg(long)]
        eval: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run one ablation variant.
    Ablate {
        #[arg(long)]
        variant: String,
        /// `name:root` of the dataset.
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        out: PathBuf,
        /// LMM weights for the model-mismatch variant: a checkpoint or a bare LMM file.
        #[arg(long)]
        lmm_weights: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Per-image and aggregate metrics for two directories of masks matched by file name.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the wavelet subbands of an image as PNGs, one per level and band.
    Decompose {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        levels: usize,
    },
    /// Predict masks for an image or a directory of images.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 224)]
        size: usize,
    },
    /// Combine the `metrics.json` of several runs into one table.
    Table {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write `table.md` and `table.csv` here instead of printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a small synthetic dataset.
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n_train: usize,
        #[arg(long, default_value_t = 4)]
        n_test: usize,
        #[arg(long, default_value_t = 32)]
        size: u32,
        #[arg(long, default_value_t = 2333)]
        seed: u64,
        /// Object darker than the background.
        #[arg(long)]
        dark: bool,
    },
    /// Print parameter counts of the default model.
    Params {
        #[arg(long)]
        vae_weights: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Share of the training split held out for checkpoint selection.
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    resize: Option<usize>,
    #[arg(long)]
    vae_weights: Option<PathBuf>,
    /// Refuse to fall back to a random VAE when weights are missing.
    #[arg(long)]
    require_vae: bool,
}

fn parse_dataset(s: &str) -> Result<DatasetSpec> {
    let (name, root) = s.split_once(':').with_context(|| format!("expected name:root, got {s:?}"))?;
    let name: DatasetName = serde_json::from_value(serde_json::Value::String(name.to_string()))
        .with_context(|| format!("unknown dataset {name:?}"))?;
    Ok(DatasetSpec::new(name, root))
}

fn base_config(name: &str, protocol: Protocol, out: &Path, train: DatasetSpec, run: &RunArgs) -> ExperimentConfig {
    let mut train_dataset = train;
    if let Some(r) = run.resize {
        train_dataset.resize = r;
    }
    let mut overrides = toml::Table::new();
    if let Some(e) = run.epochs {
        overrides.insert("epochs".into(), toml::Value::Integer(e as i64));
    }
    if let Some(b) = run.batch_size {
        overrides.insert("batch_size".into(), toml::Value::Integer(b as i64));
    }
    if let Some(v) = run.val_fraction {
        overrides.insert("val_fraction".into(), toml::Value::Float(v));
    }
    ExperimentConfig {
        name: name.to_string(),
        protocol,
        variant: Variant::Full,
        output_dir: out.to_path_buf(),
        train_dataset,
        eval_dataset: None,
        train: overrides,
        model: ModelConfig::default(),
        vae: VaeSettings {
            weights: run.vae_weights.clone(),
            allow_stand_in: !run.require_vae,
            ..VaeSettings::default()
        },
        lmm_weights: None,
    }
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

fn report(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    let outcome = run_experiment_with(cfg, opts)?;
    let r = &outcome.record.report;
    println!(
        "{}: DSC {:.2}  IoU {:.2}  HD95 {:.2}  ({} images)",
        outcome.record.label, r.dsc, r.iou, r.hd95, r.n_images
    );
    if let Some(iso) = &outcome.record.isolation {
        println!(
            "isolation: {} target files, {} reads before evaluation, {} of them target files",
            iso.target_files,
            iso.reads_before_evaluation,
            iso.target_reads_before_evaluation.len()
        );
    }
    println!("outputs in {}", outcome.out_dir.display());
    Ok(())
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image_path(p))
        .collect();
    v.sort();
    Ok(v)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn metrics(pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let audit = AuditLog::new();
    let preds: BTreeMap<String, PathBuf> = list_images(pred)?.into_iter().map(|p| (stem(&p), p)).collect();
    let mut names = Vec::new();
    let (mut p_masks, mut g_masks) = (Vec::new(), Vec::new());
    for g in list_images(gt)? {
        let name = stem(&g);
        let p = preds
            .get(&name)
            .with_context(|| format!("no prediction for {}", g.display()))?;
        g_masks.push(read_mask(&g, None, &audit)?);
        p_masks.push(read_mask(p, None, &audit)?);
        names.push(name);
    }
    if names.len() != preds.len() {
        bail!("{} predictions but {} ground-truth masks", preds.len(), names.len());
    }
    let report = evaluate_named(&names, &p_masks, &g_masks)?;
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("per_image.csv"))?;
    for m in &report.per_image {
        w.serialize(m)?;
    }
    w.flush()?;
    let aggregate = serde_json::json!({
        "dsc": report.dsc,
        "iou": report.iou,
        "hd95": report.hd95,
        "n_images": report.n_images,
    });
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&aggregate)?)?;
    println!("DSC {:.2}  IoU {:.2}  HD95 {:.2}  ({} images)", report.dsc, report.iou, report.hd95, report.n_images);
    Ok(())
}

fn to_gray(band: &Array4<f32>) -> GrayImage {
    let mean: Array2<f32> = band.index_axis(Axis(0), 0).mean_axis(Axis(0)).expect("non-empty channels");
    let (lo, hi) = mean.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = mean.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([((mean[[y as usize, x as usize]] - lo) / span * 255.0).round() as u8])
    })
}

fn decompose(image: &Path, out: &Path, size: usize, levels: usize) -> Result<()> {
    let img = read_image(image, size, &AuditLog::new())?.insert_axis(Axis(0));
    let signed = Image::new(img, ValueRange::Unit)?.to_signed()?;
    let bands = decompose_levels(signed.data().view(), levels)?;
    std::fs::create_dir_all(out)?;
    for lv in &bands {
        for (name, band) in [("ll", &lv.ll), ("lh", &lv.lh), ("hl", &lv.hl), ("hh", &lv.hh)] {
            let path = out.join(format!("level{}_{name}.png", lv.level));
            to_gray(band).save(&path).with_context(|| format!("writing {}", path.display()))?;
            let energy: f64 = band.iter().map(|&v| (v as f64).powi(2)).sum();
            println!("level {} {name}: {:?}, energy {energy:.4}", lv.level, band.shape());
        }
    }
    Ok(())
}

fn run_predict(ckpt: &Path, input: &Path, out: &Path, size: usize) -> Result<()> {
    let (model, _) = load_model_with_vae::<f32>(ckpt)?;
    let files = if input.is_dir() { list_images(input)? } else { vec![input.to_path_buf()] };
    if files.is_empty() {
        bail!("no images under {}", input.display());
    }
    std::fs::create_dir_all(out)?;
    let audit = AuditLog::new();
    for f in &files {
        let img = Image::new(read_image(f, size, &audit)?.insert_axis(Axis(0)), ValueRange::Unit)?;
        let mask = predict(&model, &img)?;
        let path = out.join(format!("{}.png", stem(f)));
        write_mask(&path, &mask.sample(0))?;
    }
    println!("wrote {} masks to {}", files.len(), out.display());
    Ok(())
}

fn table(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let records = runs
        .iter()
        .map(|p| {
            let p = if p.is_dir() { p.join("metrics.json") } else { p.clone() };
            read_record(&p).with_context(|| format!("reading {}", p.display()))
        })
        .collect::<Result<Vec<RunRecord>>>()?;
    let t = table_for_records(&records)?;
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("table.md"), &t.markdown)?;
            std::fs::write(dir.join("table.csv"), &t.csv)?;
        }
        None => print!("{}", t.markdown),
    }
    Ok(())
}

fn params(vae_weights: Option<&Path>) -> Result<()> {
    let vae = match vae_weights {
        Some(p) => FrozenVae::<f32>::load_pretrained(p)?,
        None => FrozenVae::<f32>::random_stand_in(0)?,
    };
    let model = WaveGms::<f32>::new(ModelConfig::default(), Arc::new(vae), 0)?;
    let counts = serde_json::json!({
        "encoder": model.encoder_parameters(),
        "lmm": model.lmm_parameters(),
        "trainable": model.trainable_parameters(),
        "vae_encoder": model.vae().encoder_parameters(),
        "vae_decoder": model.vae().decoder_parameters(),
        "frozen": model.frozen_parameters(),
    });
    println!("{}", serde_json::to_string_pretty(&counts)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            resume,
            max_epochs,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let resume = resume.map(|p| p.unwrap_or_else(|| cfg.output_dir.join(LAST_CHECKPOINT)));
            report(&cfg, &RunOptions {
                resume,
                max_epochs_this_run: max_epochs,
            })
        }
        Command::Eval {
            ckpt,
            dataset,
            out,
            resize,
        } => {
            let mut spec = parse_dataset(&dataset)?;
            if let Some(r) = resize {
                spec.resize = r;
            }
            let rec = evaluate_checkpoint(&ckpt, &spec, &out, None)?;
            let r = &rec.report;
            println!("DSC {:.2}  IoU {:.2}  HD95 {:.2}  ({} images)", r.dsc, r.iou, r.hd95, r.n_images);
            Ok(())
        }
        Command::CrossEval { train, eval, out, run } => {
            let mut cfg = base_config(&dir_name(&out), Protocol::CrossDomain, &out, parse_dataset(&train)?, &run);
            let mut target = parse_dataset(&eval)?;
            target.resize = cfg.train_dataset.resize;
            cfg.eval_dataset = Some(target);
            report(&cfg, &RunOptions::default())
        }
        Command::Ablate {
            variant,
            dataset,
            out,
            lmm_weights,
            run,
        } => {
            let mut cfg = base_config(&dir_name(&out), Protocol::Ablation, &out, parse_dataset(&dataset)?, &run);
            cfg.variant = Variant::parse(&variant)?;
            cfg.lmm_weights = lmm_weights;
            report(&cfg, &RunOptions::default())
        }
        Command::Metrics { pred, gt, out } => metrics(&pred, &gt, &out),
        Command::Decompose {
            image,
            out,
            size,
            levels,
        } => decompose(&image, &out, size, levels),
        Command::Predict { ckpt, input, out, size } => run_predict(&ckpt, &input, &out, size),
        Command::Table { runs, out } => table(&runs, out.as_deref()),
        Command::MakeFixture {
            out,
            n_train,
            n_test,
            size,
            seed,
            dark,
        } => {
            write_fixture(&out, &FixtureSpec {
                n_train,
                n_test,
                size,
                seed,
                bright_object: !dark,
            })?;
            println!("wrote {n_train} train and {n_test} test pairs to {}", out.display());
            Ok(())
        }
        Command::Params { vae_weights } => params(vae_weights.as_deref()),
    }
}

//! Declarative runs: same-dataset training and evaluation, cross-domain transfer, and ablations.
//!
//! Every run writes into its own directory:
//!
//! * `config.toml`: the resolved configuration
//! * `best.safetensors`, `last.safetensors` (+ `.json` manifests), `loss_log.csv`, `epoch_log.csv`
//! * `metrics.json`: aggregate and per-image metrics plus the matching published reference
//! * `per_image.csv`, `table.md`, `table.csv`, `audit.json`

pub mod references;
mod table;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use references::{Reference, ReferenceRecord, PUBLISHED_REFERENCE};
pub use table::{emit_table, EmittedTable, Flag, Metric, RowKind, TableRow};

use crate::data::{index_dataset, make_validation_split, AuditEvent, AuditLog, DatasetIndex, DatasetName, DatasetSpec};
use crate::error::{io_err, Error, Result};
use crate::metrics::MetricsReport;
use crate::pipeline::{LatentSource, ModelConfig};
use crate::training::{evaluate, fit, load_model, FitOptions, TrainConfig, Trainer, BEST_CHECKPOINT};
use crate::vae::{FrozenVae, VaeSettings};

pub const TRAINING_PHASE: &str = "training";
pub const EVALUATION_PHASE: &str = "evaluation";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Main,
    CrossDomain,
    Ablation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoAlignment,
    TinyvaeTrained,
    TinyvaeModelMismatch,
    Batch2,
    Batch4,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::TinyvaeModelMismatch,
        Variant::TinyvaeTrained,
        Variant::NoAlignment,
        Variant::Batch2,
        Variant::Batch4,
        Variant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => references::WAVE_GMS,
            Variant::NoAlignment => references::NO_ALIGNMENT,
            Variant::TinyvaeTrained => references::TINYVAE_TRAINED,
            Variant::TinyvaeModelMismatch => references::TINYVAE_MISMATCH,
            Variant::Batch2 => references::BATCH2,
            Variant::Batch4 => references::BATCH4,
        }
    }

    /// Row position in the ablation table; the excluded SFT variant sits at 2.
    pub fn order(self) -> usize {
        match self {
            Variant::TinyvaeModelMismatch => 0,
            Variant::TinyvaeTrained => 1,
            Variant::NoAlignment => 3,
            Variant::Batch2 => 4,
            Variant::Batch4 => 5,
            Variant::Full => 6,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct W {
            v: Variant,
        }
        toml::from_str::<W>(&format!("v = {s:?}"))
            .map(|w| w.v)
            .map_err(|_| Error::Config(format!("unknown variant `{s}`")))
    }

    fn apply(self, train: &mut TrainConfig, model: &mut ModelConfig) {
        match self {
            Variant::Full => {}
            Variant::NoAlignment => train.align_enabled = false,
            Variant::TinyvaeTrained | Variant::TinyvaeModelMismatch => {
                model.latent_source = LatentSource::TinyVae;
                train.align_enabled = false;
            }
            Variant::Batch2 => train.batch_size = 2,
            Variant::Batch4 => train.batch_size = 4,
        }
    }
}

/// An experiment as written in TOML. `train` holds overrides on top of the dataset's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub protocol: Protocol,
    #[serde(default)]
    pub variant: Variant,
    pub output_dir: PathBuf,
    pub train_dataset: DatasetSpec,
    /// Target of a cross-domain run; same-dataset runs evaluate on `train_dataset`'s test split.
    #[serde(default)]
    pub eval_dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub vae: VaeSettings,
    /// Externally trained LMM weights for the model-mismatch variant.
    #[serde(default)]
    pub lmm_weights: Option<PathBuf>,
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        rebase(base, &mut cfg.output_dir);
        rebase(base, &mut cfg.train_dataset.root);
        if let Some(e) = cfg.eval_dataset.as_mut() {
            rebase(base, &mut e.root);
        }
        if let Some(w) = cfg.vae.weights.as_mut() {
            rebase(base, w);
        }
        if let Some(w) = cfg.lmm_weights.as_mut() {
            rebase(base, w);
        }
        Ok(cfg)
    }

    pub fn eval_spec(&self) -> &DatasetSpec {
        self.eval_dataset.as_ref().unwrap_or(&self.train_dataset)
    }

    /// Dataset defaults, then the `train` table, then the variant's overrides.
    pub fn resolved(&self) -> Result<(TrainConfig, ModelConfig)> {
        let base = TrainConfig::for_dataset(self.train_dataset.name);
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in &self.train {
            table.insert(k.clone(), v.clone());
        }
        let mut train: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("[train]: {e}")))?;
        let mut model = self.model.clone();
        self.variant.apply(&mut train, &mut model);
        train.validate()?;
        Ok((train, model))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.protocol {
            Protocol::CrossDomain => {
                let Some(target) = &self.eval_dataset else {
                    return bad("cross_domain needs an eval_dataset".into());
                };
                let canon = |p: &Path| p.canonicalize().unwrap_or_else(|_| p.to_path_buf());
                if canon(&target.root) == canon(&self.train_dataset.root) {
                    return bad("cross_domain needs distinct train and eval datasets".into());
                }
                if self.variant != Variant::Full {
                    return bad("variants belong to the ablation protocol".into());
                }
            }
            Protocol::Main => {
                if self.variant != Variant::Full {
                    return bad("variants belong to the ablation protocol".into());
                }
                if self.eval_dataset.as_ref().is_some_and(|e| e != &self.train_dataset) {
                    return bad("main runs evaluate on the training dataset; use cross_domain for transfer".into());
                }
            }
            Protocol::Ablation => {}
        }
        if self.variant == Variant::TinyvaeModelMismatch && self.lmm_weights.is_none() {
            return bad("the model-mismatch variant needs `lmm_weights` (externally trained LMM weights)".into());
        }
        self.resolved().map(|_| ())
    }

    pub fn reference(&self) -> Option<Reference> {
        let (tr, ev) = (self.train_dataset.name, self.eval_spec().name);
        match self.protocol {
            Protocol::Main => references::find(references::MAIN, references::WAVE_GMS, tr, ev),
            Protocol::CrossDomain => references::find(references::CROSS_DOMAIN, references::WAVE_GMS, tr, ev),
            Protocol::Ablation => references::find(references::ABLATION, self.variant.label(), tr, ev),
        }
    }
}

/// Snapshot written as `config.toml`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResolvedConfig {
    experiment: ExperimentConfig,
    resolved_train: TrainConfig,
    resolved_model: ModelConfig,
}

/// Whether the evaluation set was opened before the evaluation phase began.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationCheck {
    pub target_files: usize,
    pub reads_before_evaluation: usize,
    pub target_reads_before_evaluation: Vec<PathBuf>,
}

impl IsolationCheck {
    pub fn passed(&self) -> bool {
        self.target_reads_before_evaluation.is_empty()
    }
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub protocol: Protocol,
    pub variant: Variant,
    pub label: String,
    pub train_dataset: DatasetName,
    pub eval_dataset: DatasetName,
    pub trainable_parameters: usize,
    pub vae_pretrained: bool,
    pub best_epoch: Option<usize>,
    pub best_val_dice: Option<f64>,
    pub report: MetricsReport,
    pub published_reference: Option<ReferenceRecord>,
    pub isolation: Option<IsolationCheck>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub table: EmittedTable,
}

fn canonical_set(paths: impl IntoIterator<Item = PathBuf>) -> BTreeSet<PathBuf> {
    paths
        .into_iter()
        .map(|p| p.canonicalize().unwrap_or(p))
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

/// Measured row plus the matching published reference, if any.
pub fn rows_for(record: &RunRecord, order: usize) -> Vec<TableRow> {
    let r = &record.report;
    let mut rows = vec![TableRow::measured(
        format!("{} [{}]", record.label, record.name),
        order,
        vec![(Metric::Dsc, r.dsc), (Metric::Iou, r.iou), (Metric::Hd95, r.hd95)],
    )];
    if let Some(p) = &record.published_reference {
        let mut values = vec![(Metric::Dsc, p.dsc)];
        if let Some(iou) = p.iou {
            values.push((Metric::Iou, iou));
        }
        values.push((Metric::Hd95, p.hd95));
        rows.push(TableRow {
            label: p.method.clone(),
            kind: RowKind::PublishedReference,
            order,
            values,
        });
    }
    rows
}

fn title(record: &RunRecord) -> String {
    if record.train_dataset == record.eval_dataset {
        record.eval_dataset.label().to_string()
    } else {
        format!("{} to {}", record.train_dataset.label(), record.eval_dataset.label())
    }
}

/// Table over several runs; for ablations the excluded SFT variant appears as "not implemented".
pub fn table_for_records(records: &[RunRecord]) -> Result<EmittedTable> {
    let first = records
        .first()
        .ok_or_else(|| Error::Report("no runs to tabulate".into()))?;
    let mut rows = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let order = if rec.protocol == Protocol::Ablation { rec.variant.order() } else { i };
        rows.extend(rows_for(rec, order));
    }
    if records.iter().any(|r| r.protocol == Protocol::Ablation) {
        rows.push(TableRow {
            label: references::TINYVAE_SFT.into(),
            kind: RowKind::NotImplemented,
            order: 2,
            values: vec![],
        });
    }
    emit_table(&title(first), &rows)
}

fn write_outputs(out_dir: &Path, record: &RunRecord, audit: &AuditLog) -> Result<EmittedTable> {
    write_text(&out_dir.join("metrics.json"), &serde_json::to_string_pretty(record)?)?;
    let per_image = out_dir.join("per_image.csv");
    let mut w = csv::Writer::from_path(&per_image)?;
    for m in &record.report.per_image {
        w.serialize(m)?;
    }
    w.flush().map_err(io_err(&per_image))?;
    let table = table_for_records(std::slice::from_ref(record))?;
    write_text(&out_dir.join("table.md"), &table.markdown)?;
    write_text(&out_dir.join("table.csv"), &table.csv)?;
    let events: Vec<AuditEvent> = audit.events();
    write_text(&out_dir.join("audit.json"), &serde_json::to_string_pretty(&events)?)?;
    Ok(table)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue training from this checkpoint, usually `last.safetensors` of an earlier call.
    pub resume: Option<PathBuf>,
    pub max_epochs_this_run: Option<usize>,
}

/// Runs one experiment end to end according to its protocol and variant.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_experiment_with(cfg, &RunOptions::default())
}

pub fn run_experiment_with(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train_cfg, model_cfg) = cfg.resolved()?;
    let out_dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let snapshot = ResolvedConfig {
        experiment: cfg.clone(),
        resolved_train: train_cfg.clone(),
        resolved_model: model_cfg.clone(),
    };
    write_text(
        &out_dir.join("config.toml"),
        &toml::to_string_pretty(&snapshot).map_err(|e| Error::Config(e.to_string()))?,
    )?;

    let source = index_dataset(&cfg.train_dataset)?;
    let target: DatasetIndex = match cfg.protocol {
        Protocol::CrossDomain => index_dataset(cfg.eval_spec())?,
        _ => source.clone(),
    };
    let target_files = canonical_set(target.test_files());
    if cfg.protocol == Protocol::CrossDomain {
        let shared: Vec<PathBuf> = canonical_set(source.train_files()).intersection(&target_files).cloned().collect();
        if !shared.is_empty() {
            return Err(Error::Overlap(shared));
        }
    }

    let audit = AuditLog::new();
    let vae = Arc::new(cfg.vae.load::<f32>()?);
    audit.phase(TRAINING_PHASE);
    let mut trainer = if let Some(from) = &opts.resume {
        let t = Trainer::resume(from, Arc::clone(&vae))?;
        if t.config != train_cfg || t.model.config() != &model_cfg {
            return Err(Error::Config(format!(
                "{} was written with a different configuration; refusing to resume",
                from.display()
            )));
        }
        log::info!("resuming after epoch {}", t.state.epochs_completed);
        t
    } else {
        Trainer::new(model_cfg, train_cfg.clone(), Arc::clone(&vae), cfg.vae.clone())?
    };
    let checkpoint = out_dir.join(BEST_CHECKPOINT);
    if cfg.variant == Variant::TinyvaeModelMismatch {
        let weights = cfg.lmm_weights.as_deref().expect("validated");
        trainer.model.load_lmm_file(weights)?;
        trainer.save(&checkpoint)?;
    } else {
        let samples = source.load_train(&audit)?;
        let (train, val) = make_validation_split(&samples, train_cfg.val_fraction, train_cfg.seed)?;
        let fit_opts = FitOptions {
            max_epochs_this_run: opts.max_epochs_this_run,
        };
        fit(&mut trainer, &train, &val, &out_dir, &fit_opts)?;
    }
    let isolation = (cfg.protocol == Protocol::CrossDomain).then(|| {
        let before = audit.reads_before(EVALUATION_PHASE);
        let hits: Vec<PathBuf> = before
            .iter()
            .map(|p| p.canonicalize().unwrap_or_else(|_| p.clone()))
            .filter(|p| target_files.contains(p))
            .collect();
        IsolationCheck {
            target_files: target_files.len(),
            reads_before_evaluation: before.len(),
            target_reads_before_evaluation: hits,
        }
    });
    if let Some(iso) = &isolation {
        if !iso.passed() {
            return Err(Error::Overlap(iso.target_reads_before_evaluation.clone()));
        }
    }

    audit.phase(EVALUATION_PHASE);
    let (model, _) = load_model(&checkpoint, Arc::clone(&vae))?;
    let test = target.load_test(&audit)?;
    let report = evaluate(&model, &test, train_cfg.batch_size)?;
    let record = RunRecord {
        name: cfg.name.clone(),
        protocol: cfg.protocol,
        variant: cfg.variant,
        label: cfg.variant.label().to_string(),
        train_dataset: cfg.train_dataset.name,
        eval_dataset: cfg.eval_spec().name,
        trainable_parameters: model.trainable_parameters(),
        vae_pretrained: vae.is_pretrained(),
        best_epoch: trainer.state.best_epoch,
        best_val_dice: trainer.state.best_val_dice,
        report,
        published_reference: cfg.reference().map(|r| r.record()),
        isolation,
    };
    let table = write_outputs(&out_dir, &record, &audit)?;
    log::info!(
        "{}: DSC {:.2} IoU {:.2} HD95 {:.2} on {} test images",
        record.name,
        record.report.dsc,
        record.report.iou,
        record.report.hd95,
        record.report.n_images
    );
    Ok(RunOutcome {
        record,
        out_dir,
        checkpoint,
        table,
    })
}

pub fn run_main(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    if cfg.protocol != Protocol::Main {
        return Err(Error::Config(format!("expected protocol main, got {:?}", cfg.protocol)));
    }
    run_experiment(cfg)
}

pub fn run_cross_domain(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    if cfg.protocol != Protocol::CrossDomain {
        return Err(Error::Config(format!("expected protocol cross_domain, got {:?}", cfg.protocol)));
    }
    run_experiment(cfg)
}

pub fn run_ablation(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    if cfg.protocol != Protocol::Ablation {
        return Err(Error::Config(format!("expected protocol ablation, got {:?}", cfg.protocol)));
    }
    run_experiment(cfg)
}

/// Evaluates an existing checkpoint on a dataset's test split and writes the usual outputs.
pub fn evaluate_checkpoint(ckpt: &Path, dataset: &DatasetSpec, out_dir: &Path, vae: Option<Arc<FrozenVae<f32>>>) -> Result<RunRecord> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let (model, manifest) = match vae {
        Some(v) => load_model(ckpt, v)?,
        None => crate::training::load_model_with_vae::<f32>(ckpt)?,
    };
    let index = index_dataset(dataset)?;
    let audit = AuditLog::new();
    audit.phase(EVALUATION_PHASE);
    let test = index.load_test(&audit)?;
    let report = evaluate(&model, &test, manifest.train.batch_size)?;
    let name = ckpt
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "eval".into());
    let record = RunRecord {
        name,
        protocol: Protocol::Main,
        variant: Variant::Full,
        label: "checkpoint".into(),
        train_dataset: dataset.name,
        eval_dataset: dataset.name,
        trainable_parameters: model.trainable_parameters(),
        vae_pretrained: model.vae().is_pretrained(),
        best_epoch: manifest.best_epoch,
        best_val_dice: manifest.best_val_dice,
        report,
        published_reference: None,
        isolation: None,
    };
    write_outputs(out_dir, &record, &audit)?;
    Ok(record)
}

pub fn read_record(path: &Path) -> Result<RunRecord> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

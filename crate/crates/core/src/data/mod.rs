//! Dataset discovery, loading, splitting and batching.
//!
//! Supported layouts (matched case-sensitively, images and masks paired by file stem):
//!
//! * BUS: `original/` + `GT/`, or `images/` + `masks/`.
//! * BUSI: class folders `benign/`, `malignant/` (and `normal/` when enabled) holding `X.png` with
//!   `X_mask.png` and optionally `X_mask_1.png`, ...; multiple masks are merged.
//! * Kvasir-Instrument: `images/` + `masks/`.
//! * HAM10000: `images/` + `masks/`, masks named `X_segmentation.png` or `X.png`.
//! * Synthetic fixtures: `images/` + `masks/`.
//!
//! The split comes from `train.txt` / `test.txt` at the root when present (one stem per line), else
//! from `train/` and `test/` subdirectories, else from a seeded shuffle using the declared counts.

mod audit;
mod augment;
mod fixture;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use audit::{AuditEvent, AuditLog};
pub use augment::{augment, hflip, hsv_to_rgb, rgb_to_hsv, sample_rng, AugmentationPolicy};
pub use fixture::{write_fixture, FixtureSpec};

use crate::error::{io_err, Error, Result};
use crate::types::{Image, Mask, ValueRange};

pub const DEFAULT_RESIZE: usize = 224;
pub const DEFAULT_SPLIT_SEED: u64 = 2333;
/// Test share used by the seeded split when a dataset declares no counts.
const UNDECLARED_TEST_FRACTION: f64 = 0.2;
const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Bus,
    Busi,
    KvasirInstrument,
    Ham10000,
    Synthetic,
}

impl DatasetName {
    /// `(train, test)` sizes of the public releases.
    pub fn declared_split(self) -> Option<(usize, usize)> {
        match self {
            DatasetName::Bus => Some((132, 31)),
            DatasetName::Busi => Some((517, 130)),
            DatasetName::KvasirInstrument => Some((472, 118)),
            DatasetName::Ham10000 => Some((8015, 2000)),
            DatasetName::Synthetic => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DatasetName::Bus => "BUS",
            DatasetName::Busi => "BUSI",
            DatasetName::KvasirInstrument => "Kvasir-Instrument",
            DatasetName::Ham10000 => "HAM10000",
            DatasetName::Synthetic => "Synthetic",
        }
    }

    pub fn is_breast_ultrasound(self) -> bool {
        matches!(self, DatasetName::Bus | DatasetName::Busi)
    }
}

fn default_resize() -> usize {
    DEFAULT_RESIZE
}

fn default_val_fraction() -> f64 {
    0.1
}

fn default_split_seed() -> u64 {
    DEFAULT_SPLIT_SEED
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub root: PathBuf,
    #[serde(default = "default_resize")]
    pub resize: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
    /// Keep BUSI's tumour-free cases. Off by default so the split matches the declared counts.
    #[serde(default)]
    pub include_normal: bool,
    /// Check split sizes against the declared counts. Defaults to on for public datasets.
    #[serde(default)]
    pub enforce_counts: Option<bool>,
}

impl DatasetSpec {
    pub fn new(name: DatasetName, root: impl Into<PathBuf>) -> Self {
        DatasetSpec {
            name,
            root: root.into(),
            resize: DEFAULT_RESIZE,
            val_fraction: default_val_fraction(),
            split_seed: DEFAULT_SPLIT_SEED,
            include_normal: false,
            enforce_counts: None,
        }
    }

    pub fn with_resize(mut self, resize: usize) -> Self {
        self.resize = resize;
        self
    }

    fn expected_counts(&self) -> Option<(usize, usize)> {
        let enforce = self.enforce_counts.unwrap_or(self.name != DatasetName::Synthetic && !self.include_normal);
        if enforce {
            self.name.declared_split()
        } else {
            None
        }
    }
}

/// An image file and the mask file(s) that belong to it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct PairPaths {
    pub name: String,
    pub image: PathBuf,
    pub masks: Vec<PathBuf>,
}

/// One loaded pair: image `[3, H, W]` in `[0, 1]`, binary mask `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: Array3<f32>,
    pub mask: Array2<f32>,
}

/// File lists of both splits. Building it lists directories but opens no image files.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub spec: DatasetSpec,
    pub train: Vec<PairPaths>,
    pub test: Vec<PairPaths>,
}

pub fn is_image_path(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image_path(p))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn first_existing(dir: &Path, candidates: &[&str]) -> Option<PathBuf> {
    candidates.iter().map(|c| dir.join(c)).find(|p| p.is_dir())
}

/// Mask files for an image stem: the same stem, `_mask`, `_segmentation`, or `_mask_N`.
fn masks_for(image_stem: &str, masks_by_stem: &BTreeMap<String, PathBuf>) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for key in [
        image_stem.to_string(),
        format!("{image_stem}_mask"),
        format!("{image_stem}_segmentation"),
    ] {
        if let Some(p) = masks_by_stem.get(&key) {
            out.push(p.clone());
        }
    }
    let prefix = format!("{image_stem}_mask_");
    for (k, p) in masks_by_stem.range(prefix.clone()..) {
        if !k.starts_with(&prefix) {
            break;
        }
        if k[prefix.len()..].chars().all(|c| c.is_ascii_digit()) {
            out.push(p.clone());
        }
    }
    out
}

fn pair_dirs(image_dir: &Path, mask_dir: &Path, prefix: &str, out: &mut Vec<PairPaths>) -> Result<()> {
    let same_dir = image_dir == mask_dir;
    let mut masks_by_stem = BTreeMap::new();
    for p in list_images(mask_dir)? {
        masks_by_stem.insert(stem(&p), p);
    }
    for img in list_images(image_dir)? {
        let s = stem(&img);
        if same_dir && (s.contains("_mask") || s.ends_with("_segmentation")) {
            continue;
        }
        let mut masks = masks_for(&s, &masks_by_stem);
        if same_dir {
            masks.retain(|m| m != &img);
        }
        if masks.is_empty() {
            return Err(Error::Dataset(format!("no mask found for image {}", img.display())));
        }
        out.push(PairPaths {
            name: format!("{prefix}{s}"),
            image: img,
            masks,
        });
    }
    Ok(())
}

/// Image/mask pairs found directly under `dir`.
fn discover(dir: &Path, spec: &DatasetSpec) -> Result<Vec<PairPaths>> {
    let mut out = Vec::new();
    if spec.name == DatasetName::Busi {
        let mut classes = vec!["benign", "malignant"];
        if spec.include_normal {
            classes.push("normal");
        }
        let present: Vec<&str> = classes.iter().copied().filter(|c| dir.join(c).is_dir()).collect();
        if !present.is_empty() {
            for c in present {
                let d = dir.join(c);
                pair_dirs(&d, &d, &format!("{c}/"), &mut out)?;
            }
            out.sort();
            return Ok(out);
        }
    }
    let (img_names, mask_names): (&[&str], &[&str]) = match spec.name {
        DatasetName::Bus => (&["original", "images"], &["GT", "masks"]),
        _ => (&["images"], &["masks"]),
    };
    let image_dir = first_existing(dir, img_names).ok_or_else(|| {
        Error::Dataset(format!("{}: expected one of {:?} under {}", spec.name.label(), img_names, dir.display()))
    })?;
    let mask_dir = first_existing(dir, mask_names).ok_or_else(|| {
        Error::Dataset(format!("{}: expected one of {:?} under {}", spec.name.label(), mask_names, dir.display()))
    })?;
    pair_dirs(&image_dir, &mask_dir, "", &mut out)?;
    out.sort();
    Ok(out)
}

fn read_list(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| stem(Path::new(l)))
        .collect())
}

/// Seeded permutation, returning `(rest, picked)` with `picked.len() == n_pick`, each in input order.
fn seeded_pick<T: Clone>(items: &[T], n_pick: usize, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let picked: BTreeSet<usize> = idx.into_iter().take(n_pick).collect();
    let mut rest = Vec::new();
    let mut chosen = Vec::new();
    for (i, it) in items.iter().enumerate() {
        if picked.contains(&i) {
            chosen.push(it.clone());
        } else {
            rest.push(it.clone());
        }
    }
    (rest, chosen)
}

/// Lists the files of both splits and checks them against the declared counts.
pub fn index_dataset(spec: &DatasetSpec) -> Result<DatasetIndex> {
    let root = &spec.root;
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} does not exist", root.display())));
    }
    let (train, test) = if root.join("train.txt").is_file() && root.join("test.txt").is_file() {
        let all = discover(root, spec)?;
        let train_names = read_list(&root.join("train.txt"))?;
        let test_names = read_list(&root.join("test.txt"))?;
        let key = |p: &PairPaths| stem(&p.image);
        let train: Vec<_> = all.iter().filter(|p| train_names.contains(&key(p))).cloned().collect();
        let test: Vec<_> = all.iter().filter(|p| test_names.contains(&key(p))).cloned().collect();
        for name in train_names.iter().chain(&test_names) {
            if !all.iter().any(|p| &key(p) == name) {
                return Err(Error::Dataset(format!("split list names `{name}` but no such image exists")));
            }
        }
        (train, test)
    } else if root.join("train").is_dir() && root.join("test").is_dir() {
        (discover(&root.join("train"), spec)?, discover(&root.join("test"), spec)?)
    } else {
        let all = discover(root, spec)?;
        let n_test = match spec.expected_counts() {
            Some((_, t)) => t.min(all.len()),
            None => ((all.len() as f64) * UNDECLARED_TEST_FRACTION).round() as usize,
        };
        seeded_pick(&all, n_test, spec.split_seed)
    };
    let train_set: BTreeSet<&PathBuf> = train.iter().map(|p| &p.image).collect();
    if let Some(dup) = test.iter().find(|p| train_set.contains(&p.image)) {
        return Err(Error::Dataset(format!("{} appears in both splits", dup.image.display())));
    }
    if let Some((etr, ete)) = spec.expected_counts() {
        if (train.len(), test.len()) != (etr, ete) {
            return Err(Error::Dataset(format!(
                "{} at {}: expected {etr} train / {ete} test pairs, found {} / {}",
                spec.name.label(),
                root.display(),
                train.len(),
                test.len()
            )));
        }
    }
    Ok(DatasetIndex {
        spec: spec.clone(),
        train,
        test,
    })
}

fn open_image(path: &Path, audit: &AuditLog) -> Result<image::DynamicImage> {
    audit.record_read(path);
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// RGB image resized bilinearly to `size x size`, scaled to `[0, 1]`. Grey images are replicated.
pub fn read_image(path: &Path, size: usize, audit: &AuditLog) -> Result<Array3<f32>> {
    let rgb = open_image(path, audit)?.to_rgb8();
    let rgb = if rgb.dimensions() != (size as u32, size as u32) {
        image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle)
    } else {
        rgb
    };
    Ok(Array3::from_shape_fn((3, size, size), |(c, i, j)| {
        rgb.get_pixel(j as u32, i as u32)[c] as f32 / 255.0
    }))
}

/// Binary mask resized with nearest neighbour; a pixel is foreground when above half intensity.
pub fn read_mask(path: &Path, size: Option<usize>, audit: &AuditLog) -> Result<Array2<f32>> {
    let grey = open_image(path, audit)?.to_luma8();
    let grey = match size {
        Some(s) if grey.dimensions() != (s as u32, s as u32) => {
            image::imageops::resize(&grey, s as u32, s as u32, FilterType::Nearest)
        }
        _ => grey,
    };
    let (w, h) = grey.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        if grey.get_pixel(j as u32, i as u32)[0] > 127 {
            1.0
        } else {
            0.0
        }
    }))
}

pub fn write_mask(path: &Path, mask: &Array2<f32>) -> Result<()> {
    let (h, w) = mask.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] > 0.5 { 255 } else { 0 }])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_pairs(pairs: &[PairPaths], size: usize, audit: &AuditLog) -> Result<Vec<Sample>> {
    if size == 0 || size % 8 != 0 {
        return Err(Error::InvalidArgument(format!("resize target {size} must be a positive multiple of 8")));
    }
    pairs
        .iter()
        .map(|p| {
            let image = read_image(&p.image, size, audit)?;
            let mut mask = Array2::<f32>::zeros((size, size));
            for m in &p.masks {
                let part = read_mask(m, Some(size), audit)?;
                mask.zip_mut_with(&part, |a: &mut f32, &b| *a = a.max(b));
            }
            Ok(Sample {
                name: p.name.clone(),
                image,
                mask,
            })
        })
        .collect()
}

impl DatasetIndex {
    pub fn load_train(&self, audit: &AuditLog) -> Result<Vec<Sample>> {
        load_pairs(&self.train, self.spec.resize, audit)
    }

    pub fn load_test(&self, audit: &AuditLog) -> Result<Vec<Sample>> {
        load_pairs(&self.test, self.spec.resize, audit)
    }

    /// Canonical paths of every file either split refers to.
    pub fn all_files(&self) -> BTreeSet<PathBuf> {
        self.train
            .iter()
            .chain(&self.test)
            .flat_map(|p| std::iter::once(&p.image).chain(&p.masks))
            .map(|p| p.canonicalize().unwrap_or_else(|_| p.clone()))
            .collect()
    }

    pub fn test_files(&self) -> BTreeSet<PathBuf> {
        self.test
            .iter()
            .flat_map(|p| std::iter::once(&p.image).chain(&p.masks))
            .map(|p| p.canonicalize().unwrap_or_else(|_| p.clone()))
            .collect()
    }

    pub fn train_files(&self) -> BTreeSet<PathBuf> {
        self.train
            .iter()
            .flat_map(|p| std::iter::once(&p.image).chain(&p.masks))
            .map(|p| p.canonicalize().unwrap_or_else(|_| p.clone()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Indexes and loads both splits.
pub fn load_dataset(spec: &DatasetSpec, audit: &AuditLog) -> Result<LoadedDataset> {
    let index = index_dataset(spec)?;
    Ok(LoadedDataset {
        train: index.load_train(audit)?,
        test: index.load_test(audit)?,
    })
}

/// Seeded carve-out of `⌊n·fraction⌋` validation items; both parts keep input order.
pub fn make_validation_split<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("validation fraction {fraction} outside (0, 1)")));
    }
    let n_val = (items.len() as f64 * fraction).floor() as usize;
    if n_val == 0 || n_val == items.len() {
        return Err(Error::InvalidArgument(format!(
            "validation fraction {fraction} of {} items leaves an empty split",
            items.len()
        )));
    }
    Ok(seeded_pick(items, n_val, seed))
}

/// Stacks samples into a unit-range image batch and a mask batch.
pub fn make_batch(samples: &[&Sample]) -> Result<(Image, Mask)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let imgs: Vec<_> = samples.iter().map(|s| s.image.view().insert_axis(Axis(0))).collect();
    let masks: Vec<_> = samples
        .iter()
        .map(|s| s.mask.view().insert_axis(Axis(0)).insert_axis(Axis(0)))
        .collect();
    let image: Array4<f32> = ndarray::concatenate(Axis(0), &imgs).map_err(|e| Error::Shape(e.to_string()))?;
    let mask: Array4<f32> = ndarray::concatenate(Axis(0), &masks).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((Image::new(image, ValueRange::Unit)?, Mask::new(mask)?))
}

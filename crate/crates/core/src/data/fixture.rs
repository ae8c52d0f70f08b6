//! Tiny synthetic segmentation datasets: a tinted ellipse on a textured background.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub size: u32,
    pub seed: u64,
    /// Object brighter than the background when true, darker otherwise.
    pub bright_object: bool,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            n_train: 8,
            n_test: 4,
            size: 32,
            seed: 2333,
            bright_object: true,
        }
    }
}

fn save<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn sample(size: u32, rng: &mut ChaCha8Rng, bright: bool) -> (RgbImage, GrayImage) {
    let s = size as f64;
    let cy = rng.random_range(0.35..0.65) * s;
    let cx = rng.random_range(0.35..0.65) * s;
    let ry = rng.random_range(0.15..0.3) * s;
    let rx = rng.random_range(0.15..0.3) * s;
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (sin, cos) = theta.sin_cos();
    let base = rng.random_range(0.3..0.5);
    let slope = rng.random_range(-0.15..0.15);
    let tint = [rng.random_range(0.8..1.0), rng.random_range(0.6..0.9), rng.random_range(0.6..0.9)];
    let mut img = RgbImage::new(size, size);
    let mut mask = GrayImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let u = (cos * dx + sin * dy) / rx;
            let v = (-sin * dx + cos * dy) / ry;
            let inside = u * u + v * v <= 1.0;
            let bg = base + slope * (y as f64 / s - 0.5);
            let level = if inside == bright { bg + 0.35 } else { bg - 0.1 };
            let mut px = [0u8; 3];
            for (c, p) in px.iter_mut().enumerate() {
                let noise = rng.random_range(-0.04..0.04);
                let t = if inside { tint[c] } else { 1.0 };
                *p = ((level * t + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.put_pixel(x, y, Rgb(px));
            mask.put_pixel(x, y, Luma([if inside { 255 } else { 0 }]));
        }
    }
    (img, mask)
}

/// Writes `train/{images,masks}` and `test/{images,masks}` under `root`.
pub fn write_fixture(root: &Path, spec: &FixtureSpec) -> Result<()> {
    if spec.size == 0 || spec.size % 8 != 0 {
        return Err(Error::InvalidArgument(format!("fixture size {} must be a positive multiple of 8", spec.size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for (split, n) in [("train", spec.n_train), ("test", spec.n_test)] {
        let img_dir = root.join(split).join("images");
        let mask_dir = root.join(split).join("masks");
        for d in [&img_dir, &mask_dir] {
            std::fs::create_dir_all(d).map_err(io_err(d))?;
        }
        for i in 0..n {
            let (img, mask) = sample(spec.size, &mut rng, spec.bright_object);
            let name = format!("{split}_{i:04}.png");
            save(&img, &img_dir.join(&name))?;
            save(&mask, &mask_dir.join(&name))?;
        }
    }
    Ok(())
}

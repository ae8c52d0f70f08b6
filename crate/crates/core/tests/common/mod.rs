#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wavegms_autodiff::{no_grad, Param};
use wavegms_core::data::{write_fixture, FixtureSpec, Sample};
use wavegms_core::losses::total_loss;
use wavegms_core::pipeline::{ModelConfig, WaveGms};
use wavegms_core::types::{Image, Mask, ValueRange};
use wavegms_core::vae::FrozenVae;

/// Disk with a textured background; deterministic in `k`.
pub fn disk_sample(k: usize, size: usize) -> Sample {
    let c = size as f32 / 2.0 + (k % 3) as f32 - 1.0;
    let r = size as f32 / 4.0 + (k % 2) as f32;
    let mask = Array2::from_shape_fn((size, size), |(i, j)| {
        let d = ((i as f32 + 0.5 - c).powi(2) + (j as f32 + 0.5 - c).powi(2)).sqrt();
        if d < r {
            1.0
        } else {
            0.0
        }
    });
    let image = Array3::from_shape_fn((3, size, size), |(ch, i, j)| {
        0.25 + 0.5 * mask[[i, j]] + 0.1 * (((i * 5 + j * 3 + ch + k) % 7) as f32 / 7.0)
    });
    Sample {
        name: format!("disk{k:03}"),
        image,
        mask,
    }
}

pub fn disk_samples(n: usize, size: usize) -> Vec<Sample> {
    (0..n).map(|k| disk_sample(k, size)).collect()
}

pub fn fixture(root: &Path, n_train: usize, n_test: usize, size: u32, seed: u64) {
    write_fixture(
        root,
        &FixtureSpec {
            n_train,
            n_test,
            size,
            seed,
            bright_object: true,
        },
    )
    .unwrap();
}

#[derive(Debug)]
pub struct FdResult {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl FdResult {
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < 1e-9 {
            (self.analytic - self.numeric).abs()
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

/// Central differences with step `h` on `count` random elements of parameters under `prefix`,
/// against autodiff, for the full training loss of a float64 model.
pub fn fd_check(prefix: &str, count: usize, h: f64, seed: u64) -> Vec<FdResult> {
    let vae = Arc::new(FrozenVae::<f64>::random_stand_in(11).unwrap());
    let model = WaveGms::<f64>::new(ModelConfig::default(), vae, 2333).unwrap();
    let size = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = Array4::from_shape_fn((1, 3, size, size), |_| rng.random_range(0.0..1.0f32));
    let mask = Array4::from_shape_fn((1, 1, size, size), |(_, _, i, j)| {
        if (4..12).contains(&i) && (3..11).contains(&j) {
            1.0
        } else {
            0.0
        }
    });
    let img = Image::new(img, ValueRange::Unit).unwrap();
    let mask = Mask::new(mask).unwrap();
    let loss_of = |m: &WaveGms<f64>| {
        let f = m.forward_train(&img, &mask, true).unwrap();
        total_loss(&f.bundle, &mask, &f.z_m, &f.z_mr, f.z_i.as_ref().unwrap(), true).unwrap()
    };
    let (loss, _) = loss_of(&model);
    let grads = loss.backward().unwrap();
    drop(loss);

    let params: Vec<Param<f64>> = model
        .store()
        .params()
        .into_iter()
        .filter(|p| p.name().starts_with(prefix))
        .collect();
    let total: usize = params.iter().map(|p| p.numel()).sum();
    let mut out = Vec::new();
    for _ in 0..count {
        let mut k = rng.random_range(0..total);
        let p = params
            .iter()
            .find(|p| {
                if k < p.numel() {
                    true
                } else {
                    k -= p.numel();
                    false
                }
            })
            .unwrap();
        let analytic = grads.param(p).map(|g| g.as_slice().unwrap()[k]).unwrap_or(0.0);
        let eval = |delta: f64| {
            p.update(|a| a.as_slice_mut().unwrap()[k] += delta);
            let v = no_grad(|| loss_of(&model).1.total);
            p.update(|a| a.as_slice_mut().unwrap()[k] -= delta);
            v
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        out.push(FdResult {
            name: p.name().to_string(),
            index: k,
            analytic,
            numeric,
        });
    }
    out
}

//! Paired geometric augmentation and HSV colour jitter.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Rotation angle drawn uniformly from `[-rotation_degrees, rotation_degrees]`.
    pub rotation_degrees: f64,
    /// Hue shift drawn from `[-hue, hue]`, in turns.
    pub hue: f64,
    /// Saturation scaled by a factor drawn from `[1 - saturation, 1 + saturation]`.
    pub saturation: f64,
    /// Value scaled by a factor drawn from `[1 - value, 1 + value]`.
    pub value: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotation_degrees: 15.0,
            hue: 0.02,
            saturation: 0.2,
            value: 0.2,
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        AugmentationPolicy {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotation_degrees: 0.0,
            hue: 0.0,
            saturation: 0.0,
            value: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("hflip_prob", self.hflip_prob), ("vflip_prob", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} = {p} is not a probability")));
            }
        }
        for (name, r) in [
            ("rotation_degrees", self.rotation_degrees),
            ("hue", self.hue),
            ("saturation", self.saturation),
            ("value", self.value),
        ] {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("augment.{name} = {r} must be a finite non-negative range")));
            }
        }
        if self.hue > 0.5 || self.saturation > 1.0 || self.value > 1.0 {
            return Err(Error::Config("augment: hue <= 0.5, saturation <= 1 and value <= 1".into()));
        }
        Ok(())
    }
}

/// Independent stream for one sample of one epoch; worker count does not affect it.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    fn mix(mut z: u64) -> u64 {
        // splitmix64 finalizer
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(epoch ^ mix(index))))
}

fn symmetric(rng: &mut impl Rng, r: f64) -> f64 {
    if r > 0.0 {
        rng.random_range(-r..=r)
    } else {
        0.0
    }
}

/// Draws every random quantity up front so the stream consumption does not depend on the outcome.
struct Draw {
    hflip: bool,
    vflip: bool,
    angle: f64,
    dh: f64,
    fs: f64,
    fv: f64,
}

/// Applies one random draw of `policy` to an image `[3, H, W]` in `[0, 1]` and its mask `[H, W]`.
pub fn augment(
    image: &Array3<f32>,
    mask: &Array2<f32>,
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> (Array3<f32>, Array2<f32>) {
    let d = Draw {
        hflip: rng.random::<f64>() < policy.hflip_prob,
        vflip: rng.random::<f64>() < policy.vflip_prob,
        angle: symmetric(rng, policy.rotation_degrees),
        dh: symmetric(rng, policy.hue),
        fs: 1.0 + symmetric(rng, policy.saturation),
        fv: 1.0 + symmetric(rng, policy.value),
    };
    let mut img = image.clone();
    let mut m = mask.clone();
    if d.hflip {
        img.invert_axis(Axis(2));
        m.invert_axis(Axis(1));
    }
    if d.vflip {
        img.invert_axis(Axis(1));
        m.invert_axis(Axis(0));
    }
    if d.angle != 0.0 {
        img = rotate_image(&img, d.angle);
        m = rotate_mask(&m, d.angle);
    }
    if d.dh != 0.0 || d.fs != 1.0 || d.fv != 1.0 {
        hsv_jitter(&mut img, d.dh, d.fs, d.fv);
    }
    (img, m)
}

pub fn hflip(image: &Array3<f32>, mask: &Array2<f32>) -> (Array3<f32>, Array2<f32>) {
    let mut img = image.clone();
    let mut m = mask.clone();
    img.invert_axis(Axis(2));
    m.invert_axis(Axis(1));
    (img.as_standard_layout().to_owned(), m.as_standard_layout().to_owned())
}

/// Source coordinates for output pixel `(i, j)` under a rotation by `deg` about the centre.
fn source(i: usize, j: usize, h: usize, w: usize, cos: f64, sin: f64) -> (f64, f64) {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let y = i as f64 - cy;
    let x = j as f64 - cx;
    (cos * y - sin * x + cy, sin * y + cos * x + cx)
}

fn rotate_image(img: &Array3<f32>, deg: f64) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let (sin, cos) = deg.to_radians().sin_cos();
    let mut out = Array3::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let (sy, sx) = source(i, j, h, w, cos, sin);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
            for ch in 0..c {
                let at = |y: f64, x: f64| -> f32 {
                    if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
                        0.0
                    } else {
                        img[[ch, y as usize, x as usize]]
                    }
                };
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
                let bottom = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
                out[[ch, i, j]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

fn rotate_mask(mask: &Array2<f32>, deg: f64) -> Array2<f32> {
    let (h, w) = mask.dim();
    let (sin, cos) = deg.to_radians().sin_cos();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (sy, sx) = source(i, j, h, w, cos, sin);
        let (y, x) = (sy.round(), sx.round());
        if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
            0.0
        } else if mask[[y as usize, x as usize]] > 0.5 {
            1.0
        } else {
            0.0
        }
    })
}

pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn hsv_jitter(img: &mut Array3<f32>, dh: f64, fs: f64, fv: f64) {
    let (_, h, w) = img.dim();
    for i in 0..h {
        for j in 0..w {
            let (hh, s, v) = rgb_to_hsv(img[[0, i, j]], img[[1, i, j]], img[[2, i, j]]);
            let (r, g, b) = hsv_to_rgb(
                hh + dh as f32,
                (s * fs as f32).clamp(0.0, 1.0),
                (v * fv as f32).clamp(0.0, 1.0),
            );
            img[[0, i, j]] = r;
            img[[1, i, j]] = g;
            img[[2, i, j]] = b;
        }
    }
}

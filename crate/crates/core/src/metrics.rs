//! Overlap and boundary-distance metrics for binary masks.
//!
//! Boundary pixels are foreground pixels with a background 4-neighbour or lying on the image edge.
//! HD95 pools the nearest-boundary distances in both directions and takes the 95th percentile with
//! linear interpolation. Both masks empty gives HD95 0; exactly one empty gives the image diagonal.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(pred: ArrayView2<'_, f32>, gt: ArrayView2<'_, f32>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("mask shapes differ: {:?} vs {:?}", pred.dim(), gt.dim())));
    }
    for v in pred.iter().chain(gt.iter()) {
        if *v != 0.0 && *v != 1.0 {
            return Err(Error::NonBinary(*v));
        }
    }
    Ok(())
}

/// `(|P ∩ G|, |P|, |G|)`
fn counts(pred: ArrayView2<'_, f32>, gt: ArrayView2<'_, f32>) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        let (a, b) = (a == 1.0, b == 1.0);
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    (inter, p, g)
}

/// `2|P ∩ G| / (|P| + |G|)`; 1 when both are empty.
pub fn dice(pred: ArrayView2<'_, f32>, gt: ArrayView2<'_, f32>) -> Result<f64> {
    check_pair(pred, gt)?;
    let (i, p, g) = counts(pred, gt);
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * i as f64 / (p + g) as f64)
}

/// `|P ∩ G| / |P ∪ G|`; 1 when both are empty.
pub fn iou(pred: ArrayView2<'_, f32>, gt: ArrayView2<'_, f32>) -> Result<f64> {
    check_pair(pred, gt)?;
    let (i, p, g) = counts(pred, gt);
    let union = p + g - i;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(i as f64 / union as f64)
}

pub fn boundary_pixels(mask: ArrayView2<'_, f32>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let fg = |i: usize, j: usize| mask[[i, j]] == 1.0;
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if !fg(i, j) {
                continue;
            }
            let edge = i == 0 || j == 0 || i + 1 == h || j + 1 == w;
            if edge || !fg(i - 1, j) || !fg(i + 1, j) || !fg(i, j - 1) || !fg(i, j + 1) {
                out.push((i, j));
            }
        }
    }
    out
}

const FAR: f64 = 1e20;

/// Exact squared Euclidean distance transform of a 1-d sampled function (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let meet = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    for q in 1..n {
        let mut s = meet(q, v[k]);
        // z[0] is -inf, so this stops at k = 0 at the latest
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel to the nearest of `sites`.
pub fn squared_distance_map(h: usize, w: usize, sites: &[(usize, usize)]) -> Array2<f64> {
    let mut grid = Array2::from_elem((h, w), FAR);
    for &(i, j) in sites {
        grid[[i, j]] = 0.0;
    }
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for j in 0..w {
        for i in 0..h {
            col[i] = grid[[i, j]];
        }
        edt_1d(&col, &mut tmp);
        for i in 0..h {
            grid[[i, j]] = tmp[i];
        }
    }
    let mut row = vec![0.0; w];
    let mut tmp = vec![0.0; w];
    for i in 0..h {
        for j in 0..w {
            row[j] = grid[[i, j]];
        }
        edt_1d(&row, &mut tmp);
        for j in 0..w {
            grid[[i, j]] = tmp[j];
        }
    }
    grid
}

/// Percentile `q` in `[0, 100]` with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

/// Symmetric 95th-percentile boundary distance in pixels.
pub fn hd95(pred: ArrayView2<'_, f32>, gt: ArrayView2<'_, f32>) -> Result<f64> {
    check_pair(pred, gt)?;
    let (h, w) = pred.dim();
    let bp = boundary_pixels(pred);
    let bg = boundary_pixels(gt);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(((h * h + w * w) as f64).sqrt()),
        _ => {}
    }
    let to_gt = squared_distance_map(h, w, &bg);
    let to_pred = squared_distance_map(h, w, &bp);
    let mut d: Vec<f64> = bp
        .iter()
        .map(|&(i, j)| to_gt[[i, j]].sqrt())
        .chain(bg.iter().map(|&(i, j)| to_pred[[i, j]].sqrt()))
        .collect();
    Ok(percentile(&mut d, 95.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub dice: f64,
    pub iou: f64,
    pub hd95: f64,
}

/// Dataset averages: DSC and IoU in percent, HD95 in pixels, each rounded to two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dsc: f64,
    pub iou: f64,
    pub hd95: f64,
    pub n_images: usize,
    pub per_image: Vec<ImageMetrics>,
}

pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

pub fn evaluate_named(names: &[String], preds: &[Array2<f32>], gts: &[Array2<f32>]) -> Result<MetricsReport> {
    if preds.len() != gts.len() || names.len() != preds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions, {} ground truths, {} names",
            preds.len(),
            gts.len(),
            names.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no images to evaluate".into()));
    }
    let per_image = names
        .iter()
        .zip(preds.iter().zip(gts))
        .map(|(name, (p, g))| {
            Ok(ImageMetrics {
                name: name.clone(),
                dice: dice(p.view(), g.view())?,
                iou: iou(p.view(), g.view())?,
                hd95: hd95(p.view(), g.view())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_image.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        dsc: round2(100.0 * mean(|m| m.dice)),
        iou: round2(100.0 * mean(|m| m.iou)),
        hd95: round2(mean(|m| m.hd95)),
        n_images: per_image.len(),
        per_image,
    })
}

pub fn evaluate_dataset(preds: &[Array2<f32>], gts: &[Array2<f32>]) -> Result<MetricsReport> {
    let names: Vec<String> = (0..preds.len()).map(|i| format!("{i:05}")).collect();
    evaluate_named(&names, preds, gts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Array2<f32> {
        let mut m = Array2::zeros((h, w));
        for &p in on {
            m[p] = 1.0;
        }
        m
    }

    /// All-pairs nearest boundary distances.
    fn brute_hd95(p: &Array2<f32>, g: &Array2<f32>) -> f64 {
        let (h, w) = p.dim();
        let bp = boundary_pixels(p.view());
        let bg = boundary_pixels(g.view());
        if bp.is_empty() && bg.is_empty() {
            return 0.0;
        }
        if bp.is_empty() || bg.is_empty() {
            return ((h * h + w * w) as f64).sqrt();
        }
        let nearest = |a: (usize, usize), set: &[(usize, usize)]| {
            set.iter()
                .map(|b| {
                    let dy = a.0 as f64 - b.0 as f64;
                    let dx = a.1 as f64 - b.1 as f64;
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        };
        let mut d: Vec<f64> = bp.iter().map(|&a| nearest(a, &bg)).chain(bg.iter().map(|&a| nearest(a, &bp))).collect();
        d.sort_by(|a, b| a.total_cmp(b));
        let pos = 0.95 * (d.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(d.len() - 1);
        d[lo] + (pos - lo as f64) * (d[hi] - d[lo])
    }

    #[test]
    fn counting_examples() {
        let p = mask(4, 4, &[(0, 0), (0, 1), (0, 2), (0, 3), (1, 0), (1, 1), (1, 2), (1, 3)]);
        let g = mask(4, 4, &[(1, 0), (1, 1), (1, 2), (1, 3), (2, 0), (2, 1), (2, 2), (2, 3)]);
        assert_eq!(dice(p.view(), g.view()).unwrap(), 0.5);
        assert!((iou(p.view(), g.view()).unwrap() - 4.0 / 12.0).abs() < 1e-12);
        assert_eq!(dice(p.view(), p.view()).unwrap(), 1.0);
        assert_eq!(iou(p.view(), p.view()).unwrap(), 1.0);
        let far = mask(4, 4, &[(3, 3)]);
        assert_eq!(dice(far.view(), mask(4, 4, &[(0, 0)]).view()).unwrap(), 0.0);
    }

    #[test]
    fn empty_sentinels() {
        let e = Array2::zeros((6, 8));
        let one = mask(6, 8, &[(2, 2)]);
        assert_eq!(dice(e.view(), e.view()).unwrap(), 1.0);
        assert_eq!(iou(e.view(), e.view()).unwrap(), 1.0);
        assert_eq!(hd95(e.view(), e.view()).unwrap(), 0.0);
        assert_eq!(hd95(e.view(), one.view()).unwrap(), 10.0);
        assert_eq!(hd95(one.view(), e.view()).unwrap(), 10.0);
    }

    #[test]
    fn single_pixel_geometry() {
        let a = mask(8, 8, &[(0, 0)]);
        let b = mask(8, 8, &[(3, 4)]);
        assert_eq!(hd95(a.view(), b.view()).unwrap(), 5.0);
        assert_eq!(hd95(a.view(), a.view()).unwrap(), 0.0);
    }

    #[test]
    fn non_binary_and_shape_errors() {
        let mut m = Array2::zeros((4, 4));
        m[[1, 1]] = 0.5;
        assert!(matches!(dice(m.view(), m.view()), Err(Error::NonBinary(_))));
        assert!(hd95(Array2::zeros((4, 4)).view(), Array2::zeros((4, 5)).view()).is_err());
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        assert!((percentile(&mut v, 95.0) - 3.85).abs() < 1e-12);
        let mut one = vec![7.0];
        assert_eq!(percentile(&mut one, 95.0), 7.0);
    }

    #[test]
    fn interior_pixels_are_not_boundary() {
        let full = Array2::from_elem((5, 5), 1.0f32);
        assert_eq!(boundary_pixels(full.view()).len(), 16);
        let mut blob = Array2::zeros((7, 7));
        for i in 1..6 {
            for j in 1..6 {
                blob[[i, j]] = 1.0;
            }
        }
        let b = boundary_pixels(blob.view());
        assert_eq!(b.len(), 16);
        assert!(!b.contains(&(3, 3)));
    }

    #[test]
    fn dataset_aggregate() {
        let a = mask(4, 4, &[(0, 0)]);
        let b = mask(4, 4, &[(3, 3)]);
        let r = evaluate_dataset(&[a.clone(), a.clone()], &[a.clone(), a.clone()]).unwrap();
        assert_eq!((r.dsc, r.iou, r.hd95, r.n_images), (100.0, 100.0, 0.0, 2));
        let r = evaluate_dataset(&[a.clone(), a.clone()], &[a.clone(), b]).unwrap();
        assert_eq!(r.dsc, 50.0);
        assert!(evaluate_dataset(&[a.clone()], &[]).is_err());
        assert!(evaluate_dataset(&[], &[]).is_err());
    }

    fn random_mask(h: usize, w: usize, density: f64, seed: u64) -> Array2<f32> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| if rng.random_bool(density) { 1.0 } else { 0.0 })
    }

    proptest! {
        #[test]
        fn hd95_matches_brute_force(h in 1usize..=16, w in 1usize..=16, dp in 0.0f64..0.6, dg in 0.0f64..0.6, seed in 0u64..u64::MAX) {
            let p = random_mask(h, w, dp, seed);
            let g = random_mask(h, w, dg, seed ^ 0x9e37);
            let fast = hd95(p.view(), g.view()).unwrap();
            prop_assert!((fast - brute_hd95(&p, &g)).abs() <= 1e-9);
            prop_assert!((fast - hd95(g.view(), p.view()).unwrap()).abs() <= 1e-9);
        }

        #[test]
        fn overlap_identities(h in 1usize..=16, w in 1usize..=16, seed in 0u64..u64::MAX) {
            let p = random_mask(h, w, 0.4, seed);
            let g = random_mask(h, w, 0.4, seed.wrapping_add(1));
            let d = dice(p.view(), g.view()).unwrap();
            let j = iou(p.view(), g.view()).unwrap();
            prop_assert!((j - d / (2.0 - d)).abs() <= 1e-9);
            prop_assert!(j <= d + 1e-12);
            prop_assert_eq!(d, dice(g.view(), p.view()).unwrap());
            prop_assert_eq!(j, iou(g.view(), p.view()).unwrap());
        }

        #[test]
        fn translation_invariance(seed in 0u64..u64::MAX, dy in 0usize..4, dx in 0usize..4) {
            let p = random_mask(6, 6, 0.5, seed);
            let g = random_mask(6, 6, 0.5, seed ^ 7);
            let shift = |m: &Array2<f32>| {
                let mut out = Array2::zeros((12, 12));
                out.slice_mut(ndarray::s![dy..dy + 6, dx..dx + 6]).assign(m);
                out
            };
            let pad = |m: &Array2<f32>| {
                let mut out = Array2::zeros((12, 12));
                out.slice_mut(ndarray::s![0..6, 0..6]).assign(m);
                out
            };
            let (p0, g0) = (pad(&p), pad(&g));
            let (p1, g1) = (shift(&p), shift(&g));
            prop_assert_eq!(dice(p0.view(), g0.view()).unwrap(), dice(p1.view(), g1.view()).unwrap());
            prop_assert_eq!(iou(p0.view(), g0.view()).unwrap(), iou(p1.view(), g1.view()).unwrap());
        }
    }
}

//! Orthonormal 2-d Haar analysis and synthesis.
//!
//! For a 2x2 block `[[a, b], [c, d]]` (row-major, `a` top-left):
//!
//! ```text
//! LL = (a + b + c + d) / 2
//! LH = (a + b - c - d) / 2   low-pass along rows, high-pass down columns: horizontal edges
//! HL = (a - b + c - d) / 2   vertical edges
//! HH = (a - b - c + d) / 2   diagonal detail
//! ```
//!
//! The 12-channel stack of a level is `[LL | LH | HL | HH]`, each band holding the input channels in order.

use ndarray::{concatenate, s, Array4, ArrayView4, Axis, Zip};
use wavegms_autodiff::Float;

use crate::error::{Error, Result};
use crate::types::{Image, SPATIAL_MULTIPLE};

pub const NUM_LEVELS: usize = 3;
pub const BANDS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct HaarLevel<F> {
    pub ll: Array4<F>,
    pub lh: Array4<F>,
    pub hl: Array4<F>,
    pub hh: Array4<F>,
    /// 1-based depth of this level.
    pub level: usize,
}

impl<F: Float> HaarLevel<F> {
    pub fn channels(&self) -> usize {
        self.ll.dim().1
    }

    fn check(&self) -> Result<()> {
        let d = self.ll.dim();
        if self.lh.dim() != d || self.hl.dim() != d || self.hh.dim() != d {
            return Err(Error::Shape(format!(
                "subband shapes differ: LL {:?}, LH {:?}, HL {:?}, HH {:?}",
                d,
                self.lh.dim(),
                self.hl.dim(),
                self.hh.dim()
            )));
        }
        Ok(())
    }

    /// `[B, 4C, h, w]` in band order LL, LH, HL, HH.
    pub fn stack(&self) -> Array4<F> {
        concatenate(Axis(1), &[self.ll.view(), self.lh.view(), self.hl.view(), self.hh.view()])
            .expect("subbands share a shape")
    }

    pub fn from_stack(stack: ArrayView4<'_, F>, level: usize) -> Result<Self> {
        let c4 = stack.dim().1;
        if c4 % BANDS != 0 {
            return Err(Error::Shape(format!("stack channel count {c4} is not a multiple of {BANDS}")));
        }
        let c = c4 / BANDS;
        let band = |k: usize| stack.slice(s![.., k * c..(k + 1) * c, .., ..]).to_owned();
        Ok(HaarLevel {
            ll: band(0),
            lh: band(1),
            hl: band(2),
            hh: band(3),
            level,
        })
    }
}

/// One analysis level. Both spatial sizes must be even.
pub fn dwt2_haar<F: Float>(x: ArrayView4<'_, F>) -> Result<HaarLevel<F>> {
    let (b, c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("Haar analysis needs even sizes, got {h}x{w}")));
    }
    let half = F::cast(0.5);
    let a = x.slice(s![.., .., ..;2, ..;2]);
    let bb = x.slice(s![.., .., ..;2, 1..;2]);
    let cc = x.slice(s![.., .., 1..;2, ..;2]);
    let d = x.slice(s![.., .., 1..;2, 1..;2]);
    let shape = (b, c, h / 2, w / 2);
    let mut out = HaarLevel {
        ll: Array4::zeros(shape),
        lh: Array4::zeros(shape),
        hl: Array4::zeros(shape),
        hh: Array4::zeros(shape),
        level: 1,
    };
    Zip::from(&mut out.ll)
        .and(&mut out.lh)
        .and(&mut out.hl)
        .and(&mut out.hh)
        .and(&a)
        .and(&bb)
        .for_each(|ll, lh, hl, hh, &a, &b| {
            // c and d are folded in below; Zip is limited to six producers.
            *ll = a + b;
            *lh = a + b;
            *hl = a - b;
            *hh = a - b;
        });
    Zip::from(&mut out.ll)
        .and(&mut out.lh)
        .and(&mut out.hl)
        .and(&mut out.hh)
        .and(&cc)
        .and(&d)
        .for_each(|ll, lh, hl, hh, &c, &d| {
            *ll = (*ll + c + d) * half;
            *lh = (*lh - c - d) * half;
            *hl = (*hl + c - d) * half;
            *hh = (*hh - c + d) * half;
        });
    Ok(out)
}

/// Exact inverse of [`dwt2_haar`].
pub fn idwt2_haar<F: Float>(level: &HaarLevel<F>) -> Result<Array4<F>> {
    level.check()?;
    let (b, c, h, w) = level.ll.dim();
    let half = F::cast(0.5);
    let mut out = Array4::zeros((b, c, 2 * h, 2 * w));
    let bands = (&level.ll, &level.lh, &level.hl, &level.hh);
    for (di, dj, sh, sv) in [(0, 0, 1.0, 1.0), (0, 1, 1.0, -1.0), (1, 0, -1.0, 1.0), (1, 1, -1.0, -1.0)] {
        // sh: sign of LH (row parity), sv: sign of HL (column parity)
        let (sh, sv, sd) = (F::cast(sh), F::cast(sv), F::cast(sh * sv));
        let mut dst = out.slice_mut(s![.., .., di..;2, dj..;2]);
        Zip::from(&mut dst)
            .and(bands.0)
            .and(bands.1)
            .and(bands.2)
            .and(bands.3)
            .for_each(|o, &ll, &lh, &hl, &hh| *o = (ll + sh * lh + sv * hl + sd * hh) * half);
    }
    Ok(out)
}

/// Runs `levels` analysis steps, each on the previous LL band.
pub fn decompose_levels<F: Float>(x: ArrayView4<'_, F>, levels: usize) -> Result<Vec<HaarLevel<F>>> {
    let mut out: Vec<HaarLevel<F>> = Vec::with_capacity(levels);
    for l in 1..=levels {
        let mut lv = match out.last() {
            None => dwt2_haar(x)?,
            Some(prev) => dwt2_haar(prev.ll.view())?,
        };
        lv.level = l;
        out.push(lv);
    }
    Ok(out)
}

/// Rebuilds the input from the deepest level and the detail bands of every shallower level.
///
/// Only the LL band of the last level is used; shallower LL bands are recomputed.
pub fn reconstruct<F: Float>(levels: &[HaarLevel<F>]) -> Result<Array4<F>> {
    let Some(last) = levels.last() else {
        return Err(Error::InvalidArgument("no levels to reconstruct".into()));
    };
    let mut cur = idwt2_haar(last)?;
    for lv in levels.iter().rev().skip(1) {
        let step = HaarLevel {
            ll: cur,
            lh: lv.lh.clone(),
            hl: lv.hl.clone(),
            hh: lv.hh.clone(),
            level: lv.level,
        };
        cur = idwt2_haar(&step)?;
    }
    Ok(cur)
}

/// Three-level subband stacks of an image; level `l` is `[B, 12, H/2^l, W/2^l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiResDecomposition<F> {
    levels: Vec<Array4<F>>,
}

impl<F: Float> MultiResDecomposition<F> {
    pub fn new(levels: Vec<Array4<F>>) -> Result<Self> {
        if levels.len() != NUM_LEVELS {
            return Err(Error::Shape(format!("expected {NUM_LEVELS} levels, got {}", levels.len())));
        }
        for (i, lv) in levels.iter().enumerate() {
            let (b, c, h, w) = lv.dim();
            if c != 12 {
                return Err(Error::Shape(format!("level {} has {c} channels, expected 12", i + 1)));
            }
            if i > 0 {
                let (pb, _, ph, pw) = levels[i - 1].dim();
                if pb != b || ph != 2 * h || pw != 2 * w {
                    return Err(Error::Shape(format!(
                        "level {} is {h}x{w} but level {i} is {ph}x{pw}",
                        i + 1
                    )));
                }
            }
        }
        Ok(MultiResDecomposition { levels })
    }

    /// Stack of level `l` (1-based).
    pub fn level(&self, l: usize) -> &Array4<F> {
        &self.levels[l - 1]
    }

    pub fn levels(&self) -> &[Array4<F>] {
        &self.levels
    }

    pub fn haar_levels(&self) -> Vec<HaarLevel<F>> {
        self.levels
            .iter()
            .enumerate()
            .map(|(i, s)| HaarLevel::from_stack(s.view(), i + 1).expect("12 channels checked"))
            .collect()
    }
}

/// Three-level decomposition of an image batch.
pub fn multires_decompose<F: Float>(img: &Image) -> Result<MultiResDecomposition<F>> {
    if img.height() % SPATIAL_MULTIPLE != 0 || img.width() % SPATIAL_MULTIPLE != 0 {
        return Err(Error::Shape(format!("{}x{} not divisible by 8", img.height(), img.width())));
    }
    let x = img.data().mapv(|v| F::cast(v as f64));
    let levels = decompose_levels(x.view(), NUM_LEVELS)?;
    MultiResDecomposition::new(levels.iter().map(HaarLevel::stack).collect())
}

//! Spatial ops on NCHW tensors.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView3, Axis, Ix4};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Conv2dOpts { stride: 1, padding: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<F: Float>(x: ArrayView3<'_, F>, g: &Geometry) -> Array2<F> {
    let mut cols = Array2::<F>::zeros((g.c * g.kh * g.kw, g.ho * g.wo));
    let xs = x.as_slice().expect("standard layout input");
    let out = cols.as_slice_mut().expect("fresh array");
    let plane = g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * g.ho * g.wo..(row + 1) * g.ho * g.wo];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = c * plane + iy as usize * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = xs[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Float>(cols: ArrayView2<'_, F>, g: &Geometry) -> Array3<F> {
    let mut x = Array3::<F>::zeros((g.c, g.h, g.w));
    let cs = cols.as_slice().expect("standard layout cols");
    let xs = x.as_slice_mut().expect("fresh array");
    let plane = g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cs[row * g.ho * g.wo..(row + 1) * g.ho * g.wo];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = c * plane + iy as usize * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            xs[dst_row + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn as4<F: Float>(a: &ArrayD<F>) -> ndarray::ArrayView4<'_, F> {
    a.view().into_dimensionality::<Ix4>().expect("4-d value")
}

impl<F: Float> Tensor<F> {
    /// 2-D cross-correlation. `self` is `[N, C, H, W]`, `weight` is `[O, C, KH, KW]`, `bias` is `[O]`.
    pub fn conv2d(&self, weight: &Tensor<F>, bias: Option<&Tensor<F>>, opts: Conv2dOpts) -> Result<Tensor<F>> {
        let (n, c, h, w) = self.dims4()?;
        let (o, wc, kh, kw) = weight.dims4()?;
        if wc != c {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels but weight expects {wc} ({:?} vs {:?})",
                self.shape(),
                weight.shape()
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(Error::Shape(format!("conv2d: bias {:?} for {o} outputs", b.shape())));
            }
        }
        if opts.stride == 0 || h + 2 * opts.padding < kh || w + 2 * opts.padding < kw {
            return Err(Error::Shape(format!("conv2d: kernel {kh}x{kw} does not fit {h}x{w}")));
        }
        let g = Geometry {
            c,
            h,
            w,
            kh,
            kw,
            stride: opts.stride,
            pad: opts.padding,
            ho: (h + 2 * opts.padding - kh) / opts.stride + 1,
            wo: (w + 2 * opts.padding - kw) / opts.stride + 1,
        };
        let x = self.view4()?;
        let wmat = weight
            .value()
            .view()
            .into_shape_with_order((o, c * kh * kw))
            .expect("standard layout weight");
        let mut out = Array4::<F>::zeros((n, o, g.ho, g.wo));
        for b in 0..n {
            let xb = x.index_axis(Axis(0), b);
            let mut ob = out
                .index_axis_mut(Axis(0), b)
                .into_shape_with_order((o, g.ho * g.wo))
                .expect("fresh array");
            if g.is_pointwise() {
                let cols = xb.into_shape_with_order((c, h * w)).expect("standard layout input");
                general_mat_mul(F::one(), &wmat, &cols, F::zero(), &mut ob);
            } else {
                let cols = im2col(xb, &g);
                general_mat_mul(F::one(), &wmat, &cols, F::zero(), &mut ob);
            }
        }
        if let Some(bv) = bias {
            let bv = bv.value().view().into_shape_with_order((1, o, 1, 1)).expect("1-d bias");
            out += &bv;
        }

        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        Ok(Tensor::from_op(
            out.into_dyn(),
            inputs,
            Box::new(move |grad, ins, _, needs| {
                let gout = as4(grad);
                let x = as4(ins[0]);
                let wmat = ins[1]
                    .view()
                    .into_shape_with_order((o, c * kh * kw))
                    .expect("standard layout weight");
                let mut dx = needs[0].then(|| Array4::<F>::zeros((n, c, h, w)));
                let mut dw = needs[1].then(|| Array2::<F>::zeros((o, c * kh * kw)));
                for b in 0..n {
                    let gb = gout
                        .index_axis(Axis(0), b)
                        .into_shape_with_order((o, g.ho * g.wo))
                        .expect("standard layout grad");
                    if let Some(dw) = dw.as_mut() {
                        let xb = x.index_axis(Axis(0), b);
                        if g.is_pointwise() {
                            let cols = xb.into_shape_with_order((c, h * w)).expect("standard layout");
                            general_mat_mul(F::one(), &gb, &cols.t(), F::one(), dw);
                        } else {
                            let cols = im2col(xb, &g);
                            general_mat_mul(F::one(), &gb, &cols.t(), F::one(), dw);
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut dcols = Array2::<F>::zeros((c * kh * kw, g.ho * g.wo));
                        general_mat_mul(F::one(), &wmat.t(), &gb, F::zero(), &mut dcols);
                        let dxb = if g.is_pointwise() {
                            dcols.into_shape_with_order((c, h, w)).expect("fresh array")
                        } else {
                            col2im(dcols.view(), &g)
                        };
                        dx.index_axis_mut(Axis(0), b).assign(&dxb);
                    }
                }
                let db = (needs.len() > 2 && needs[2]).then(|| {
                    gout.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn()
                });
                let mut res = vec![
                    dx.map(|a| a.into_dyn()),
                    dw.map(|a| a.into_shape_with_order((o, c, kh, kw)).expect("fresh").into_dyn()),
                ];
                if needs.len() > 2 {
                    res.push(db);
                }
                res
            }),
        ))
    }

    /// Non-overlapping 2x2 mean pooling.
    pub fn avg_pool2x2(&self) -> Result<Tensor<F>> {
        let (n, c, h, w) = self.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("avg_pool2x2 needs even size, got {h}x{w}")));
        }
        let x = self.view4()?;
        let quarter = F::cast(0.25);
        let out = Array4::from_shape_fn((n, c, h / 2, w / 2), |(b, ch, i, j)| {
            (x[[b, ch, 2 * i, 2 * j]]
                + x[[b, ch, 2 * i, 2 * j + 1]]
                + x[[b, ch, 2 * i + 1, 2 * j]]
                + x[[b, ch, 2 * i + 1, 2 * j + 1]])
                * quarter
        });
        Ok(Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |grad, _, _, _| {
                let g = as4(grad);
                let dx = Array4::from_shape_fn((n, c, h, w), |(b, ch, i, j)| g[[b, ch, i / 2, j / 2]] * quarter);
                vec![Some(dx.into_dyn())]
            }),
        ))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2x(&self) -> Result<Tensor<F>> {
        let (n, c, h, w) = self.dims4()?;
        let x = self.view4()?;
        let out = Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(b, ch, i, j)| x[[b, ch, i / 2, j / 2]]);
        Ok(Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |grad, _, _, _| {
                let g = as4(grad);
                let dx = Array4::from_shape_fn((n, c, h, w), |(b, ch, i, j)| {
                    g[[b, ch, 2 * i, 2 * j]]
                        + g[[b, ch, 2 * i, 2 * j + 1]]
                        + g[[b, ch, 2 * i + 1, 2 * j]]
                        + g[[b, ch, 2 * i + 1, 2 * j + 1]]
                });
                vec![Some(dx.into_dyn())]
            }),
        ))
    }

    /// Batched matrix product: `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn bmm(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (b, m, k, n) = match (self.shape(), other.shape()) {
            (&[b, m, k], &[b2, k2, n]) if b == b2 && k == k2 => (b, m, k, n),
            (a, o) => return Err(Error::Shape(format!("bmm: cannot multiply {a:?} by {o:?}"))),
        };
        let av = self.value().view().into_dimensionality::<ndarray::Ix3>().expect("3-d");
        let bv = other.value().view().into_dimensionality::<ndarray::Ix3>().expect("3-d");
        let mut out = Array3::<F>::zeros((b, m, n));
        for i in 0..b {
            let mut oi = out.index_axis_mut(Axis(0), i);
            general_mat_mul(F::one(), &av.index_axis(Axis(0), i), &bv.index_axis(Axis(0), i), F::zero(), &mut oi);
        }
        Ok(Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), other.clone()],
            Box::new(move |grad, ins, _, needs| {
                let g = grad.view().into_dimensionality::<ndarray::Ix3>().expect("3-d");
                let av = ins[0].view().into_dimensionality::<ndarray::Ix3>().expect("3-d");
                let bv = ins[1].view().into_dimensionality::<ndarray::Ix3>().expect("3-d");
                let da = needs[0].then(|| {
                    let mut da = Array3::<F>::zeros((b, m, k));
                    for i in 0..b {
                        let mut di = da.index_axis_mut(Axis(0), i);
                        general_mat_mul(F::one(), &g.index_axis(Axis(0), i), &bv.index_axis(Axis(0), i).t(), F::zero(), &mut di);
                    }
                    da.into_dyn()
                });
                let db = needs[1].then(|| {
                    let mut db = Array3::<F>::zeros((b, k, n));
                    for i in 0..b {
                        let mut di = db.index_axis_mut(Axis(0), i);
                        general_mat_mul(F::one(), &av.index_axis(Axis(0), i).t(), &g.index_axis(Axis(0), i), F::zero(), &mut di);
                    }
                    db.into_dyn()
                });
                vec![da, db]
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Tensor<F>> {
        let nd = self.ndim();
        if nd == 0 {
            return Err(Error::Shape("softmax of a scalar".into()));
        }
        let mut out = self.value().clone();
        softmax_rows(&mut out);
        Ok(Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |grad, _, y, _| {
                let mut dx = grad * y;
                for (mut drow, yrow) in dx.lanes_mut(Axis(nd - 1)).into_iter().zip(y.lanes(Axis(nd - 1))) {
                    let dot = drow.sum();
                    ndarray::Zip::from(&mut drow).and(&yrow).for_each(|d, &yv| *d = *d - yv * dot);
                }
                vec![Some(dx)]
            }),
        ))
    }
}

/// Softmax rows of a plain array; handy for inspecting attention maps.
pub fn softmax_rows<F: Float>(a: &mut ArrayD<F>) {
    let nd = a.ndim();
    for mut row in a.lanes_mut(Axis(nd - 1)) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

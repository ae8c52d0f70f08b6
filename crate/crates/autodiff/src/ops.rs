//! Elementwise, reduction and shape ops.

use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice, Zip};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// Sums `g` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn reduce_to_shape<F: Float>(g: &ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

fn binary<F: Float>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
    backward: crate::tensor::BackwardFn<F>,
) -> Result<Tensor<F>> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let av = a.value().broadcast(IxDyn(&shape)).expect("checked broadcast");
    let bv = b.value().broadcast(IxDyn(&shape)).expect("checked broadcast");
    let out = Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y));
    Ok(Tensor::from_op(out, vec![a.clone(), b.clone()], backward))
}

impl<F: Float> Tensor<F> {
    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        binary(
            self,
            other,
            |x, y| x + y,
            Box::new(|g, ins, _, needs| {
                vec![
                    needs[0].then(|| reduce_to_shape(g, ins[0].shape())),
                    needs[1].then(|| reduce_to_shape(g, ins[1].shape())),
                ]
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        binary(
            self,
            other,
            |x, y| x - y,
            Box::new(|g, ins, _, needs| {
                vec![
                    needs[0].then(|| reduce_to_shape(g, ins[0].shape())),
                    needs[1].then(|| reduce_to_shape(&g.mapv(|v| -v), ins[1].shape())),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        binary(
            self,
            other,
            |x, y| x * y,
            Box::new(|g, ins, _, needs| {
                vec![
                    needs[0].then(|| reduce_to_shape(&(g * ins[1]), ins[0].shape())),
                    needs[1].then(|| reduce_to_shape(&(g * ins[0]), ins[1].shape())),
                ]
            }),
        )
    }

    pub fn div(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        binary(
            self,
            other,
            |x, y| x / y,
            Box::new(|g, ins, _, needs| {
                let (a, b) = (ins[0], ins[1]);
                vec![
                    needs[0].then(|| reduce_to_shape(&(g / b), a.shape())),
                    needs[1].then(|| {
                        let gb = g * a / &(b * b);
                        reduce_to_shape(&gb.mapv(|v| -v), b.shape())
                    }),
                ]
            }),
        )
    }

    fn unary(&self, f: impl Fn(F) -> F, backward: crate::tensor::BackwardFn<F>) -> Tensor<F> {
        let out = self.value().mapv(f);
        Tensor::from_op(out, vec![self.clone()], backward)
    }

    pub fn add_scalar(&self, s: F) -> Tensor<F> {
        self.unary(move |x| x + s, Box::new(|g, _, _, _| vec![Some(g.clone())]))
    }

    pub fn mul_scalar(&self, s: F) -> Tensor<F> {
        self.unary(move |x| x * s, Box::new(move |g, _, _, _| vec![Some(g * s)]))
    }

    /// `s * x + t`.
    pub fn affine(&self, s: F, t: F) -> Tensor<F> {
        self.unary(move |x| s * x + t, Box::new(move |g, _, _, _| vec![Some(g * s)]))
    }

    pub fn neg(&self) -> Tensor<F> {
        self.mul_scalar(-F::one())
    }

    pub fn square(&self) -> Tensor<F> {
        self.unary(
            |x| x * x,
            Box::new(|g, ins, _, _| {
                let two = F::one() + F::one();
                vec![Some(Zip::from(g).and(ins[0]).map_collect(|&g, &x| g * two * x))]
            }),
        )
    }

    pub fn powf(&self, p: F) -> Tensor<F> {
        self.unary(
            move |x| x.powf(p),
            Box::new(move |g, ins, _, _| {
                vec![Some(
                    Zip::from(g)
                        .and(ins[0])
                        .map_collect(|&g, &x| g * p * x.powf(p - F::one())),
                )]
            }),
        )
    }

    pub fn sqrt(&self) -> Tensor<F> {
        self.unary(
            |x| x.sqrt(),
            Box::new(|g, _, out, _| {
                let half = F::cast(0.5);
                vec![Some(Zip::from(g).and(out).map_collect(|&g, &y| g * half / y))]
            }),
        )
    }

    /// Subgradient 0 at the kink.
    pub fn abs(&self) -> Tensor<F> {
        self.unary(
            |x| x.abs(),
            Box::new(|g, ins, _, _| {
                vec![Some(Zip::from(g).and(ins[0]).map_collect(|&g, &x| {
                    if x > F::zero() {
                        g
                    } else if x < F::zero() {
                        -g
                    } else {
                        F::zero()
                    }
                }))]
            }),
        )
    }

    pub fn relu(&self) -> Tensor<F> {
        self.unary(
            |x| x.max(F::zero()),
            Box::new(|g, ins, _, _| {
                vec![Some(
                    Zip::from(g)
                        .and(ins[0])
                        .map_collect(|&g, &x| if x > F::zero() { g } else { F::zero() }),
                )]
            }),
        )
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor<F> {
        self.unary(
            |x| x / (F::one() + (-x).exp()),
            Box::new(|g, ins, _, _| {
                vec![Some(Zip::from(g).and(ins[0]).map_collect(|&g, &x| {
                    let s = F::one() / (F::one() + (-x).exp());
                    g * s * (F::one() + x * (F::one() - s))
                }))]
            }),
        )
    }

    pub fn tanh(&self) -> Tensor<F> {
        self.unary(
            |x| x.tanh(),
            Box::new(|g, _, out, _| {
                vec![Some(Zip::from(g).and(out).map_collect(|&g, &y| g * (F::one() - y * y)))]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        self.unary(
            |x| F::one() / (F::one() + (-x).exp()),
            Box::new(|g, _, out, _| {
                vec![Some(Zip::from(g).and(out).map_collect(|&g, &y| g * y * (F::one() - y)))]
            }),
        )
    }

    /// Gradient passes where `lo <= x <= hi`.
    pub fn clamp(&self, lo: F, hi: F) -> Tensor<F> {
        self.unary(
            move |x| x.max(lo).min(hi),
            Box::new(move |g, ins, _, _| {
                vec![Some(Zip::from(g).and(ins[0]).map_collect(|&g, &x| {
                    if x >= lo && x <= hi {
                        g
                    } else {
                        F::zero()
                    }
                }))]
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor<F> {
        let s = self.value().sum();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![self.clone()],
            Box::new(|g, ins, _, _| {
                let gv = *g.iter().next().expect("scalar grad");
                vec![Some(ArrayD::from_elem(ins[0].raw_dim(), gv))]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let n = F::cast(self.numel().max(1) as f64);
        self.sum_all().mul_scalar(F::one() / n)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_keepdim(&self, axes: &[usize]) -> Result<Tensor<F>> {
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if let Some(&ax) = sorted.iter().find(|&&a| a >= self.ndim()) {
            return Err(Error::Shape(format!("axis {ax} out of range for {:?}", self.shape())));
        }
        let mut out = self.value().clone();
        for &ax in sorted.iter().rev() {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        Ok(Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, ins, _, _| {
                vec![Some(g.broadcast(ins[0].raw_dim()).expect("keepdim broadcast").to_owned())]
            }),
        ))
    }

    pub fn mean_keepdim(&self, axes: &[usize]) -> Result<Tensor<F>> {
        let count: usize = axes.iter().map(|&a| self.shape().get(a).copied().unwrap_or(1)).product();
        Ok(self.sum_keepdim(axes)?.mul_scalar(F::one() / F::cast(count.max(1) as f64)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape())));
        }
        let out = self
            .value()
            .to_shape(IxDyn(shape))
            .expect("standard layout")
            .into_owned();
        Ok(Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, ins, _, _| {
                vec![Some(g.to_shape(ins[0].raw_dim()).expect("standard layout").into_owned())]
            }),
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<F>> {
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..self.ndim()).collect::<Vec<_>>() {
            return Err(Error::Shape(format!("bad permutation {perm:?} for {:?}", self.shape())));
        }
        let out = self.value().clone().permuted_axes(IxDyn(perm));
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(Tensor::from_op(
            out.as_standard_layout().into_owned(),
            vec![self.clone()],
            Box::new(move |g, _, _, _| {
                vec![Some(
                    g.clone()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .into_owned(),
                )]
            }),
        ))
    }

    /// Elements `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<F>> {
        if axis >= self.ndim() || start + len > self.shape()[axis] {
            return Err(Error::Shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                self.shape()
            )));
        }
        let out = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        Ok(Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, ins, _, _| {
                let mut full = ArrayD::zeros(ins[0].raw_dim());
                full.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                vec![Some(full)]
            }),
        ))
    }

    pub fn cat(tensors: &[Tensor<F>], axis: usize) -> Result<Tensor<F>> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::Shape("cat of zero tensors".into()))?;
        if axis >= first.ndim() {
            return Err(Error::Shape(format!("cat axis {axis} out of range for {:?}", first.shape())));
        }
        let views: Vec<_> = tensors.iter().map(|t| t.value().view()).collect();
        let out = concatenate(Axis(axis), &views).map_err(|e| {
            let shapes: Vec<_> = tensors.iter().map(|t| t.shape().to_vec()).collect();
            Error::Shape(format!("cannot concatenate {shapes:?} on axis {axis}: {e}"))
        })?;
        let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        Ok(Tensor::from_op(
            out,
            tensors.to_vec(),
            Box::new(move |g, _, _, needs| {
                let mut offset = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&n, &need)| {
                        let part = need.then(|| {
                            g.slice_axis(Axis(axis), Slice::from(offset..offset + n))
                                .to_owned()
                        });
                        offset += n;
                        part
                    })
                    .collect()
            }),
        ))
    }
}

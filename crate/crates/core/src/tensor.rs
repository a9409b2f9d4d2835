//! Dense rank-4 tensors in `(N, C, H, W)` row-major layout.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extents of a rank-4 tensor, `(N, C, H, W)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> [usize; 4] {
        let [_, c, h, w] = self.0;
        [c * h * w, h * w, w, 1]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Broadcast shape of two operands; each axis must match or be a singleton.
    pub fn broadcast(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
        let mut out = [0; 4];
        for i in 0..4 {
            let (x, y) = (a.0[i], b.0[i]);
            out[i] = if x == y {
                x
            } else if x == 1 {
                y
            } else if y == 1 {
                x
            } else {
                return Err(Error::ShapeMismatch { op, lhs: a, rhs: b });
            };
        }
        Ok(Shape(out))
    }

    /// Shape with the given axes collapsed to one.
    pub fn reduced(&self, axes: &[usize]) -> Shape {
        let mut s = self.0;
        for &a in axes {
            s[a] = 1;
        }
        Shape(s)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n}, {c}, {h}, {w})")
    }
}

impl From<[usize; 4]> for Shape {
    fn from(s: [usize; 4]) -> Self {
        Shape(s)
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct Tensor<S> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("{} elements do not fill shape {shape}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Shape>, v: S) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: vec![v; shape.numel()],
        }
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(v: S) -> Self {
        Self::full(Shape::scalar(), v)
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every index.
    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(usize, usize, usize, usize) -> S) -> Self {
        let shape = shape.into();
        let [n, c, h, w] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(a, b, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape.0;
        ((n * cs + c) * hs + h) * ws + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: S) {
        let o = self.offset(n, c, h, w);
        self.data[o] = v;
    }

    /// One `(H, W)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[S] {
        let hw = self.shape.h() * self.shape.w();
        let o = (n * self.shape.c() + c) * hw;
        &self.data[o..o + hw]
    }

    /// All channels of one batch item.
    pub fn item(&self, n: usize) -> &[S] {
        let chw = self.shape.c() * self.shape.h() * self.shape.w();
        &self.data[n * chw..(n + 1) * chw]
    }

    pub fn reshape(mut self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape,
                rhs: other.shape,
            });
        }
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| T::lit(v.to_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> S {
        self.sum() / S::lit(self.numel() as f64)
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    /// Largest absolute element-wise difference.
    pub fn max_abs_diff(&self, other: &Self) -> S {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Slice of batch items `[start, start + len)`.
    pub fn batch_slice(&self, start: usize, len: usize) -> Self {
        let chw = self.shape.c() * self.shape.h() * self.shape.w();
        let [_, c, h, w] = self.shape.0;
        Tensor {
            shape: Shape::new(len, c, h, w),
            data: self.data[start * chw..(start + len) * chw].to_vec(),
        }
    }

    /// Stacks tensors along the batch axis.
    pub fn stack(items: &[&Tensor<S>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors"))?;
        let [_, c, h, w] = first.shape.0;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            let [tn, tc, th, tw] = t.shape.0;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape,
                    rhs: t.shape,
                });
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, c, h, w),
            data,
        })
    }

    /// Materializes a broadcast of `self` to `shape`.
    pub fn broadcast_to(&self, shape: Shape) -> Result<Self> {
        let b = Shape::broadcast("broadcast_to", self.shape, shape)?;
        if b != shape {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape,
                rhs: shape,
            });
        }
        let s = self.shape.0;
        Ok(Tensor::from_fn(shape, |n, c, h, w| {
            self.at(
                if s[0] == 1 { 0 } else { n },
                if s[1] == 1 { 0 } else { c },
                if s[2] == 1 { 0 } else { h },
                if s[3] == 1 { 0 } else { w },
            )
        }))
    }

    /// Sums a broadcast gradient back down to `shape`.
    pub fn sum_to(&self, shape: Shape) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let mut out = Tensor::zeros(shape);
        let s = shape.0;
        let [n, c, h, w] = self.shape.0;
        let mut i = 0;
        for a in 0..n {
            let a2 = if s[0] == 1 { 0 } else { a };
            for b in 0..c {
                let b2 = if s[1] == 1 { 0 } else { b };
                for y in 0..h {
                    let y2 = if s[2] == 1 { 0 } else { y };
                    let row = out.offset(a2, b2, y2, 0);
                    if s[3] == 1 {
                        let acc: S = self.data[i..i + w].iter().copied().sum();
                        out.data[row] = out.data[row] + acc;
                    } else {
                        for x in 0..w {
                            out.data[row + x] = out.data[row + x] + self.data[i + x];
                        }
                    }
                    i += w;
                }
            }
        }
        out
    }
}

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Maps each input flat index to its reduced flat index.
fn reduced_index(shape: Shape, out: Shape) -> impl Iterator<Item = usize> {
    let [n, c, h, w] = shape.0;
    let os = out.strides();
    let keep: [usize; 4] = std::array::from_fn(|i| usize::from(out.0[i] != 1 || shape.0[i] == 1));
    (0..n).flat_map(move |a| {
        (0..c).flat_map(move |b| {
            (0..h).flat_map(move |y| {
                (0..w).map(move |x| {
                    a * keep[0] * os[0] + b * keep[1] * os[1] + y * keep[2] * os[2] + x * keep[3] * os[3]
                })
            })
        })
    })
}

/// Right-aligns the kept axes when reduced axes are dropped.
fn dropped_shape(shape: Shape, axes: &[usize]) -> Shape {
    let kept: Vec<usize> = (0..4).filter(|a| !axes.contains(a)).map(|a| shape.0[a]).collect();
    let mut s = [1; 4];
    for (i, e) in kept.iter().enumerate() {
        s[4 - kept.len() + i] = *e;
    }
    Shape(s)
}

impl<S: Scalar> Graph<S> {
    /// Reduces over `axes`. With `keep_dims` the reduced axes stay as
    /// singletons; otherwise the remaining axes are right-aligned.
    pub fn reduce(&mut self, kind: Reduce, x: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        let shape = self.shape(x);
        if axes.iter().any(|&a| a >= 4) {
            return Err(Error::invalid("reduce", format!("axis out of range in {axes:?}")));
        }
        if axes.iter().any(|&a| shape.0[a] == 0) || shape.numel() == 0 {
            return Err(Error::EmptyAxis(shape));
        }
        let kept = shape.reduced(axes);
        let count: usize = axes.iter().map(|&a| shape.0[a]).product::<usize>().max(1);
        let src = self.value(x).data();

        let mut out = match kind {
            Reduce::Max => Tensor::full(kept, S::neg_infinity()),
            _ => Tensor::zeros(kept),
        };
        let mut argmax = vec![usize::MAX; kept.numel()];
        {
            let od = out.data_mut();
            for (i, o) in reduced_index(shape, kept).enumerate() {
                match kind {
                    Reduce::Sum | Reduce::Mean => od[o] = od[o] + src[i],
                    Reduce::Max => {
                        if src[i] > od[o] || argmax[o] == usize::MAX {
                            od[o] = src[i];
                            argmax[o] = i;
                        }
                    }
                }
            }
            if kind == Reduce::Mean {
                let inv = S::one() / S::lit(count as f64);
                od.iter_mut().for_each(|v| *v = *v * inv);
            }
        }
        let out_shape = if keep_dims { kept } else { dropped_shape(shape, axes) };
        let out = out.reshape(out_shape)?;
        let name = match kind {
            Reduce::Sum => "sum",
            Reduce::Mean => "mean",
            Reduce::Max => "max",
        };
        self.push(
            name,
            out,
            vec![x],
            Box::new(move |_, _, g, _| {
                let gd = g.data();
                let mut gx = vec![S::zero(); shape.numel()];
                match kind {
                    Reduce::Sum | Reduce::Mean => {
                        let k = if kind == Reduce::Mean {
                            S::one() / S::lit(count as f64)
                        } else {
                            S::one()
                        };
                        for (i, o) in reduced_index(shape, kept).enumerate() {
                            gx[i] = gd[o] * k;
                        }
                    }
                    Reduce::Max => {
                        for (o, &i) in argmax.iter().enumerate() {
                            gx[i] = gd[o];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(shape, gx).expect("input shape"))]
            }),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduce::Sum, x, &[0, 1, 2, 3], true)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduce::Mean, x, &[0, 1, 2, 3], true)
    }
}

use std::sync::Arc;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<S: Scalar> Graph<S> {
    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?);
        let [n, _, h, w] = first.0;
        let mut chans = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if (s.n(), s.h(), s.w()) != (n, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s,
                });
            }
            chans.push(s.c());
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for &v in xs {
                data.extend_from_slice(self.value(v).item(b));
            }
        }
        let out = Tensor::from_vec([n, total, h, w], data)?;
        self.push(
            "concat",
            out,
            xs.to_vec(),
            Box::new(move |_, _, g, needs| {
                let mut off = 0;
                let mut r = Vec::with_capacity(chans.len());
                for (i, &c) in chans.iter().enumerate() {
                    if needs[i] {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            let o = (b * total + off) * hw;
                            d.extend_from_slice(&g.data()[o..o + c * hw]);
                        }
                        r.push(Some(Tensor::from_vec([n, c, h, w], d).expect("shape")));
                    } else {
                        r.push(None);
                    }
                    off += c;
                }
                r
            }),
        )
    }

    /// Channels `[start, start + len)`.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        let [n, c, h, w] = s.0;
        if start + len > c {
            return Err(Error::invalid("narrow", format!("channels {start}..{} of {s}", start + len)));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            let o = (b * c + start) * hw;
            data.extend_from_slice(&self.value(x).data()[o..o + len * hw]);
        }
        let out = Tensor::from_vec([n, len, h, w], data)?;
        self.push(
            "narrow",
            out,
            vec![x],
            Box::new(move |_, _, g, _| {
                let mut d = Tensor::zeros(s);
                for b in 0..n {
                    let o = (b * c + start) * hw;
                    d.data_mut()[o..o + len * hw].copy_from_slice(&g.data()[b * len * hw..(b + 1) * len * hw]);
                }
                vec![Some(d)]
            }),
        )
    }

    /// Nearest-neighbour spatial upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x);
        let [n, c, h, w] = s.0;
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x);
        let out = Tensor::from_fn([n, c, oh, ow], |b, ch, y, xx| xv.at(b, ch, y / factor, xx / factor));
        self.push(
            "upsample_nearest",
            out,
            vec![x],
            Box::new(move |_, _, g, _| {
                let mut d = Tensor::zeros(s);
                for b in 0..n {
                    for ch in 0..c {
                        let gp = g.plane(b, ch);
                        let o = (b * c + ch) * h * w;
                        for y in 0..oh {
                            for xx in 0..ow {
                                let i = o + (y / factor) * w + xx / factor;
                                d.data_mut()[i] = d.data()[i] + gp[y * ow + xx];
                            }
                        }
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Per-plane gather: `out[n, c, j] = x[n, c, index[j]]`, reshaped to
    /// `(out_h, out_w)`. Indices address the flattened `(H, W)` plane.
    pub fn gather_plane(&mut self, x: Var, index: Arc<Vec<usize>>, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        let [n, c, h, w] = s.0;
        let hw = h * w;
        if index.len() != out_h * out_w || index.iter().any(|&i| i >= hw) {
            return Err(Error::invalid("gather_plane", format!("index does not fit plane of {s}")));
        }
        let l = index.len();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * l);
        for p in 0..n * c {
            let plane = &xv[p * hw..(p + 1) * hw];
            data.extend(index.iter().map(|&i| plane[i]));
        }
        let out = Tensor::from_vec([n, c, out_h, out_w], data)?;
        self.push(
            "gather_plane",
            out,
            vec![x],
            Box::new(move |_, _, g, _| {
                let mut d = Tensor::<S>::zeros(s);
                let dd = d.data_mut();
                for p in 0..n * c {
                    let gp = &g.data()[p * l..(p + 1) * l];
                    for (j, &i) in index.iter().enumerate() {
                        dd[p * hw + i] = dd[p * hw + i] + gp[j];
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Per-plane scatter-add into a zero `(out_h, out_w)` plane:
    /// `out[n, c, index[j]] += x[n, c, j]`.
    pub fn scatter_plane(&mut self, x: Var, index: Arc<Vec<usize>>, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        let [n, c, h, w] = s.0;
        let l = h * w;
        let ohw = out_h * out_w;
        if index.len() != l || index.iter().any(|&i| i >= ohw) {
            return Err(Error::invalid("scatter_plane", format!("index does not fit {s}")));
        }
        let xv = self.value(x).data();
        let mut out = Tensor::zeros([n, c, out_h, out_w]);
        {
            let od = out.data_mut();
            for p in 0..n * c {
                for (j, &i) in index.iter().enumerate() {
                    od[p * ohw + i] = od[p * ohw + i] + xv[p * l + j];
                }
            }
        }
        self.push(
            "scatter_plane",
            out,
            vec![x],
            Box::new(move |_, _, g, _| {
                let gd = g.data();
                let mut data = Vec::with_capacity(n * c * l);
                for p in 0..n * c {
                    data.extend(index.iter().map(|&i| gd[p * ohw + i]));
                }
                vec![Some(Tensor::from_vec(s, data).expect("shape"))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn concat_then_narrow_roundtrip() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_fn([2, 2, 2, 2], |n, c, h, w| (n * 8 + c * 4 + h * 2 + w) as f64), false);
        let b = g.leaf(Tensor::from_fn([2, 3, 2, 2], |n, c, h, w| -((n * 12 + c * 4 + h * 2 + w) as f64)), false);
        let cat = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(cat), Shape::new(2, 5, 2, 2));
        let back = g.narrow_channels(cat, 2, 3).unwrap();
        assert_eq!(g.value(back), g.value(b));
    }

    #[test]
    fn gather_scatter_permutation_inverse() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn([1, 2, 2, 3], |_, c, h, w| (c * 6 + h * 3 + w) as f64), false);
        let perm = Arc::new(vec![5, 3, 1, 4, 2, 0]);
        let seq = g.gather_plane(x, perm.clone(), 1, 6).unwrap();
        let back = g.scatter_plane(seq, perm, 2, 3).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }
}

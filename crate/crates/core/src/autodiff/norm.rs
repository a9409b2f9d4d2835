use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

const LN_EPS: f64 = 1e-5;

impl<S: Scalar> Graph<S> {
    /// Layer normalization across channels at every `(n, h, w)` position.
    /// `gamma` and `beta` are `(1, C, 1, 1)`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x);
        let [n, c, h, w] = shape.0;
        let ps = Shape::new(1, c, 1, 1);
        for p in [gamma, beta] {
            if self.shape(p) != ps {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: ps,
                    rhs: self.shape(p),
                });
            }
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![S::zero(); shape.numel()];
        let mut inv_std = vec![S::zero(); n * hw];
        let mut out = Tensor::zeros(shape);
        let inv_c = S::one() / S::lit(c as f64);
        for b in 0..n {
            for p in 0..hw {
                let idx = |ch: usize| (b * c + ch) * hw + p;
                let mean = (0..c).map(|ch| xv[idx(ch)]).sum::<S>() * inv_c;
                let var = (0..c).map(|ch| (xv[idx(ch)] - mean).powi(2)).sum::<S>() * inv_c;
                let is = S::one() / (var + S::lit(LN_EPS)).sqrt();
                inv_std[b * hw + p] = is;
                for ch in 0..c {
                    let xh = (xv[idx(ch)] - mean) * is;
                    xhat[idx(ch)] = xh;
                    out.data_mut()[idx(ch)] = gv[ch] * xh + bv[ch];
                }
            }
        }
        self.push(
            "layer_norm",
            out,
            vec![x, gamma, beta],
            Box::new(move |inp, _, g, needs| {
                let gamma = inp[1].data();
                let gd = g.data();
                let mut dx = vec![S::zero(); shape.numel()];
                let mut dg = vec![S::zero(); c];
                let mut db = vec![S::zero(); c];
                for b in 0..n {
                    for p in 0..hw {
                        let idx = |ch: usize| (b * c + ch) * hw + p;
                        let mut sum_d = S::zero();
                        let mut sum_dx = S::zero();
                        for ch in 0..c {
                            let i = idx(ch);
                            let d = gd[i] * gamma[ch];
                            sum_d = sum_d + d;
                            sum_dx = sum_dx + d * xhat[i];
                            dg[ch] = dg[ch] + gd[i] * xhat[i];
                            db[ch] = db[ch] + gd[i];
                        }
                        let is = inv_std[b * hw + p];
                        for ch in 0..c {
                            let i = idx(ch);
                            let d = gd[i] * gamma[ch];
                            dx[i] = is * inv_c * (S::lit(c as f64) * d - sum_d - xhat[i] * sum_dx);
                        }
                    }
                }
                vec![
                    needs[0].then(|| Tensor::from_vec(shape, dx).expect("shape")),
                    needs[1].then(|| Tensor::from_vec(ps, dg).expect("shape")),
                    needs[2].then(|| Tensor::from_vec(ps, db).expect("shape")),
                ]
            }),
        )
    }

    /// Softmax across the channel axis at every `(n, h, w)` position.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let [n, c, h, w] = shape.0;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(shape);
        for b in 0..n {
            for p in 0..hw {
                let idx = |ch: usize| (b * c + ch) * hw + p;
                let m = (0..c).map(|ch| xv[idx(ch)]).fold(S::neg_infinity(), S::max);
                let z: S = (0..c).map(|ch| (xv[idx(ch)] - m).exp()).sum();
                for ch in 0..c {
                    out.data_mut()[idx(ch)] = (xv[idx(ch)] - m).exp() / z;
                }
            }
        }
        self.push(
            "softmax",
            out,
            vec![x],
            Box::new(move |_, y, g, _| {
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![S::zero(); shape.numel()];
                for b in 0..n {
                    for p in 0..hw {
                        let idx = |ch: usize| (b * c + ch) * hw + p;
                        let dot: S = (0..c).map(|ch| yd[idx(ch)] * gd[idx(ch)]).sum();
                        for ch in 0..c {
                            dx[idx(ch)] = yd[idx(ch)] * (gd[idx(ch)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_vec(shape, dx).expect("shape"))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn([2, 5, 2, 3], |a, c, h, w| (a + c * c + h * w) as f64 * 0.3), false);
        let gm = g.leaf(Tensor::ones([1, 5, 1, 1]), false);
        let bt = g.leaf(Tensor::zeros([1, 5, 1, 1]), false);
        let y = g.layer_norm(x, gm, bt).unwrap();
        let v = g.value(y);
        for b in 0..2 {
            for h in 0..2 {
                for w in 0..3 {
                    let vals: Vec<f64> = (0..5).map(|c| v.at(b, c, h, w)).collect();
                    let m: f64 = vals.iter().sum::<f64>() / 5.0;
                    assert!(m.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn([1, 3, 2, 2], |_, c, h, w| (c * 7 + h * 3 + w) as f64 * 0.9 - 4.0), false);
        let y = g.softmax_channels(x).unwrap();
        let v = g.value(y);
        for h in 0..2 {
            for w in 0..2 {
                let s: f64 = (0..3).map(|c| v.at(0, c, h, w)).sum();
                assert!((s - 1.0).abs() < 1e-15);
            }
        }
    }
}

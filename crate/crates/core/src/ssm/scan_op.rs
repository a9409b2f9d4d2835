//! Fused discretize + recurrence as one differentiable graph node.

use std::sync::Arc;

use super::{exp_pair, zoh_gain_slope, Discretization, SERIES_RANGE};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

impl<S: Scalar> Graph<S> {
    /// Selective scan over sequences stored as `(N, C, 1, L)`.
    ///
    /// `delta` is `(N, C, 1, L)` and already positive; `b`, `c` are
    /// `(N, S, 1, L)`; `a` is `(1, 1, C, S)` with negative entries. The hidden
    /// state is reset to zero at every offset in `starts`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        b: Var,
        c: Var,
        a: Var,
        starts: Arc<Vec<usize>>,
        rule: Discretization,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let [n, ch, one, len] = xs.0;
        let ns = self.shape(b).c();
        let expect_bc = Shape::new(n, ns, 1, len);
        if one != 1 || self.shape(delta) != xs {
            return Err(Error::ShapeMismatch {
                op: "selective_scan",
                lhs: xs,
                rhs: self.shape(delta),
            });
        }
        for v in [b, c] {
            if self.shape(v) != expect_bc {
                return Err(Error::ShapeMismatch {
                    op: "selective_scan",
                    lhs: expect_bc,
                    rhs: self.shape(v),
                });
            }
        }
        if self.shape(a) != Shape::new(1, 1, ch, ns) {
            return Err(Error::ShapeMismatch {
                op: "selective_scan",
                lhs: Shape::new(1, 1, ch, ns),
                rhs: self.shape(a),
            });
        }
        if starts.first() != Some(&0) && len > 0 {
            return Err(Error::invalid("selective_scan", "first segment must start at 0"));
        }

        let (xv, dv, bv, cv, av) = (
            self.value(x).data(),
            self.value(delta).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(a).data(),
        );
        let mut reset = vec![false; len];
        for &s in starts.iter() {
            if s < len {
                reset[s] = true;
            }
        }

        // Per item: b, c transposed to (L, S) for contiguous access.
        let transpose = move |src: &[S], item: usize| -> Vec<S> {
            let mut t = vec![S::zero(); len * ns];
            let base = item * ns * len;
            for s in 0..ns {
                for i in 0..len {
                    t[i * ns + s] = src[base + s * len + i];
                }
            }
            t
        };

        // Per step and state, saved as (N, C, L, S): hidden state, decay Ā,
        // gain B̄/B, and ∂gain/∂A. ∂gain/∂Δ equals Ā under ZOH and 1 under Euler.
        let total = n * ch * len * ns;
        let (mut hs, mut decay, mut gains, mut slopes) =
            (vec![S::zero(); total], vec![S::zero(); total], vec![S::zero(); total], vec![S::zero(); total]);
        let mut y = vec![S::zero(); n * ch * len];
        for item in 0..n {
            let bt = transpose(bv, item);
            let ct = transpose(cv, item);
            for k in 0..ch {
                let row = (item * ch + k) * len;
                let arow = &av[k * ns..(k + 1) * ns];
                let inv_a: Vec<S> = arow.iter().map(|&a| S::one() / a).collect();
                let mut h = vec![S::zero(); ns];
                for t in 0..len {
                    if reset[t] {
                        h.fill(S::zero());
                    }
                    let d = dv[row + t];
                    let xt = xv[row + t];
                    let r = (row + t) * ns..(row + t + 1) * ns;
                    let (ab, gain, slope) = (&mut decay[r.clone()], &mut gains[r.clone()], &mut slopes[r.clone()]);
                    for s in 0..ns {
                        let z = d * arow[s];
                        match rule {
                            Discretization::Zoh => {
                                let (e, em1) = exp_pair(z);
                                ab[s] = e;
                                gain[s] = em1 * inv_a[s];
                                slope[s] = if z.abs() < S::lit(SERIES_RANGE) {
                                    d * d * zoh_gain_slope(z, e, em1)
                                } else {
                                    (z * e - em1) * inv_a[s] * inv_a[s]
                                };
                            }
                            Discretization::Euler => {
                                ab[s] = z.exp();
                                gain[s] = d;
                            }
                        }
                    }
                    let (bts, cts) = (&bt[t * ns..(t + 1) * ns], &ct[t * ns..(t + 1) * ns]);
                    let hrow = &mut hs[r];
                    let mut acc = S::zero();
                    for s in 0..ns {
                        let hv = ab[s] * h[s] + gain[s] * bts[s] * xt;
                        h[s] = hv;
                        hrow[s] = hv;
                        acc = acc + cts[s] * hv;
                    }
                    y[row + t] = acc;
                }
            }
        }
        let out = Tensor::from_vec(xs, y)?;
        let a_shape = self.shape(a);
        self.push(
            "selective_scan",
            out,
            vec![x, delta, b, c, a],
            Box::new(move |inp, _, g, _| {
                let (xv, dv, bv, cv, av) = (inp[0].data(), inp[1].data(), inp[2].data(), inp[3].data(), inp[4].data());
                let gy = g.data();
                let mut dx = vec![S::zero(); n * ch * len];
                let mut dd = vec![S::zero(); n * ch * len];
                let mut db = vec![S::zero(); n * ns * len];
                let mut dc = vec![S::zero(); n * ns * len];
                let mut da = vec![S::zero(); ch * ns];
                let zeros = vec![S::zero(); ns];
                let euler = rule == Discretization::Euler;
                for item in 0..n {
                    let bt = transpose(bv, item);
                    let ct = transpose(cv, item);
                    // Accumulated in (L, S) then transposed back.
                    let mut dbt = vec![S::zero(); len * ns];
                    let mut dct = vec![S::zero(); len * ns];
                    for k in 0..ch {
                        let row = (item * ch + k) * len;
                        let arow = &av[k * ns..(k + 1) * ns];
                        let mut carry = vec![S::zero(); ns];
                        for t in (0..len).rev() {
                            let d = dv[row + t];
                            let xt = xv[row + t];
                            let gyt = gy[row + t];
                            let base = (row + t) * ns;
                            let r = base..base + ns;
                            let (ab, gain, slope, h) = (&decay[r.clone()], &gains[r.clone()], &slopes[r.clone()], &hs[r]);
                            let h_prev = if reset[t] { &zeros[..] } else { &hs[base - ns..base] };
                            let (bts, cts) = (&bt[t * ns..(t + 1) * ns], &ct[t * ns..(t + 1) * ns]);
                            let (dbts, dcts) = (&mut dbt[t * ns..(t + 1) * ns], &mut dct[t * ns..(t + 1) * ns]);
                            let dar = &mut da[k * ns..(k + 1) * ns];
                            let keep = if reset[t] { S::zero() } else { S::one() };
                            let mut gx = S::zero();
                            let mut gd = S::zero();
                            for s in 0..ns {
                                let gh = carry[s] + cts[s] * gyt;
                                dcts[s] = dcts[s] + gyt * h[s];
                                // ∂/∂Ā and ∂/∂B̄ of this step
                                let g_ab = gh * h_prev[s];
                                let g_bb = gh * xt;
                                gx = gx + gh * gain[s] * bts[s];
                                dbts[s] = dbts[s] + g_bb * gain[s];
                                let dgain_dd = if euler { S::one() } else { ab[s] };
                                gd = gd + g_ab * arow[s] * ab[s] + g_bb * bts[s] * dgain_dd;
                                dar[s] = dar[s] + g_ab * d * ab[s] + g_bb * bts[s] * slope[s];
                                carry[s] = gh * ab[s] * keep;
                            }
                            dx[row + t] = gx;
                            dd[row + t] = gd;
                        }
                    }
                    let base = item * ns * len;
                    for s in 0..ns {
                        for i in 0..len {
                            db[base + s * len + i] = dbt[i * ns + s];
                            dc[base + s * len + i] = dct[i * ns + s];
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(xs, dx).expect("shape")),
                    Some(Tensor::from_vec(xs, dd).expect("shape")),
                    Some(Tensor::from_vec(expect_bc, db).expect("shape")),
                    Some(Tensor::from_vec(expect_bc, dc).expect("shape")),
                    Some(Tensor::from_vec(a_shape, da).expect("shape")),
                ]
            }),
        )
    }
}

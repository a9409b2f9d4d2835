//! Modulated deformable 3×3 convolution as a fused im2col + GEMM op.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Taps of the 3×3 kernel.
pub const TAPS: usize = 9;

/// Integer tap offset `(dy, dx)` of tap `k`; taps enumerate `{-1,0,1}²`
/// row-major.
pub fn tap_offset(k: usize) -> (isize, isize) {
    (k as isize / 3 - 1, k as isize % 3 - 1)
}

/// Bilinear read of `plane (H, W)` at `(y, x)`; out-of-image corners read zero.
pub fn bilinear<S: Scalar>(plane: &[S], h: usize, w: usize, y: S, x: S) -> S {
    let c = Corners::new(h, w, y, x);
    c.value(plane)
}

/// The four neighbours of a fractional position with their weights.
struct Corners<S> {
    y0: isize,
    x0: isize,
    ly: S,
    lx: S,
    h: usize,
    w: usize,
}

impl<S: Scalar> Corners<S> {
    fn new(h: usize, w: usize, y: S, x: S) -> Self {
        let (fy, fx) = (y.floor(), x.floor());
        Corners {
            y0: fy.to_f64() as isize,
            x0: fx.to_f64() as isize,
            ly: y - fy,
            lx: x - fx,
            h,
            w,
        }
    }

    /// `(index, wy, wx, sign_y, sign_x)` for each in-bounds corner. The signs
    /// are the derivatives of the weights with respect to the position.
    fn each(&self, mut f: impl FnMut(usize, S, S, S, S)) {
        let one = S::one();
        for (dy, wy, sy) in [(0, one - self.ly, -one), (1, self.ly, one)] {
            let yy = self.y0 + dy;
            if yy < 0 || yy >= self.h as isize {
                continue;
            }
            for (dx, wx, sx) in [(0, one - self.lx, -one), (1, self.lx, one)] {
                let xx = self.x0 + dx;
                if xx < 0 || xx >= self.w as isize {
                    continue;
                }
                f(yy as usize * self.w + xx as usize, wy, wx, sy, sx);
            }
        }
    }

    fn value(&self, plane: &[S]) -> S {
        let mut v = S::zero();
        self.each(|i, wy, wx, _, _| v = v + wy * wx * plane[i]);
        v
    }
}

/// In-bounds corners of one sampling position: flat index, bilinear weight,
/// and the weight's derivatives along y and x.
struct Footprint<S> {
    len: usize,
    idx: [usize; 4],
    w: [S; 4],
    dwy: [S; 4],
    dwx: [S; 4],
}

impl<S: Scalar> Footprint<S> {
    fn new(c: &Corners<S>) -> Self {
        let mut f = Footprint {
            len: 0,
            idx: [0; 4],
            w: [S::zero(); 4],
            dwy: [S::zero(); 4],
            dwx: [S::zero(); 4],
        };
        c.each(|i, wy, wx, sy, sx| {
            let k = f.len;
            f.idx[k] = i;
            f.w[k] = wy * wx;
            f.dwy[k] = sy * wx;
            f.dwx[k] = wy * sx;
            f.len += 1;
        });
        f
    }

    #[inline]
    fn value(&self, plane: &[S]) -> S {
        let mut v = S::zero();
        for k in 0..self.len {
            v = v + self.w[k] * plane[self.idx[k]];
        }
        v
    }
}

#[derive(Clone, Copy)]
struct Geom {
    cin: usize,
    h: usize,
    w: usize,
}

impl Geom {
    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Clamps a raw offset to `[-limit, limit]`; the flag marks the pass-through
/// region where the gradient flows.
fn clamp<S: Scalar>(v: S, limit: usize) -> (S, bool) {
    let l = S::lit(limit as f64);
    if v > l {
        (l, false)
    } else if v < -l {
        (-l, false)
    } else {
        (v, true)
    }
}

/// Sampling position of tap `k` at pixel `p` for one batch item.
fn position<S: Scalar>(off: &[S], g: &Geom, k: usize, p: usize) -> (S, S, bool, bool) {
    let hw = g.hw();
    let (ty, tx) = tap_offset(k);
    let (dy, fy) = clamp(off[2 * k * hw + p], g.h);
    let (dx, fx) = clamp(off[(2 * k + 1) * hw + p], g.w);
    let y = S::lit((p / g.w) as f64 + ty as f64) + dy;
    let x = S::lit((p % g.w) as f64 + tx as f64) + dx;
    (y, x, fy, fx)
}

/// Footprints of every `(tap, pixel)` for one item, tap-major, with the
/// per-axis pass-through flags of the offset clamp.
struct Sampling<S> {
    taps: Vec<(Footprint<S>, bool, bool)>,
}

impl<S: Scalar> Sampling<S> {
    fn new(off: &[S], g: &Geom) -> Self {
        let hw = g.hw();
        let mut taps = Vec::with_capacity(TAPS * hw);
        for k in 0..TAPS {
            for p in 0..hw {
                let (y, x, fy, fx) = position(off, g, k, p);
                taps.push((Footprint::new(&Corners::new(g.h, g.w, y, x)), fy, fx));
            }
        }
        Sampling { taps }
    }

    /// Modulated sampling columns `(Cin*9, H*W)`.
    fn columns(&self, x: &[S], mask: &[S], g: &Geom, cols: &mut [S]) {
        let hw = g.hw();
        for ci in 0..g.cin {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for k in 0..TAPS {
                let row = &mut cols[(ci * TAPS + k) * hw..(ci * TAPS + k + 1) * hw];
                let taps = &self.taps[k * hw..(k + 1) * hw];
                let m = &mask[k * hw..(k + 1) * hw];
                for p in 0..hw {
                    row[p] = taps[p].0.value(plane) * m[p];
                }
            }
        }
    }
}

impl<S: Scalar> Graph<S> {
    /// `y(p) = Σ_k w_k · x(p + p_k + Δp_k) · m_k(p)` with stride 1 and same
    /// output size.
    ///
    /// `offsets` is `(N, 18, H, W)` holding `(Δy, Δx)` for each tap in
    /// channel pairs; `mask` is `(N, 9, H, W)`; `weight` is `(Cout, Cin, 3, 3)`.
    /// Offsets are clamped to the image extent.
    pub fn deform_conv(&mut self, x: Var, offsets: Var, mask: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        let [n, cin, h, w] = xs.0;
        let [cout, wcin, kh, kw] = ws.0;
        if kh != 3 || kw != 3 {
            return Err(Error::invalid("deform_conv", format!("3x3 kernel expected, got {ws}")));
        }
        if wcin != cin {
            return Err(Error::ChannelMismatch {
                op: "deform_conv",
                expected: wcin,
                got: cin,
            });
        }
        for (v, c) in [(offsets, 2 * TAPS), (mask, TAPS)] {
            let want = Shape::new(n, c, h, w);
            if self.shape(v) != want {
                return Err(Error::ShapeMismatch {
                    op: "deform_conv",
                    lhs: want,
                    rhs: self.shape(v),
                });
            }
        }
        if let Some(b) = bias {
            if self.shape(b).numel() != cout {
                return Err(Error::ChannelMismatch {
                    op: "deform_conv bias",
                    expected: cout,
                    got: self.shape(b).numel(),
                });
            }
        }
        if !self.value(offsets).is_finite() {
            return Err(Error::NonFinite {
                op: "deform_conv offsets",
                node: offsets.index(),
            });
        }

        let geom = Geom { cin, h, w };
        let (rows, p) = (cin * TAPS, h * w);
        let (xv, ov, mv, wv) = (self.value(x), self.value(offsets), self.value(mask), self.value(weight));
        let mut out = Tensor::zeros([n, cout, h, w]);
        // Columns and footprints are kept for the backward pass.
        let mut saved = Vec::with_capacity(n);
        for b in 0..n {
            let sampling = Sampling::new(ov.item(b), &geom);
            let mut cols = vec![S::zero(); rows * p];
            sampling.columns(xv.item(b), mv.item(b), &geom, &mut cols);
            let dst = &mut out.data_mut()[b * cout * p..(b + 1) * cout * p];
            if let Some(bias) = bias {
                let bias = self.value(bias).data();
                for (co, row) in dst.chunks_mut(p).enumerate() {
                    row.fill(bias[co]);
                }
            }
            let beta = if bias.is_some() { S::one() } else { S::zero() };
            S::gemm(cout, rows, p, S::one(), wv.data(), (rows as isize, 1), &cols, (p as isize, 1), beta, dst, (p as isize, 1));
            saved.push((sampling, cols));
        }

        let mut inputs = vec![x, offsets, mask, weight];
        inputs.extend(bias);
        self.push(
            "deform_conv",
            out,
            inputs,
            Box::new(move |inp, _, gy, needs| {
                let (x, off, mask, wt) = (inp[0], inp[1], inp[2], inp[3]);
                let hw = geom.hw();
                let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
                let mut doff = needs[1].then(|| Tensor::zeros(off.shape()));
                let mut dmask = needs[2].then(|| Tensor::zeros(mask.shape()));
                let mut dw = needs[3].then(|| Tensor::zeros(wt.shape()));
                let mut dcols = vec![S::zero(); rows * p];
                let want_sampling = needs[0] || needs[1] || needs[2];
                for b in 0..n {
                    let g = &gy.data()[b * cout * p..(b + 1) * cout * p];
                    let (xb, mb) = (x.item(b), mask.item(b));
                    let (sampling, cols) = &saved[b];
                    if let Some(dw) = dw.as_mut() {
                        S::gemm(cout, p, rows, S::one(), g, (p as isize, 1), cols, (1, p as isize), S::one(), dw.data_mut(), (rows as isize, 1));
                    }
                    if !want_sampling {
                        continue;
                    }
                    S::gemm(rows, cout, p, S::one(), wt.data(), (1, rows as isize), g, (p as isize, 1), S::zero(), &mut dcols, (p as isize, 1));
                    let chw = cin * hw;
                    for k in 0..TAPS {
                        for q in 0..hw {
                            let (f, fy, fx) = &sampling.taps[k * hw + q];
                            let (fy, fx) = (*fy, *fx);
                            let m = mb[k * hw + q];
                            let mut gm = S::zero();
                            let (mut gdy, mut gdx) = (S::zero(), S::zero());
                            for ci in 0..cin {
                                let gc = dcols[(ci * TAPS + k) * hw + q];
                                let plane = &xb[ci * hw..(ci + 1) * hw];
                                let gv = gc * m;
                                let (mut v, mut vy, mut vx) = (S::zero(), S::zero(), S::zero());
                                for t in 0..f.len {
                                    let xi = plane[f.idx[t]];
                                    v = v + f.w[t] * xi;
                                    vy = vy + f.dwy[t] * xi;
                                    vx = vx + f.dwx[t] * xi;
                                }
                                gm = gm + gc * v;
                                gdy = gdy + gv * vy;
                                gdx = gdx + gv * vx;
                                if let Some(dx) = dx.as_mut() {
                                    let dst = &mut dx.data_mut()[b * chw + ci * hw..b * chw + (ci + 1) * hw];
                                    for t in 0..f.len {
                                        dst[f.idx[t]] = dst[f.idx[t]] + gv * f.w[t];
                                    }
                                }
                            }
                            if let Some(dm) = dmask.as_mut() {
                                dm.data_mut()[(b * TAPS + k) * hw + q] = gm;
                            }
                            if let Some(d) = doff.as_mut() {
                                let base = b * 2 * TAPS * hw;
                                if fy {
                                    d.data_mut()[base + 2 * k * hw + q] = gdy;
                                }
                                if fx {
                                    d.data_mut()[base + (2 * k + 1) * hw + q] = gdx;
                                }
                            }
                        }
                    }
                }
                let db = (inp.len() > 4 && needs[4]).then(|| {
                    let mut db = Tensor::zeros(inp[4].shape());
                    for b in 0..n {
                        for co in 0..cout {
                            let o = (b * cout + co) * p;
                            let s: S = gy.data()[o..o + p].iter().copied().sum();
                            db.data_mut()[co] = db.data()[co] + s;
                        }
                    }
                    db
                });
                let mut r = vec![dx, doff, dmask, dw];
                if inp.len() > 4 {
                    r.push(db);
                }
                r
            }),
        )
    }
}

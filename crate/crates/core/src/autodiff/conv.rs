//! 2D cross-correlation via im2col + GEMM, and a depthwise variant.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on every side.
    Same,
    /// No padding.
    Valid,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn new(op: &'static str, x: Shape, k: usize, stride: usize, padding: Padding) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::invalid(op, "kernel and stride must be positive"));
        }
        let pad = match padding {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        };
        let (h, w) = (x.h(), x.w());
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::invalid(op, format!("input {x} smaller than {k}x{k} kernel")));
        }
        Ok(ConvGeom {
            cin: x.c(),
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate a kernel tap reads for output index `o`.
    #[inline]
    fn src(&self, o: usize, tap: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + tap) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

impl ConvGeom {
    /// Output indices `[lo, hi)` whose tap `tap` lands inside `0..extent`.
    fn valid_range(&self, tap: usize, extent: usize, outs: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(tap).div_ceil(self.stride);
        let hi = if extent + self.pad > tap {
            ((extent - 1 + self.pad - tap) / self.stride + 1).min(outs)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unrolls one batch item `(C, H, W)` into `(C*k*k, OH*OW)`.
pub(crate) fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, cols: &mut [S]) {
    let p = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * p;
                let dst = &mut cols[row..row + p];
                let (lo, hi) = g.valid_range(kx, g.w, g.ow);
                for oy in 0..g.oh {
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        out.fill(S::zero());
                        continue;
                    };
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    out[..lo].fill(S::zero());
                    out[hi..].fill(S::zero());
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (j, o) in out[lo..hi].iter_mut().enumerate() {
                            *o = src[first + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `(C, H, W)`.
pub(crate) fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom, dx: &mut [S]) {
    let p = g.cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * p;
                let src = &cols[row..row + p];
                let (lo, hi) = g.valid_range(kx, g.w, g.ow);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let from = &src[oy * g.ow + lo..oy * g.ow + hi];
                    for (j, &v) in from.iter().enumerate() {
                        let ix = first + j * g.stride;
                        dst[ix] = dst[ix] + v;
                    }
                }
            }
        }
    }
}

/// Forward convolution on plain tensors.
pub fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<S>> {
    let (geom, cout) = conv_check(x.shape(), w.shape(), bias.map(|b| b.shape()), stride, padding)?;
    Ok(conv_apply(x, w, bias, &geom, cout, false).0)
}

fn conv_check(
    x: Shape,
    w: Shape,
    bias: Option<Shape>,
    stride: usize,
    padding: Padding,
) -> Result<(ConvGeom, usize)> {
    let [cout, cin, kh, kw] = w.0;
    if kh != kw {
        return Err(Error::invalid("conv2d", format!("square kernel expected, got {w}")));
    }
    if cin != x.c() {
        return Err(Error::ChannelMismatch {
            op: "conv2d",
            expected: cin,
            got: x.c(),
        });
    }
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::ChannelMismatch {
                op: "conv2d bias",
                expected: cout,
                got: b.numel(),
            });
        }
    }
    Ok((ConvGeom::new("conv2d", x, kh, stride, padding)?, cout))
}

/// Also returns the per-item im2col columns when `keep_cols` is set.
fn conv_apply<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    g: &ConvGeom,
    cout: usize,
    keep_cols: bool,
) -> (Tensor<S>, Vec<Vec<S>>) {
    let n = x.shape().n();
    let (rows, p) = (g.rows(), g.cols());
    let mut out = Tensor::zeros([n, cout, g.oh, g.ow]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![S::zero(); rows * p] };
    let mut kept = Vec::new();
    for b in 0..n {
        let src: &[S] = if g.is_pointwise() {
            x.item(b)
        } else {
            im2col(x.item(b), g, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[b * cout * p..(b + 1) * cout * p];
        if let Some(bias) = bias {
            for (co, row) in dst.chunks_mut(p).enumerate() {
                row.fill(bias.data()[co]);
            }
        }
        let beta = if bias.is_some() { S::one() } else { S::zero() };
        S::gemm(cout, rows, p, S::one(), w.data(), (rows as isize, 1), src, (p as isize, 1), beta, dst, (p as isize, 1));
        if keep_cols && !g.is_pointwise() {
            kept.push(cols.clone());
        }
    }
    (out, kept)
}

impl<S: Scalar> Graph<S> {
    /// Cross-correlation of `x (N, Cin, H, W)` with `weight (Cout, Cin, k, k)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let (geom, cout) = conv_check(
            self.shape(x),
            self.shape(weight),
            bias.map(|b| self.shape(b)),
            stride,
            padding,
        )?;
        let (out, saved) = conv_apply(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
            cout,
            self.requires_grad(weight),
        );
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            out,
            inputs,
            Box::new(move |inp, _, g, needs| {
                let (x, w) = (inp[0], inp[1]);
                let n = x.shape().n();
                let (rows, p) = (geom.rows(), geom.cols());
                let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
                let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
                let mut dcols = vec![S::zero(); rows * p];
                for b in 0..n {
                    let gy = &g.data()[b * cout * p..(b + 1) * cout * p];
                    if let Some(dw) = dw.as_mut() {
                        let src: &[S] = if geom.is_pointwise() { x.item(b) } else { &saved[b] };
                        // dW += dY (cout x p) * cols^T (p x rows)
                        S::gemm(cout, p, rows, S::one(), gy, (p as isize, 1), src, (1, p as isize), S::one(), dw.data_mut(), (rows as isize, 1));
                    }
                    if let Some(dx) = dx.as_mut() {
                        let chw = geom.cin * geom.h * geom.w;
                        let dst = &mut dx.data_mut()[b * chw..(b + 1) * chw];
                        if geom.is_pointwise() {
                            S::gemm(rows, cout, p, S::one(), w.data(), (1, rows as isize), gy, (p as isize, 1), S::one(), dst, (p as isize, 1));
                        } else {
                            S::gemm(rows, cout, p, S::one(), w.data(), (1, rows as isize), gy, (p as isize, 1), S::zero(), &mut dcols, (p as isize, 1));
                            col2im(&dcols, &geom, dst);
                        }
                    }
                }
                let db = (inp.len() > 2 && needs[2]).then(|| {
                    let mut db = Tensor::zeros(inp[2].shape());
                    for b in 0..n {
                        for co in 0..cout {
                            let o = (b * cout + co) * p;
                            let s: S = g.data()[o..o + p].iter().copied().sum();
                            db.data_mut()[co] = db.data()[co] + s;
                        }
                    }
                    db
                });
                let mut r = vec![dx, dw];
                if inp.len() > 2 {
                    r.push(db);
                }
                r
            }),
        )
    }

    /// Per-channel `k x k` convolution with same padding, stride 1.
    /// `weight` is `(C, 1, k, k)`.
    pub fn depthwise_conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        let [c, one, k, k2] = ws.0;
        if one != 1 || k != k2 || k % 2 == 0 {
            return Err(Error::invalid("depthwise_conv2d", format!("weight shape {ws}")));
        }
        if c != xs.c() {
            return Err(Error::ChannelMismatch {
                op: "depthwise_conv2d",
                expected: c,
                got: xs.c(),
            });
        }
        let [n, _, h, w] = xs.0;
        let r = (k / 2) as isize;
        let taps = move |y: usize, x: usize, ky: usize, kx: usize| -> Option<usize> {
            let iy = y as isize + ky as isize - r;
            let ix = x as isize + kx as isize - r;
            (iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w).then(|| iy as usize * w + ix as usize)
        };
        let xv = self.value(x);
        let wv = self.value(weight);
        let mut out = Tensor::zeros(xs);
        for b in 0..n {
            for ch in 0..c {
                let src = xv.plane(b, ch);
                let kern = &wv.data()[ch * k * k..(ch + 1) * k * k];
                let bias = bias.map_or(S::zero(), |bv| self.value(bv).data()[ch]);
                let o = (b * c + ch) * h * w;
                let dst = &mut out.data_mut()[o..o + h * w];
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = bias;
                        for ky in 0..k {
                            for kx in 0..k {
                                if let Some(i) = taps(y, xx, ky, kx) {
                                    acc = acc + kern[ky * k + kx] * src[i];
                                }
                            }
                        }
                        dst[y * w + xx] = acc;
                    }
                }
            }
        }
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(
            "depthwise_conv2d",
            out,
            inputs,
            Box::new(move |inp, _, g, needs| {
                let (xv, wv) = (inp[0], inp[1]);
                let mut dx = Tensor::zeros(xs);
                let mut dw = Tensor::zeros(ws);
                let mut db = Tensor::zeros(Shape::new(1, c, 1, 1));
                for b in 0..n {
                    for ch in 0..c {
                        let src = xv.plane(b, ch);
                        let gp = g.plane(b, ch);
                        let kern = &wv.data()[ch * k * k..(ch + 1) * k * k];
                        let o = (b * c + ch) * h * w;
                        for y in 0..h {
                            for xx in 0..w {
                                let gv = gp[y * w + xx];
                                db.data_mut()[ch] = db.data()[ch] + gv;
                                for ky in 0..k {
                                    for kx in 0..k {
                                        if let Some(i) = taps(y, xx, ky, kx) {
                                            let wi = ch * k * k + ky * k + kx;
                                            dw.data_mut()[wi] = dw.data()[wi] + gv * src[i];
                                            dx.data_mut()[o + i] = dx.data()[o + i] + gv * kern[ky * k + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let mut r = vec![needs[0].then_some(dx), needs[1].then_some(dw)];
                if inp.len() > 2 {
                    r.push(needs[2].then(|| db.reshape(inp[2].shape()).expect("bias shape")));
                }
                r
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut cols = vec![0.0; g.rows() * g.cols()];
        for ci in 0..g.cin {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    for oy in 0..g.oh {
                        for ox in 0..g.ow {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                let r = (ci * g.k + ky) * g.k + kx;
                                cols[r * g.cols() + oy * g.ow + ox] = x[(ci * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    #[test]
    fn im2col_matches_direct_indexing_and_col2im_is_adjoint() {
        for (h, w, k, stride, padding) in [
            (5, 7, 3, 1, Padding::Same),
            (6, 6, 2, 2, Padding::Valid),
            (7, 5, 3, 2, Padding::Same),
            (4, 4, 5, 1, Padding::Same),
            (3, 8, 1, 1, Padding::Valid),
        ] {
            let shape = Shape::new(1, 2, h, w);
            let g = ConvGeom::new("test", shape, k, stride, padding).unwrap();
            let x: Vec<f64> = (0..shape.numel()).map(|i| (i as f64 * 0.7).sin()).collect();
            let mut cols = vec![f64::NAN; g.rows() * g.cols()];
            im2col(&x, &g, &mut cols);
            assert_eq!(cols, naive_im2col(&x, &g), "{h}x{w} k{k} s{stride}");
            // <im2col(x), c> == <x, col2im(c)>
            let c: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).cos()).collect();
            let mut back = vec![0.0; x.len()];
            col2im(&c, &g, &mut back);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let x = Tensor::<f64>::from_fn([2, 1, 3, 4], |a, _, h, w| (a * 12 + h * 4 + w) as f64);
        let w = Tensor::ones([1, 1, 1, 1]);
        let b = Tensor::zeros([1, 1, 1, 1]);
        let y = conv2d_forward(&x, &w, Some(&b), 1, Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_on_ones_valid_sums_to_nine() {
        let x = Tensor::<f64>::ones([1, 1, 3, 3]);
        let w = Tensor::ones([1, 1, 3, 3]);
        let y = conv2d_forward(&x, &w, None, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn stride_two_shape() {
        let x = Tensor::<f64>::ones([1, 2, 4, 4]);
        let w = Tensor::ones([3, 2, 2, 2]);
        let y = conv2d_forward(&x, &w, None, 2, Padding::Valid).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 2, 2));
        assert!(y.data().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn same_padding_matches_direct_loops() {
        let x = Tensor::<f64>::from_fn([1, 2, 5, 4], |_, c, h, w| ((c * 20 + h * 4 + w) as f64 * 0.7).sin());
        let w = Tensor::<f64>::from_fn([3, 2, 3, 3], |o, i, a, b| ((o * 18 + i * 9 + a * 3 + b) as f64 * 0.3).cos());
        let y = conv2d_forward(&x, &w, None, 1, Padding::Same).unwrap();
        for o in 0..3 {
            for yy in 0..5 {
                for xx in 0..4 {
                    let mut acc = 0.0;
                    for i in 0..2 {
                        for a in 0..3 {
                            for b in 0..3 {
                                let (iy, ix) = (yy as isize + a as isize - 1, xx as isize + b as isize - 1);
                                if iy >= 0 && ix >= 0 && iy < 5 && ix < 4 {
                                    acc += w.at(o, i, a, b) * x.at(0, i, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    assert!((y.at(0, o, yy, xx) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let x = Tensor::<f64>::ones([1, 2, 4, 4]);
        let w = Tensor::ones([1, 3, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &w, None, 1, Padding::Same),
            Err(Error::ChannelMismatch { .. })
        ));
    }
}

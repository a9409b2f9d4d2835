//! Bicubic interpolation used for the LR upsampling layer and the baseline.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Keys cubic convolution coefficient.
pub const BICUBIC_A: f64 = -0.5;

fn cubic(t: f64) -> f64 {
    let a = BICUBIC_A;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Four source indices and weights for each output coordinate. Source
/// sample `i` sits at output coordinate `i·n_out/n_in`, the sampling grid of
/// k-space truncation; edges replicate.
fn taps(n_in: usize, n_out: usize) -> Vec<([usize; 4], [f64; 4])> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = o as f64 * ratio;
            let base = src.floor();
            let frac = src - base;
            let mut idx = [0usize; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let i = base as isize + k as isize - 1;
                idx[k] = i.clamp(0, n_in as isize - 1) as usize;
                w[k] = cubic(frac - (k as f64 - 1.0));
            }
            (idx, w)
        })
        .collect()
}

/// Separable bicubic resize of every plane to `(out_h, out_w)`.
pub fn bicubic_resize<S: Scalar>(x: &Tensor<S>, out_h: usize, out_w: usize) -> Tensor<S> {
    let [n, c, h, w] = x.shape().0;
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let mut rows = vec![0.0f64; h * out_w];
    for b in 0..n {
        for ch in 0..c {
            let plane = x.plane(b, ch);
            for y in 0..h {
                for (ox, (idx, wt)) in tx.iter().enumerate() {
                    rows[y * out_w + ox] = (0..4).map(|k| wt[k] * plane[y * w + idx[k]].to_f64()).sum();
                }
            }
            let o = (b * c + ch) * out_h * out_w;
            for (oy, (idx, wt)) in ty.iter().enumerate() {
                for ox in 0..out_w {
                    let v: f64 = (0..4).map(|k| wt[k] * rows[idx[k] * out_w + ox]).sum();
                    out.data_mut()[o + oy * out_w + ox] = S::lit(v);
                }
            }
        }
    }
    out
}

pub fn bicubic_upsample<S: Scalar>(x: &Tensor<S>, scale: usize) -> Tensor<S> {
    let s = x.shape();
    bicubic_resize(x, s.h() * scale, s.w() * scale)
}

//! Wall-clock scaling of the four-direction global scan against naive
//! softmax attention over the same tokens.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::Result;
use crate::nn::{Builder, ParamStore};
use crate::ssm::{ss2d_global, Discretization, SsmParams};
use crate::tensor::Tensor;

pub const BENCH_CSV_HEADER: &str = "grid,tokens,ss2d_seconds,attention_seconds";

#[derive(Clone, Copy, Debug)]
pub struct BenchRow {
    pub grid: usize,
    pub tokens: usize,
    pub ss2d_seconds: f64,
    pub attention_seconds: f64,
}

/// Single-head softmax attention with `Q = K = V = x`, `x` of shape
/// `(tokens, dim)`, computed one query row at a time.
pub fn naive_attention(x: &[f32], tokens: usize, dim: usize) -> Vec<f32> {
    let scale = 1.0 / (dim as f32).sqrt();
    let mut out = vec![0.0f32; tokens * dim];
    let mut scores = vec![0.0f32; tokens];
    for i in 0..tokens {
        let q = &x[i * dim..(i + 1) * dim];
        let mut max = f32::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let k = &x[j * dim..(j + 1) * dim];
            *s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
            max = max.max(*s);
        }
        let mut total = 0.0f32;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        let row = &mut out[i * dim..(i + 1) * dim];
        for (j, &s) in scores.iter().enumerate() {
            let v = &x[j * dim..(j + 1) * dim];
            for (o, &vv) in row.iter_mut().zip(v) {
                *o += s * vv;
            }
        }
        row.iter_mut().for_each(|o| *o /= total);
    }
    out
}

/// Best-of-`reps` seconds; the first call is a warm-up.
fn best_time(reps: usize, mut f: impl FnMut()) -> f64 {
    f();
    (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Times both operators on a `grid × grid` token grid.
pub fn bench_grid(grid: usize, channels: usize, n_state: usize, reps: usize, seed: u64) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let params = SsmParams::new(&mut Builder::new(&mut store, &mut rng), "ssm", channels, n_state);
    let u = Tensor::<f32>::from_fn([1, channels, grid, grid], |_, _, _, _| rng.gen_range(-1.0..1.0));
    let mut ss2d_err = None;
    let ss2d_seconds = best_time(reps, || {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let x = g.constant(u.clone());
        if let Err(e) = ss2d_global(&mut g, x, &[params.bind(&p)], Discretization::Zoh) {
            ss2d_err = Some(e);
        }
    });
    if let Some(e) = ss2d_err {
        return Err(e);
    }
    let tokens = grid * grid;
    // Token-major copy of the channel-major grid.
    let mut x = vec![0.0f32; tokens * channels];
    for c in 0..channels {
        for t in 0..tokens {
            x[t * channels + c] = u.data()[c * tokens + t];
        }
    }
    let attention_seconds = best_time(reps, || {
        std::hint::black_box(naive_attention(std::hint::black_box(&x), tokens, channels));
    });
    Ok(BenchRow {
        grid,
        tokens,
        ss2d_seconds,
        attention_seconds,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// `(ss2d slope, attention slope)` in token count.
pub fn slopes(rows: &[BenchRow]) -> (f64, f64) {
    let pts = |f: fn(&BenchRow) -> f64| rows.iter().map(|r| (r.tokens as f64, f(r))).collect::<Vec<_>>();
    (loglog_slope(&pts(|r| r.ss2d_seconds)), loglog_slope(&pts(|r| r.attention_seconds)))
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BENCH_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{:.6e},{:.6e}\n", r.grid, r.tokens, r.ss2d_seconds, r.attention_seconds));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(1.5))).collect();
        assert!((loglog_slope(&pts) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn attention_matches_direct_formula() {
        let x = [1.0f32, 0.0, 0.0, 1.0, 1.0, 1.0];
        let y = naive_attention(&x, 3, 2);
        let s = 1.0 / 2f32.sqrt();
        for i in 0..3 {
            let q = &x[i * 2..i * 2 + 2];
            let w: Vec<f32> = (0..3).map(|j| ((q[0] * x[j * 2] + q[1] * x[j * 2 + 1]) * s).exp()).collect();
            let z: f32 = w.iter().sum();
            for d in 0..2 {
                let e: f32 = (0..3).map(|j| w[j] * x[j * 2 + d]).sum::<f32>() / z;
                assert!((y[i * 2 + d] - e).abs() < 1e-6);
            }
        }
    }
}

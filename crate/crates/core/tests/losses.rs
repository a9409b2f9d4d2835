mod common;

use common::probe_loss;
use glmamba::gradcheck::{check, random_tensor};
use glmamba::losses::{celoss, l1_loss, total_loss, EdgeKernels, LossWeights, E1, E2, E3};
use glmamba::metrics::{gaussian_taps, psnr, ssim};
use glmamba::{Graph, Tensor};
use proptest::prelude::*;

fn eval_l1(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    let l = l1_loss(&mut g, x, y).unwrap();
    g.value(l).item(0)[0]
}

fn eval_ce(sr: &Tensor<f64>, hr: &Tensor<f64>, k: &EdgeKernels) -> glmamba::Result<f64> {
    let mut g = Graph::new();
    let (x, y) = (g.constant(sr.clone()), g.constant(hr.clone()));
    let l = celoss(&mut g, x, y, k)?;
    Ok(g.value(l).data()[0])
}

/// Per-kernel interior responses computed separately and then compared.
fn celoss_oracle(sr: &Tensor<f64>, hr: &Tensor<f64>, kernels: &[[[f64; 3]; 3]; 3]) -> f64 {
    let [n, _, h, w] = sr.shape().0;
    let resp = |t: &Tensor<f64>, k: &[[f64; 3]; 3], b: usize, i: usize, j: usize| -> f64 {
        let mut acc = 0.0;
        for (di, row) in k.iter().enumerate() {
            for (dj, &kv) in row.iter().enumerate() {
                acc += kv * t.at(b, 0, i + di, j + dj);
            }
        }
        acc
    };
    let mut terms = 0.0;
    for k in kernels {
        let mut sum = 0.0;
        for b in 0..n {
            for i in 0..h - 2 {
                for j in 0..w - 2 {
                    let d = resp(sr, k, b, i, j) - resp(hr, k, b, i, j);
                    sum += d * d;
                }
            }
        }
        terms += sum / (n * (h - 2) * (w - 2)) as f64;
    }
    terms / 3.0
}

#[test]
fn l1_examples() {
    let a = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
    let b = Tensor::zeros([1, 1, 1, 2]);
    assert_eq!(eval_l1(&a, &b), 1.0);
    assert_eq!(eval_l1(&a, &a), 0.0);
    let x = random_tensor([2, 1, 4, 4], 1, 1.0);
    let y = random_tensor([2, 1, 4, 4], 2, 1.0);
    assert_eq!(eval_l1(&x, &y), eval_l1(&y, &x));
}

#[test]
fn edge_kernels_as_printed() {
    let sum = |k: &[[f64; 3]; 3]| k.iter().flatten().sum::<f64>();
    assert_eq!(sum(&E1), 0.0);
    assert_eq!(sum(&E2), 2.0);
    assert_eq!(sum(&E3), 0.0);
    assert_eq!(E2[2][2], 1.0);
    assert_eq!(sum(&EdgeKernels::new(true).kernels[1]), 0.0);
}

#[test]
fn celoss_examples() {
    let k = EdgeKernels::default();
    let x = random_tensor([1, 1, 6, 6], 3, 1.0);
    assert_eq!(eval_ce(&x, &x, &k).unwrap(), 0.0);
    let ones = Tensor::ones([1, 1, 7, 5]);
    let zeros = Tensor::zeros([1, 1, 7, 5]);
    assert!((eval_ce(&ones, &zeros, &k).unwrap() - 4.0 / 3.0).abs() < 1e-9);
    assert!(eval_ce(&ones, &zeros, &EdgeKernels::new(true)).unwrap().abs() < 1e-12);
    assert!(eval_ce(&Tensor::zeros([1, 1, 2, 5]), &Tensor::zeros([1, 1, 2, 5]), &k).is_err());
    assert!(eval_ce(&Tensor::zeros([1, 2, 4, 4]), &Tensor::zeros([1, 2, 4, 4]), &k).is_err());
}

#[test]
fn celoss_matches_per_kernel_oracle() {
    for e2_symmetric in [false, true] {
        let k = EdgeKernels::new(e2_symmetric);
        let sr = random_tensor([2, 1, 7, 9], 4, 1.0);
        let hr = random_tensor([2, 1, 7, 9], 5, 1.0);
        let got = eval_ce(&sr, &hr, &k).unwrap();
        assert!((got - celoss_oracle(&sr, &hr, &k.kernels)).abs() < 1e-12);
    }
}

#[test]
fn celoss_shrinks_as_blur_approaches_step_edge() {
    let (h, w) = (8, 10);
    let hr = Tensor::from_fn([1, 1, h, w], |_, _, _, j| if j < w / 2 { 0.0 } else { 1.0 });
    // Horizontal 3-tap box blur with edge replication.
    let blur = Tensor::from_fn([1, 1, h, w], |_, _, i, j| {
        let at = |jj: isize| hr.at(0, 0, i, jj.clamp(0, w as isize - 1) as usize);
        (at(j as isize - 1) + at(j as isize) + at(j as isize + 1)) / 3.0
    });
    let k = EdgeKernels::default();
    let mut last = f64::INFINITY;
    for step in 0..=10 {
        let t = step as f64 / 10.0;
        let sr = hr.zip_map(&blur, |a, b| t * a + (1.0 - t) * b).unwrap();
        let ce = eval_ce(&sr, &hr, &k).unwrap();
        assert!(ce < last || (step == 10 && ce == 0.0), "t={t}: {ce} !< {last}");
        last = ce;
    }
    assert!(eval_ce(&blur, &hr, &k).unwrap() > 0.0);
}

proptest! {
    #[test]
    fn celoss_is_nonnegative(seed in any::<u64>(), h in 3usize..9, w in 3usize..9) {
        let sr = random_tensor([1, 1, h, w], seed, 2.0);
        let hr = random_tensor([1, 1, h, w], seed ^ 1, 2.0);
        prop_assert!(eval_ce(&sr, &hr, &EdgeKernels::default()).unwrap() >= 0.0);
    }

    #[test]
    fn loss_scales_linearly_with_weights(seed in any::<u64>(), c in 0.1f64..10.0) {
        let t: Vec<_> = (0..4).map(|k| random_tensor([1, 1, 5, 5], seed.wrapping_add(k), 1.0)).collect();
        let w = LossWeights::default();
        let scaled = LossWeights { alpha: c * w.alpha, beta: c * w.beta, gamma: c * w.gamma };
        let a = eval_total(&t, &w);
        let b = eval_total(&t, &scaled);
        prop_assert!((b - c * a).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

fn eval_total(t: &[Tensor<f64>], w: &LossWeights) -> f64 {
    let mut g = Graph::new();
    let v: Vec<_> = t.iter().map(|x| g.constant(x.clone())).collect();
    let l = total_loss(&mut g, v[0], v[1], v[2], v[3], w, &EdgeKernels::default()).unwrap();
    g.value(l.total).data()[0]
}

#[test]
fn total_loss_examples() {
    let hr = random_tensor([1, 1, 6, 6], 1, 1.0);
    let rf = random_tensor([1, 1, 6, 6], 2, 1.0);
    assert_eq!(eval_total(&[hr.clone(), hr.clone(), rf.clone(), rf.clone()], &LossWeights::default()), 0.0);
    let sr = random_tensor([1, 1, 6, 6], 3, 1.0);
    let rec = random_tensor([1, 1, 6, 6], 4, 1.0);
    let only_l1 = LossWeights { alpha: 1.0, beta: 0.0, gamma: 0.0 };
    assert_eq!(eval_total(&[sr.clone(), hr.clone(), rec.clone(), rf.clone()], &only_l1), eval_l1(&sr, &hr));
    let w = LossWeights::default();
    assert!((w.combine(1.0, 1.0, 1.0) - 1.1).abs() < 1e-15);
    let want = w.combine(eval_l1(&sr, &hr), eval_l1(&rec, &rf), eval_ce(&sr, &hr, &EdgeKernels::default()).unwrap());
    assert!((eval_total(&[sr, hr, rec, rf], &w) - want).abs() < 1e-14);
}

#[test]
fn gradcheck_l1_and_celoss() {
    let sr = random_tensor([2, 1, 6, 5], 7, 1.0);
    let hr = random_tensor([2, 1, 6, 5], 8, 1.0);
    let r = check(&[sr.clone(), hr.clone()], 1e-6, None, |g, v| celoss(g, v[0], v[1], &EdgeKernels::default())).unwrap();
    assert!(r.passes(1e-4), "celoss {r:?}");
    let r = check(&[sr.clone(), hr.clone()], 1e-6, None, |g, v| l1_loss(g, v[0], v[1])).unwrap();
    assert!(r.passes(1e-4), "l1 {r:?}");
    let rec = random_tensor([2, 1, 6, 5], 9, 1.0);
    let rf = random_tensor([2, 1, 6, 5], 10, 1.0);
    let r = check(&[sr, hr, rec, rf], 1e-6, None, |g, v| {
        let t = total_loss(g, v[0], v[1], v[2], v[3], &LossWeights::default(), &EdgeKernels::default())?;
        let p = probe_loss(g, t.total, 1)?;
        Ok(p)
    })
    .unwrap();
    assert!(r.passes(1e-4), "total {r:?}");
}

fn psnr_oracle(a: &Tensor<f64>, b: &Tensor<f64>, range: f64) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        s += (x - y).powi(2);
    }
    10.0 * (range * range / (s / a.numel() as f64)).log10()
}

/// Direct 11×11 window sums at every valid position.
fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>, range: f64) -> f64 {
    let [_, _, h, w] = a.shape().0;
    let ws = 11;
    let sigma: f64 = 1.5;
    let mut win = [[0.0f64; 11]; 11];
    let mut tot = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            tot += *v;
        }
    }
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for y in 0..=h - ws {
        for x in 0..=w - ws {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..ws {
                for j in 0..ws {
                    let g = win[i][j] / tot;
                    let (p, q) = (a.at(0, 0, y + i, x + j), b.at(0, 0, y + i, x + j));
                    mx += g * p;
                    my += g * q;
                    sxx += g * p * p;
                    syy += g * q * q;
                    sxy += g * p * q;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

fn unit_image(seed: u64) -> Tensor<f64> {
    random_tensor([1, 1, 32, 32], seed, 0.5).map(|v| v + 0.5)
}

#[test]
fn psnr_examples() {
    let a = unit_image(1);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
    let b = a.map(|v| v + 0.1);
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    let c = unit_image(2);
    let p = psnr(&a, &c, 1.0).unwrap();
    let scaled = psnr(&a.map(|v| 3.0 * v), &c.map(|v| 3.0 * v), 3.0).unwrap();
    assert!((p - scaled).abs() < 1e-9);
    assert!(psnr(&a, &c, 0.0).is_err());
}

#[test]
fn metrics_match_brute_force_oracles() {
    for seed in 0..4 {
        let a = unit_image(seed);
        let b = a.zip_map(&unit_image(seed + 100), |x, y| 0.7 * x + 0.3 * y).unwrap();
        assert!((psnr(&a, &b, 1.0).unwrap() - psnr_oracle(&a, &b, 1.0)).abs() < 1e-6);
        assert!((ssim(&a, &b, 1.0).unwrap() - ssim_oracle(&a, &b, 1.0)).abs() < 1e-6);
    }
}

#[test]
fn ssim_properties() {
    let a = unit_image(5);
    let b = unit_image(6);
    assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    assert!(ssim(&a, &a.map(|v| 1.0 - v), 1.0).unwrap() < 1.0);
    assert_eq!(ssim(&a, &b, 1.0).unwrap(), ssim(&b, &a, 1.0).unwrap());
    let s = ssim(&a, &b, 1.0).unwrap();
    assert!((-1.0..=1.0).contains(&s));
    assert!(ssim(&Tensor::zeros([1, 1, 10, 32]), &Tensor::zeros([1, 1, 10, 32]), 1.0).is_err());
    let t = gaussian_taps(11, 1.5);
    assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    assert_eq!(t[0], t[10]);
}

mod common;

use common::{builder_rng, check_with_params, probe_loss, randomize};
use glmamba::autodiff::{bilinear, conv2d_forward, tap_offset, Padding};
use glmamba::blocks::{modulator, ChannelAttention, DeformParams, MambaBlockParams, MambaOptions, PatchEmbed};
use glmamba::gradcheck::{check, random_tensor};
use glmamba::nn::{Builder, ParamStore};
use glmamba::ssm::{Discretization, ScanMode};
use glmamba::{Error, Graph, Tensor};
use proptest::prelude::*;

/// Direct-loop deformable convolution with its own bilinear interpolation.
fn deform_oracle(x: &Tensor<f64>, off: &Tensor<f64>, mask: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>) -> Tensor<f64> {
    let [n, cin, h, wd] = x.shape().0;
    let cout = w.shape().n();
    let sample = |b: usize, c: usize, y: f64, xx: f64| -> f64 {
        let (y0, x0) = (y.floor(), xx.floor());
        let mut acc = 0.0;
        for (yy, wy) in [(y0, 1.0 - (y - y0)), (y0 + 1.0, y - y0)] {
            for (xc, wx) in [(x0, 1.0 - (xx - x0)), (x0 + 1.0, xx - x0)] {
                if yy >= 0.0 && xc >= 0.0 && yy < h as f64 && xc < wd as f64 {
                    acc += wy * wx * x.at(b, c, yy as usize, xc as usize);
                }
            }
        }
        acc
    };
    Tensor::from_fn([n, cout, h, wd], |b, co, i, j| {
        let mut acc = bias.map_or(0.0, |t| t.data()[co]);
        for ky in 0..3 {
            for kx in 0..3 {
                let k = ky * 3 + kx;
                let dy = off.at(b, 2 * k, i, j).clamp(-(h as f64), h as f64);
                let dx = off.at(b, 2 * k + 1, i, j).clamp(-(wd as f64), wd as f64);
                let y = i as f64 + ky as f64 - 1.0 + dy;
                let xx = j as f64 + kx as f64 - 1.0 + dx;
                for ci in 0..cin {
                    acc += w.at(co, ci, ky, kx) * sample(b, ci, y, xx) * mask.at(b, k, i, j);
                }
            }
        }
        acc
    })
}

fn run_deform(x: &Tensor<f64>, off: &Tensor<f64>, mask: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>) -> glmamba::Result<Tensor<f64>> {
    let mut g = Graph::new();
    let (xv, ov, mv, wv) = (g.constant(x.clone()), g.constant(off.clone()), g.constant(mask.clone()), g.constant(w.clone()));
    let bv = bias.map(|b| g.constant(b.clone()));
    let y = g.deform_conv(xv, ov, mv, wv, bv)?;
    Ok(g.value(y).clone())
}

#[test]
fn zero_offsets_unit_masks_equal_conv2d_bit_for_bit() {
    for (seed, (h, w)) in [(1u64, (8, 8)), (2, (5, 7)), (3, (3, 3)), (4, (1, 6))] {
        let x = random_tensor([2, 3, h, w], seed, 1.0);
        let wt = random_tensor([4, 3, 3, 3], seed + 10, 1.0);
        let b = random_tensor([1, 4, 1, 1], seed + 20, 1.0);
        let off = Tensor::zeros([2, 18, h, w]);
        let mask = Tensor::ones([2, 9, h, w]);
        let got = run_deform(&x, &off, &mask, &wt, Some(&b)).unwrap();
        let want = conv2d_forward(&x, &wt, Some(&b), 1, Padding::Same).unwrap();
        for (p, q) in got.data().iter().zip(want.data()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }
}

#[test]
fn deform_block_with_saturated_masks_equals_conv2d() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = builder_rng(5);
    let d = DeformParams::new(&mut Builder::new(&mut store, &mut rng), "d", 2, 3);
    // Zero offset predictor, mask logits pinned high enough that sigmoid is exactly 1.
    let mb = d.mask_conv.bias.unwrap();
    *store.get_mut(mb) = Tensor::full([1, 9, 1, 1], 800.0);
    let x = random_tensor([1, 2, 6, 6], 7, 1.0);
    let mut g = Graph::new();
    let p = store.bind_all(&mut g);
    let xv = g.constant(x.clone());
    let y = d.forward(&mut g, &p, xv).unwrap();
    let bias = store.get(d.conv.bias.unwrap());
    let want = conv2d_forward(&x, store.get(d.conv.weight), Some(bias), 1, Padding::Same).unwrap();
    for (p, q) in g.value(y).data().iter().zip(want.data()) {
        assert_eq!(p.to_bits(), q.to_bits());
    }
}

#[test]
fn half_pixel_shift_on_ramp_reads_midpoints() {
    let (h, w) = (4, 5);
    let x = Tensor::from_fn([1, 1, h, w], |_, _, _, j| j as f64);
    let mut wt = Tensor::zeros([1, 1, 3, 3]);
    wt.set(0, 0, 1, 1, 1.0);
    let mut off = Tensor::zeros([1, 18, h, w]);
    for i in 0..h {
        for j in 0..w {
            off.set(0, 2 * 4 + 1, i, j, 0.5);
        }
    }
    let y = run_deform(&x, &off, &Tensor::ones([1, 9, h, w]), &wt, None).unwrap();
    assert_eq!(y.at(0, 0, 2, 1), 1.5);
    assert_eq!(y.at(0, 0, 0, 3), 3.5);
    // The last column's right neighbour is outside and reads zero.
    assert_eq!(y.at(0, 0, 1, w - 1), 0.5 * (w - 1) as f64);
}

#[test]
fn zero_masks_give_zero_output() {
    let x = random_tensor([1, 2, 5, 5], 1, 1.0);
    let off = random_tensor([1, 18, 5, 5], 2, 1.5);
    let wt = random_tensor([3, 2, 3, 3], 3, 1.0);
    let y = run_deform(&x, &off, &Tensor::zeros([1, 9, 5, 5]), &wt, None).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn integer_positions_read_pixels_directly() {
    let x = random_tensor([1, 1, 6, 7], 4, 1.0);
    let plane = x.plane(0, 0);
    for i in 0..6 {
        for j in 0..7 {
            assert_eq!(bilinear(plane, 6, 7, i as f64, j as f64), x.at(0, 0, i, j));
        }
    }
    assert_eq!(bilinear(plane, 6, 7, -1.0, 2.0), 0.0);
    assert_eq!(bilinear(plane, 6, 7, 2.0, 7.0), 0.0);
    assert_eq!(tap_offset(0), (-1, -1));
}

#[test]
fn fractional_offsets_match_direct_loop_oracle() {
    let (h, w) = (6, 5);
    let x = random_tensor([2, 3, h, w], 11, 1.0);
    let off = random_tensor([2, 18, h, w], 12, 2.5);
    let mask = random_tensor([2, 9, h, w], 13, 1.0).map(|v| 0.5 + 0.5 * v);
    let wt = random_tensor([2, 3, 3, 3], 14, 1.0);
    let b = random_tensor([1, 2, 1, 1], 15, 1.0);
    let got = run_deform(&x, &off, &mask, &wt, Some(&b)).unwrap();
    let want = deform_oracle(&x, &off, &mask, &wt, Some(&b));
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn huge_offsets_are_clamped() {
    let (h, w) = (4, 4);
    let x = random_tensor([1, 1, h, w], 1, 1.0);
    let off = Tensor::full([1, 18, h, w], 1e9);
    let wt = random_tensor([1, 1, 3, 3], 2, 1.0);
    let mask = Tensor::ones([1, 9, h, w]);
    let got = run_deform(&x, &off, &mask, &wt, None).unwrap();
    let want = deform_oracle(&x, &Tensor::full([1, 18, h, w], 4.0), &mask, &wt, None);
    assert_eq!(got, want);
}

#[test]
fn non_finite_offsets_are_rejected() {
    let mut off = Tensor::zeros([1, 18, 3, 3]);
    off.set(0, 3, 1, 1, f64::NAN);
    let err = run_deform(
        &Tensor::ones([1, 1, 3, 3]),
        &off,
        &Tensor::ones([1, 9, 3, 3]),
        &Tensor::ones([1, 1, 3, 3]),
        None,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
}

#[test]
fn gradcheck_deform_conv_all_inputs() {
    let (h, w) = (5, 4);
    let x = random_tensor([2, 2, h, w], 31, 1.0);
    let off = random_tensor([2, 18, h, w], 32, 1.7);
    let mask = random_tensor([2, 9, h, w], 33, 1.0);
    let wt = random_tensor([3, 2, 3, 3], 34, 1.0);
    let b = random_tensor([1, 3, 1, 1], 35, 1.0);
    let r = check(&[x, off, mask, wt, b], 1e-6, None, |g, v| {
        let y = g.deform_conv(v[0], v[1], v[2], v[3], Some(v[4]))?;
        probe_loss(g, y, 36)
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn gradcheck_deform_block_through_predictors() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = builder_rng(3);
    let d = DeformParams::new(&mut Builder::new(&mut store, &mut rng), "d", 2, 2);
    randomize(&mut store, 40, 0.3);
    let x = random_tensor([1, 2, 5, 5], 41, 1.0);
    let r = check_with_params(&[x], &store, None, |g, p, v| {
        let y = d.forward(g, p, v[0])?;
        probe_loss(g, y, 42)
    });
    assert!(r.passes(1e-4), "{r:?}");
}

fn mamba(channels: usize, options: MambaOptions, seed: u64) -> (ParamStore<f64>, MambaBlockParams) {
    let mut store = ParamStore::<f64>::new();
    let mut rng = builder_rng(seed);
    let m = MambaBlockParams::new(&mut Builder::new(&mut store, &mut rng), "m", channels, 4, options);
    (store, m)
}

fn run_mamba(store: &ParamStore<f64>, m: &MambaBlockParams, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let p = store.bind_all(&mut g);
    let xv = g.constant(x.clone());
    let y = m.forward(&mut g, &p, xv).unwrap();
    g.value(y).clone()
}

#[test]
fn mamba_block_preserves_shape_in_both_modes() {
    for mode in [ScanMode::Global, ScanMode::Local] {
        let (store, m) = mamba(8, MambaOptions { mode, ..Default::default() }, 1);
        let x = random_tensor([2, 8, 4, 6], 2, 1.0);
        assert_eq!(run_mamba(&store, &m, &x).shape(), x.shape());
    }
}

#[test]
fn zeroed_output_projection_leaves_residual_identity() {
    let (mut store, m) = mamba(6, MambaOptions::default(), 4);
    *store.get_mut(m.lin_out.weight) = Tensor::zeros([6, 6, 1, 1]);
    for x in [Tensor::zeros([1, 6, 4, 4]), random_tensor([1, 6, 4, 4], 5, 1.0)] {
        assert_eq!(run_mamba(&store, &m, &x), x);
    }
}

#[test]
fn every_mamba_parameter_receives_gradient() {
    for direction_specific in [false, true] {
        let opts = MambaOptions {
            direction_specific,
            ..Default::default()
        };
        let (mut store, m) = mamba(4, opts, 6);
        randomize(&mut store, 60, 0.5);
        let mut g = Graph::new();
        let p = store.bind_all(&mut g);
        let x = g.constant(random_tensor([1, 4, 4, 4], 7, 1.0));
        let y = m.forward(&mut g, &p, x).unwrap();
        let loss = probe_loss(&mut g, y, 8).unwrap();
        let grads = g.backward(loss).unwrap();
        for id in store.ids() {
            let gr = grads.get(p.var(id)).expect("gradient present");
            assert!(gr.max_abs() > 0.0, "dead parameter {}", store.name(id));
        }
    }
}

#[test]
fn gradcheck_mamba_block() {
    for (mode, residual, rule) in [
        (ScanMode::Global, true, Discretization::Zoh),
        (ScanMode::Local, false, Discretization::Zoh),
        (ScanMode::Global, true, Discretization::Euler),
    ] {
        let opts = MambaOptions {
            mode,
            residual,
            rule,
            ..Default::default()
        };
        let (mut store, m) = mamba(4, opts, 9);
        randomize(&mut store, 90, 0.5);
        let x = random_tensor([1, 4, 4, 4], 91, 1.0);
        let r = check_with_params(&[x], &store, None, |g, p, v| {
            let y = m.forward(g, p, v[0])?;
            probe_loss(g, y, 92)
        });
        assert!(r.passes(1e-4), "{mode:?}: {r:?}");
    }
}

fn attention(channels: usize, seed: u64) -> (ParamStore<f64>, ChannelAttention) {
    let mut store = ParamStore::<f64>::new();
    let mut rng = builder_rng(seed);
    let ca = ChannelAttention::new(&mut Builder::new(&mut store, &mut rng), "ca", channels);
    randomize(&mut store, seed * 7, 1.0);
    (store, ca)
}

fn run_ca(store: &ParamStore<f64>, ca: &ChannelAttention, x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::new();
    let p = store.bind_all(&mut g);
    let xv = g.constant(x.clone());
    let s = ca.scale(&mut g, &p, xv).unwrap();
    let y = ca.forward(&mut g, &p, xv).unwrap();
    (g.value(y).clone(), g.value(s).clone())
}

#[test]
fn saturated_channel_attention_is_identity() {
    let (mut store, ca) = attention(8, 2);
    *store.get_mut(ca.excite.bias.unwrap()) = Tensor::full([1, 8, 1, 1], 800.0);
    let x = random_tensor([2, 8, 3, 3], 1, 1.0);
    assert_eq!(run_ca(&store, &ca, &x).0, x);
}

#[test]
fn channel_attention_scale_in_unit_interval() {
    let (store, ca) = attention(8, 3);
    let x = random_tensor([3, 8, 5, 5], 2, 4.0);
    let (_, s) = run_ca(&store, &ca, &x);
    assert_eq!(s.shape().0, [3, 8, 1, 1]);
    assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn channel_attention_is_permutation_equivariant() {
    let c = 8;
    let perm = [3, 0, 7, 1, 6, 2, 5, 4];
    let (store, ca) = attention(c, 4);
    let x = random_tensor([1, c, 3, 4], 5, 1.0);
    let xp = Tensor::from_fn(x.shape(), |n, k, i, j| x.at(n, perm[k], i, j));
    let mut permuted = store.clone();
    let sq = store.get(ca.squeeze.weight).clone();
    let hidden = sq.shape().n();
    *permuted.get_mut(ca.squeeze.weight) = Tensor::from_fn([hidden, c, 1, 1], |o, k, _, _| sq.at(o, perm[k], 0, 0));
    let ex = store.get(ca.excite.weight).clone();
    *permuted.get_mut(ca.excite.weight) = Tensor::from_fn([c, hidden, 1, 1], |k, i, _, _| ex.at(perm[k], i, 0, 0));
    let eb = store.get(ca.excite.bias.unwrap()).clone();
    *permuted.get_mut(ca.excite.bias.unwrap()) = Tensor::from_fn([1, c, 1, 1], |_, k, _, _| eb.at(0, perm[k], 0, 0));
    let (y, _) = run_ca(&store, &ca, &x);
    let (yp, _) = run_ca(&permuted, &ca, &xp);
    let want = Tensor::from_fn(y.shape(), |n, k, i, j| y.at(n, perm[k], i, j));
    assert!(yp.max_abs_diff(&want) < 1e-12);
}

fn run_mod(d: &Tensor<f64>, m: &Tensor<f64>) -> glmamba::Result<Tensor<f64>> {
    let mut g = Graph::new();
    let (dv, mv) = (g.constant(d.clone()), g.constant(m.clone()));
    let y = modulator(&mut g, dv, mv)?;
    Ok(g.value(y).clone())
}

#[test]
fn modulator_degenerate_cases() {
    let m = random_tensor([1, 3, 4, 4], 1, 2.0);
    let d = random_tensor([1, 3, 4, 4], 2, 2.0);
    assert_eq!(run_mod(&Tensor::zeros(m.shape()), &m).unwrap(), m.map(|v| 0.5 * v));
    assert_eq!(run_mod(&d, &Tensor::zeros(d.shape())).unwrap(), d);
    let big = Tensor::full(m.shape(), 800.0);
    let sat = run_mod(&big, &m).unwrap();
    assert!(sat.max_abs_diff(&m.map(|v| v + 800.0)) < 1e-12);
    assert!(run_mod(&d, &Tensor::zeros([1, 3, 4, 5])).is_err());
}

proptest! {
    #[test]
    fn modulator_is_bounded(seed in any::<u64>(), amp in 0.1f64..50.0) {
        let d = random_tensor([1, 2, 3, 3], seed, amp);
        let m = random_tensor([1, 2, 3, 3], seed ^ 0xabc, amp);
        let y = run_mod(&d, &m).unwrap();
        for ((y, d), m) in y.data().iter().zip(d.data()).zip(m.data()) {
            prop_assert!(y.abs() <= d.abs() + m.abs() + 1e-12);
        }
    }
}

#[test]
fn gradcheck_modulator() {
    let d = random_tensor([1, 2, 3, 3], 1, 2.0);
    let m = random_tensor([1, 2, 3, 3], 2, 2.0);
    let r = check(&[d, m], 1e-5, None, |g, v| {
        let y = modulator(g, v[0], v[1])?;
        probe_loss(g, y, 3)
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn patch_embedding_round_trips_resolution() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = builder_rng(1);
    let pe = PatchEmbed::new(&mut Builder::new(&mut store, &mut rng), "pe", 3, 2);
    let mut g = Graph::new();
    let p = store.bind_all(&mut g);
    let x = g.constant(random_tensor([1, 3, 6, 8], 2, 1.0));
    let e = pe.embed(&mut g, &p, x).unwrap();
    assert_eq!(g.shape(e).0, [1, 3, 3, 4]);
    let u = pe.unembed(&mut g, &p, e).unwrap();
    assert_eq!(g.shape(u).0, [1, 3, 6, 8]);
    let odd = g.constant(Tensor::zeros([1, 3, 5, 8]));
    assert!(pe.embed(&mut g, &p, odd).is_err());
}

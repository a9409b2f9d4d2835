//! The invariant, oracle and gradient properties run by `glsr check` and the
//! acceptance tests. Every check is deterministic.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audit::{op_audit, randomize, ssm_tensors, ssm_vars, OP_EPS, OP_TOL};
use crate::autodiff::{conv2d_forward, Graph, Padding};
use crate::checkpoint;
use crate::config::ModelConfig;
use crate::data::{gen_synthetic, SyntheticSpec};
use crate::error::Result;
use crate::fusion::FusionParams;
use crate::gradcheck::{audit_model, random_tensor};
use crate::losses::{celoss, EdgeKernels};
use crate::model::{param_report, GlMamba, REFERENCE_PARAMS};
use crate::nn::{Builder, ParamStore};
use crate::pipeline::{eval_csv, evaluate, loss_csv_row, Session};
use crate::ssm::{
    discretize_scalar, quadrants, scan_expand, scan_merge, selective_scan_conv, selective_scan_recurrent, ss2d, Direction,
    DiscreteSystem, Discretization, PatchGrid, ScanMode, ScanSequence,
};
use crate::tensor::Tensor;
use crate::train::Batch;

#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type CheckFn = fn() -> Result<(bool, String)>;

/// `(name, check)` in report order.
pub const CHECKS: &[(&str, CheckFn)] = &[
    ("scan_forms_agree", scan_forms_agree),
    ("discretize_oracle", discretize_oracle),
    ("gradient_ops", gradient_ops),
    ("gradient_model", gradient_model),
    ("deform_zero_offsets_is_conv2d", deform_zero_offsets_is_conv2d),
    ("zero_fusion_is_uniform_average", zero_fusion_is_uniform_average),
    ("merge_expand_is_times_four", merge_expand_is_times_four),
    ("quadrant_locality", quadrant_locality),
    ("celoss_values", celoss_values),
    ("param_budget", param_budget),
    ("checkpoint_round_trip", checkpoint_round_trip),
    ("metric_csvs_reproducible", metric_csvs_reproducible),
];

pub fn run_one(name: &'static str, f: CheckFn) -> Outcome {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Outcome {
        name,
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Runs the checks whose name contains `filter` (all when `None`).
pub fn run(filter: Option<&str>, mut on_done: impl FnMut(&Outcome)) -> Vec<Outcome> {
    CHECKS
        .iter()
        .filter(|(n, _)| filter.map_or(true, |f| n.contains(f)))
        .map(|&(n, f)| {
            let o = run_one(n, f);
            on_done(&o);
            o
        })
        .collect()
}

/// Recurrent and convolutional forms over 100 random time-invariant systems.
pub fn scan_forms_agree() -> Result<(bool, String)> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ca0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=16);
        let len = rng.gen_range(1..=64);
        let ch = rng.gen_range(1..=4);
        let a: Vec<f64> = (0..ch * n).map(|_| -rng.gen_range(0.01..3.0)).collect();
        let b: Vec<f64> = (0..ch * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let delta = rng.gen_range(0.001..1.0);
        let mut a_bar = Vec::with_capacity(a.len());
        let mut b_bar = Vec::with_capacity(a.len());
        for (&ai, &bi) in a.iter().zip(&b) {
            let (x, y) = discretize_scalar(ai, bi, delta, Discretization::Zoh)?;
            a_bar.push(x);
            b_bar.push(y);
        }
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let seq = ScanSequence {
            tokens: (0..ch * len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            channels: ch,
            direction: Direction::LeftRight,
            origin: (1, len),
        };
        let sys = DiscreteSystem::time_invariant(&a_bar, &b_bar, &c, ch, len)?;
        let r = selective_scan_recurrent(&seq, &sys)?;
        let k = selective_scan_conv(&seq, &sys)?;
        for (p, q) in r.tokens.iter().zip(&k.tokens) {
            worst = worst.max((p - q).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Ok((worst < 1e-5 && secs < 10.0, format!("100 draws, max |Δ| {worst:.3e}, {secs:.2}s")))
}

pub fn discretize_oracle() -> Result<(bool, String)> {
    let zoh = |a, b, d| discretize_scalar(a, b, d, Discretization::Zoh);
    let (a1, b1) = zoh(-1.0, 1.0, 2f64.ln())?;
    let e1 = (a1 - 0.5).abs().max((b1 - 0.5).abs());
    // A → 0: Ā = 1, B̄ = ΔB.
    let mut e2 = 0.0f64;
    for a in [0.0, -1e-9, -1e-12] {
        let (x, y) = zoh(a, 3.0, 0.7)?;
        e2 = e2.max((x - 1.0).abs()).max((y - 2.1).abs());
    }
    // Δ → 0⁺: Ā = 1, B̄ = 0.
    let (a3, b3) = zoh(-2.0, 3.0, 1e-10)?;
    let e3 = (a3 - 1.0).abs().max(b3.abs());
    let rejects = zoh(-1.0, 1.0, 0.0).is_err() && zoh(-1.0, 1.0, -0.1).is_err();
    Ok((
        e1 < 1e-12 && e2 < 1e-8 && e3 < 1e-8 && rejects,
        format!("closed form {e1:.1e}, A→0 {e2:.1e}, Δ→0 {e3:.1e}, Δ≤0 rejected {rejects}"),
    ))
}

pub fn gradient_ops() -> Result<(bool, String)> {
    let cases = op_audit(OP_EPS)?;
    let failed: Vec<&str> = cases.iter().filter(|c| !c.1.passes(OP_TOL)).map(|c| c.0.as_str()).collect();
    let (wn, wr) = cases
        .iter()
        .map(|c| (c.0.as_str(), c.1.max_rel_err))
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let mut detail = format!("{} ops, worst {wn} {wr:.2e} (tol {OP_TOL:.0e})", cases.len());
    if !failed.is_empty() {
        detail.push_str(&format!(", failed: {}", failed.join(" ")));
    }
    Ok((failed.is_empty(), detail))
}

/// Total loss of small models at 8×8, every parameter group, for each
/// scan-mode and fusion variant.
pub fn gradient_model() -> Result<(bool, String)> {
    let base = ModelConfig {
        channels: 4,
        num_blocks: 1,
        n_state: 4,
        ..Default::default()
    };
    let variants = [
        ("default", base.clone()),
        (
            "swapped_scans",
            ModelConfig {
                lr_scan: ScanMode::Local,
                ref_scan: ScanMode::Global,
                ..base.clone()
            },
        ),
        (
            "add_conv",
            ModelConfig {
                fusion: crate::config::FusionKind::AddConv,
                ..base.clone()
            },
        ),
        (
            "direction_specific",
            ModelConfig {
                direction_specific_params: true,
                ..base
            },
        ),
    ];
    let img = |s: u64, h| random_tensor([1, 1, h, h], s, 0.5).map(|v| v + 0.5);
    let batch = Batch {
        lr: img(3, 4),
        reference: img(4, 8),
        hr: img(5, 8),
    };
    let mut passed = true;
    let mut parts = Vec::new();
    for (tag, cfg) in variants {
        let (m, mut store) = GlMamba::init::<f64>(&cfg)?;
        randomize(&mut store, 21, 0.3);
        let groups = audit_model(&m, &store, &batch, 24, 1e-4, 4)?;
        let worst = groups.iter().map(|g| g.1.max_rel_err).fold(0.0, f64::max);
        let checked: usize = groups.iter().map(|g| g.1.checked).sum();
        let skipped: usize = groups.iter().map(|g| g.1.skipped).sum();
        passed &= worst < 1e-3 && groups.iter().all(|g| g.1.checked > 0);
        parts.push(format!("{tag}: {} groups, {checked} checked, {skipped} skipped, worst {worst:.2e}", groups.len()));
    }
    Ok((passed, format!("{} (tol 1e-3)", parts.join("; "))))
}

pub fn deform_zero_offsets_is_conv2d() -> Result<(bool, String)> {
    let mut mismatches = 0usize;
    let mut total = 0usize;
    for (seed, (h, w)) in [(1u64, (8, 8)), (2, (5, 7)), (3, (1, 6))] {
        let x = random_tensor([2, 3, h, w], seed, 1.0);
        let wt = random_tensor([4, 3, 3, 3], seed + 10, 1.0);
        let b = random_tensor([1, 4, 1, 1], seed + 20, 1.0);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(b.clone()));
        let off = g.constant(Tensor::zeros([2, 18, h, w]));
        let mask = g.constant(Tensor::ones([2, 9, h, w]));
        let y = g.deform_conv(xv, off, mask, wv, Some(bv))?;
        let want = conv2d_forward(&x, &wt, Some(&b), 1, Padding::Same)?;
        total += want.numel();
        mismatches += g.value(y).data().iter().zip(want.data()).filter(|(p, q)| p.to_bits() != q.to_bits()).count();
    }
    Ok((mismatches == 0, format!("{mismatches} of {total} outputs differ in bits")))
}

pub fn zero_fusion_is_uniform_average() -> Result<(bool, String)> {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = FusionParams::new(&mut Builder::new(&mut store, &mut rng), "fusion", 3);
    let a = random_tensor([2, 3, 5, 4], 3, 1.0);
    let b = random_tensor([2, 3, 5, 4], 4, 1.0);
    let mut g = Graph::new();
    let p = store.bind_all(&mut g);
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let o = f.forward(&mut g, &p, av, bv)?;
    let v = |x| g.value(x).clone();
    let (di, sim, com, out) = (v(o.f_di), v(o.f_sim), v(o.f_com), v(o.out));
    let half = Tensor::from_fn(a.shape(), |n, c, i, j| (a.at(n, c, i, j) + b.at(n, c, i, j)) / 2.0);
    let third = Tensor::from_fn(a.shape(), |n, c, i, j| (di.at(n, c, i, j) + sim.at(n, c, i, j) + com.at(n, c, i, j)) / 3.0);
    let e_com = com.max_abs_diff(&half);
    let e_out = out.max_abs_diff(&third);
    let e_w = g.value(o.weights).data().iter().map(|w| (w - 1.0 / 3.0).abs()).fold(0.0, f64::max);
    let e_cw = g.value(o.comp_weights).data().iter().map(|w| (w - 0.5).abs()).fold(0.0, f64::max);
    let worst = e_com.max(e_out).max(e_w).max(e_cw);
    Ok((worst < 1e-12, format!("max deviation from averaging {worst:.1e}")))
}

pub fn merge_expand_is_times_four() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bad = 0usize;
    let mut grids = 0usize;
    for h in 1..7 {
        for w in 1..7 {
            let ch = rng.gen_range(1..4);
            let data: Vec<f64> = (0..h * w * ch).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let grid = PatchGrid::new(h, w, ch, data)?;
            let merged = scan_merge(&scan_expand(&grid)?)?;
            bad += merged.data.iter().zip(&grid.data).filter(|(m, v)| **m != 4.0 * **v).count();
            grids += 1;
        }
    }
    Ok((bad == 0, format!("{grids} grids, {bad} entries differ from 4x")))
}

fn run_ss2d(u: &Tensor<f64>, params: &[Tensor<f64>], mode: ScanMode) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let uv = g.constant(u.clone());
    let vars: Vec<_> = params.iter().map(|t| g.constant(t.clone())).collect();
    let y = ss2d(&mut g, uv, &[ssm_vars(&vars)], mode, Discretization::Zoh)?;
    Ok(g.value(y).clone())
}

/// A change inside one quadrant leaves the local scan output of every other
/// quadrant bit-identical, while the global scan does reach across.
pub fn quadrant_locality() -> Result<(bool, String)> {
    let mut leaked = 0usize;
    let mut global_reaches = true;
    for (h, w) in [(6, 5), (4, 4), (7, 8)] {
        let ch = 2;
        let p = ssm_tensors(ch, 3, 8);
        let u = random_tensor([1, ch, h, w], 2, 1.0);
        let base = run_ss2d(&u, &p, ScanMode::Local)?;
        let quads = quadrants(h, w);
        for (qi, &(y0, x0, qh, qw)) in quads.iter().enumerate() {
            let mut v = u.clone();
            v.set(0, 1, y0 + qh / 2, x0 + qw / 2, 5.0);
            let out = run_ss2d(&v, &p, ScanMode::Local)?;
            for (qj, &(y1, x1, rh, rw)) in quads.iter().enumerate() {
                if qj == qi {
                    continue;
                }
                for y in y1..y1 + rh {
                    for x in x1..x1 + rw {
                        leaked += (0..ch).filter(|&k| out.at(0, k, y, x).to_bits() != base.at(0, k, y, x).to_bits()).count();
                    }
                }
            }
        }
        let mut v = u.clone();
        v.set(0, 0, 0, 0, 3.0);
        let (a, b) = (run_ss2d(&u, &p, ScanMode::Global)?, run_ss2d(&v, &p, ScanMode::Global)?);
        global_reaches &= (0..ch).any(|k| a.at(0, k, h - 1, w - 1) != b.at(0, k, h - 1, w - 1));
    }
    Ok((
        leaked == 0 && global_reaches,
        format!("cross-quadrant changes {leaked}, global scan crosses {global_reaches}"),
    ))
}

pub fn celoss_values() -> Result<(bool, String)> {
    let k = EdgeKernels::default();
    let eval = |sr: &Tensor<f64>, hr: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let (a, b) = (g.constant(sr.clone()), g.constant(hr.clone()));
        let l = celoss(&mut g, a, b, &k)?;
        Ok(g.value(l).data()[0])
    };
    let mut self_max = 0.0f64;
    for seed in 0..8 {
        let x = random_tensor([1, 1, 6 + seed as usize % 3, 7], seed, 1.0);
        self_max = self_max.max(eval(&x, &x)?.abs());
    }
    let c = eval(&Tensor::ones([1, 1, 7, 5]), &Tensor::zeros([1, 1, 7, 5]))?;
    let e = (c - 4.0 / 3.0).abs();
    Ok((self_max == 0.0 && e < 1e-9, format!("celoss(x,x) max {self_max:.1e}, constant case {c:.12} (|Δ| {e:.1e})")))
}

pub fn param_budget() -> Result<(bool, String)> {
    let (_, store) = GlMamba::init::<f32>(&ModelConfig::default())?;
    let r = param_report(&store);
    let ratio = r.ratio_to_reference();
    let itemized = r.modules.iter().map(|m| m.1).sum::<usize>() == r.total;
    Ok((
        (0.5..=2.0).contains(&ratio) && itemized,
        format!("{} vs {REFERENCE_PARAMS}, ratio {ratio:.3}", r.total),
    ))
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        channels: 4,
        num_blocks: 1,
        n_state: 4,
        lr: 1e-3,
        ..Default::default()
    }
}

fn tiny_pairs(seed: u64, count: usize) -> Result<Vec<crate::data::ImagePair>> {
    gen_synthetic(&SyntheticSpec {
        seed,
        count,
        size: 32,
        ..Default::default()
    })
}

/// Saves after a few updates, reloads, and compares forward outputs bit for
/// bit. The file goes to the system temp directory and is removed.
pub fn checkpoint_round_trip() -> Result<(bool, String)> {
    let cfg = tiny_config();
    let pairs = tiny_pairs(3, 2)?;
    let mut s = Session::<f32>::new(&cfg)?;
    s.train(&pairs, 2, |_, _| {})?;
    let path = std::env::temp_dir().join(format!("glsr-check-{}.glck", std::process::id()));
    checkpoint::save(&path, &cfg, &s.store, Some(&s.adam))?;
    let loaded = checkpoint::load(&path, &cfg, &s.store);
    let _ = std::fs::remove_file(&path);
    let ck = loaded?;
    let (lr, reference) = (pairs[0].lr.cast::<f32>(), pairs[0].reference.cast::<f32>());
    let (a_sr, a_ref) = s.model.predict(&s.store, &lr, &reference)?;
    let (b_sr, b_ref) = s.model.predict(&ck.params, &lr, &reference)?;
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same = bits(&a_sr) == bits(&b_sr) && bits(&a_ref) == bits(&b_ref);
    let adam_same = ck.adam.as_ref().is_some_and(|a| a.state.step == s.adam.state.step && a.state.m == s.adam.state.m);
    Ok((same && adam_same, format!("outputs bit-identical {same}, optimizer state restored {adam_same}")))
}

fn csv_run(seed: u64) -> Result<(String, String)> {
    let cfg = ModelConfig { seed, ..tiny_config() };
    let train = tiny_pairs(seed, 2)?;
    let test = tiny_pairs(seed + 1, 2)?;
    let mut s = Session::<f32>::new(&cfg)?;
    let mut loss = String::new();
    s.train(&train, 3, |step, log| {
        loss.push_str(&loss_csv_row(step, log));
        loss.push('\n');
    })?;
    Ok((loss, eval_csv(&evaluate(&s.model, &s.store, &test)?)))
}

/// Two runs from one seed produce identical loss and metric CSVs.
pub fn metric_csvs_reproducible() -> Result<(bool, String)> {
    let a = csv_run(11)?;
    let b = csv_run(11)?;
    let c = csv_run(12)?;
    let same = a == b;
    let seed_matters = a.1 != c.1;
    Ok((same && seed_matters, format!("same seed identical {same}, other seed differs {seed_matters}")))
}

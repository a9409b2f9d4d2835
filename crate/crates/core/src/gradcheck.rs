//! Central finite-difference gradient verification at 64-bit precision.
//!
//! The numeric side only ever calls the forward function, so it stays
//! independent of every backward rule it checks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::model::{kind_of, GlMamba};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::train::{loss_and_grads, Batch};

/// Entries whose gradient magnitude falls below this fraction of the
/// largest checked magnitude are compared against that floor instead of
/// their own magnitude.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Entries whose central differences at `ε` and `ε/2` disagree by more than
/// this relative amount sit next to a non-differentiable point (an `|·|`
/// zero, a bilinear cell edge, a max switch) and are excluded by
/// [`check_entries`].
pub const KINK_TOLERANCE: f64 = 1e-6;

/// Rounding error of one loss evaluation, in units of `ε_mach · |loss|`.
pub const NOISE_ULPS: f64 = 16.0;

/// A difference quotient whose rounding noise exceeds this fraction of the
/// gradient it measures is not trusted.
pub const RESOLUTION: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input or parameter index, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Largest analytic gradient magnitude seen.
    pub scale: f64,
    /// Probes dropped as non-differentiable points.
    pub skipped: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares analytic gradients of `f` with central differences.
///
/// `f` builds a scalar from leaves created for `inputs`. `sample` limits how
/// many entries per input are probed (evenly strided); `None` probes all.
pub fn check<F>(inputs: &[Tensor<f64>], eps: f64, sample: Option<usize>, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut probes = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let stride = match sample {
            Some(s) if s < n => n.div_ceil(s),
            _ => 1,
        };
        probes.extend((0..n).step_by(stride.max(1)).map(|i| (k, i)));
    }
    let mut pairs = Vec::with_capacity(probes.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for &(k, i) in &probes {
        let orig = work[k].data()[i];
        work[k].data_mut()[i] = orig + eps;
        let fp = eval(&work)?;
        work[k].data_mut()[i] = orig - eps;
        let fm = eval(&work)?;
        work[k].data_mut()[i] = orig;
        pairs.push((k, i, analytic[k].data()[i], (fp - fm) / (2.0 * eps)));
    }
    Ok(summarize(pairs))
}

/// Reduces `(input, index, analytic, numeric)` tuples to a [`GradCheck`].
pub fn summarize(pairs: Vec<(usize, usize, f64, f64)>) -> GradCheck {
    let scale = pairs
        .iter()
        .fold(0.0f64, |m, &(_, _, a, n)| m.max(a.abs()).max(n.abs()));
    let floor = (RELATIVE_FLOOR * scale).max(f64::MIN_POSITIVE);
    let mut out = GradCheck {
        checked: pairs.len(),
        max_rel_err: 0.0,
        worst: None,
        scale,
        skipped: 0,
    };
    for (k, i, a, n) in pairs {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > out.max_rel_err || out.worst.is_none() {
            out.max_rel_err = out.max_rel_err.max(rel);
            out.worst = Some((k, i, a, n));
        }
    }
    out
}

/// Grouping used by the end-to-end audit: the component kind, with the
/// selective-scan parameters split out of the Mamba blocks.
pub fn param_group(name: &str) -> &'static str {
    if name.split('.').any(|p| p.starts_with("ssm")) {
        "ssm"
    } else {
        kind_of(name)
    }
}

/// Central differences of `loss` at `(parameter, flat index)` entries taken
/// from `candidates` in order, compared with `analytic`, until `target`
/// smooth entries are collected. An entry that fails the [`KINK_TOLERANCE`]
/// step-halving test is retried at `ε/100` and counted in `skipped` if it
/// fails again. Both tests allow for the rounding noise of the loss, and a
/// step is only used where that noise is below [`RESOLUTION`] of the entry.
pub fn check_entries<F>(
    store: &ParamStore<f64>,
    analytic: &[Option<Tensor<f64>>],
    candidates: impl IntoIterator<Item = (ParamId, usize)>,
    target: usize,
    eps: f64,
    loss: F,
) -> Result<GradCheck>
where
    F: Fn(&ParamStore<f64>) -> Result<f64>,
{
    let mut work = store.clone();
    let f0 = loss(&work)?;
    let noise = |h: f64| NOISE_ULPS * f64::EPSILON * f0.abs().max(f64::MIN_POSITIVE) / h;
    let mut diff = |id: ParamId, i: usize, h: f64| -> Result<f64> {
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + h;
        let fp = loss(&work)?;
        work.get_mut(id).data_mut()[i] = orig - h;
        let fm = loss(&work)?;
        work.get_mut(id).data_mut()[i] = orig;
        Ok((fp - fm) / (2.0 * h))
    };
    let is_smooth = |full: f64, half: f64, floor: f64, h: f64| {
        let mag = full.abs().max(half.abs()).max(floor);
        noise(h) <= RESOLUTION * mag && (full - half).abs() <= KINK_TOLERANCE * mag + noise(h / 2.0)
    };
    // (parameter index, flat index, analytic, numeric, smooth at the step used)
    let mut probes: Vec<(usize, usize, f64, f64, bool)> = Vec::new();
    let mut scale = 0.0f64;
    for (id, i) in candidates {
        if probes.iter().filter(|p| p.4).count() >= target {
            break;
        }
        let a = analytic[id.0].as_ref().map_or(0.0, |t| t.data()[i]);
        scale = scale.max(a.abs());
        let floor = (RELATIVE_FLOOR * scale).max(f64::MIN_POSITIVE);
        let mut probe = None;
        // A kink inside the stencil is much less likely at the smaller step.
        for h in [eps, eps * 1e-2] {
            let (full, half) = (diff(id, i, h)?, diff(id, i, h / 2.0)?);
            let ok = is_smooth(full, half, floor, h);
            probe = Some((id.0, i, a, full, ok));
            if ok {
                break;
            }
        }
        probes.push(probe.expect("at least one step"));
    }
    let skipped = probes.iter().filter(|p| !p.4).count();
    let mut out = summarize(probes.into_iter().filter(|p| p.4).map(|(k, i, a, f, _)| (k, i, a, f)).collect());
    out.skipped = skipped;
    Ok(out)
}

/// Total-loss gradient audit of a whole model: `per_group` smooth entries
/// drawn at random from each [`param_group`], one [`GradCheck`] per group.
pub fn audit_model(
    model: &GlMamba,
    store: &ParamStore<f64>,
    batch: &Batch<f64>,
    per_group: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<(&'static str, GradCheck)>> {
    let (_, grads) = loss_and_grads(model, store, batch, true)?;
    let mut groups: Vec<(&'static str, Vec<(ParamId, usize)>)> = Vec::new();
    for id in store.ids() {
        let g = param_group(store.name(id));
        let entries = (0..store.get(id).numel()).map(|i| (id, i));
        match groups.iter_mut().find(|(n, _)| *n == g) {
            Some((_, v)) => v.extend(entries),
            None => groups.push((g, entries.collect())),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loss = |s: &ParamStore<f64>| Ok(loss_and_grads(model, s, batch, false)?.0.loss);
    let mut out = Vec::new();
    for (name, mut entries) in groups {
        entries.shuffle(&mut rng);
        out.push((name, check_entries(store, &grads, entries, per_group, eps, loss)?));
    }
    Ok(out)
}

/// Deterministic pseudo-random tensor with entries in `[-amp, amp]`.
pub fn random_tensor(shape: [usize; 4], seed: u64, amp: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-amp..=amp))
}

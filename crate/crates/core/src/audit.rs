//! Catalog of gradient checks over every differentiable op and component.
//!
//! Each case builds a scalar through a random projection of the op output so
//! every output element carries a distinct upstream gradient. Inputs are at
//! most 4×4 spatially.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Padding, Reduce, Unary, Var};
use crate::blocks::{modulator, Activation, ChannelAttention, DeformParams, MambaBlockParams, MambaOptions, PatchEmbed};
use crate::error::Result;
use crate::fusion::{fuse_difference, fuse_similarity, AddConvFusion, FusionParams};
use crate::gradcheck::{check, random_tensor, GradCheck};
use crate::losses::{celoss, l1_loss, total_loss, EdgeKernels, LossWeights};
use crate::nn::{Bound, Builder, ParamStore};
use crate::ssm::{ss2d, Discretization, ScanMode, SsmVars};
use crate::tensor::Tensor;

/// Step used by the per-op audit.
pub const OP_EPS: f64 = 1e-5;
/// Relative-error bound of the per-op audit.
pub const OP_TOL: f64 = 1e-4;

/// Weighted sum with fixed pseudo-random weights.
pub fn probe_loss(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random_tensor(g.shape(y).0, seed, 1.0));
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

/// Replaces every parameter with uniform noise in `[-amp, amp]`.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, amp: f64) {
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let shape = store.get(id).shape().0;
        *store.get_mut(id) = random_tensor(shape, seed + k as u64, amp);
    }
}

/// Checks `f` over the tensors `x` plus every parameter of `store`.
pub fn check_with_params<F>(x: &[Tensor<f64>], store: &ParamStore<f64>, eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &Bound, &[Var]) -> Result<Var>,
{
    let mut inputs = x.to_vec();
    inputs.extend(store.entries().iter().map(|e| e.value.clone()));
    let nx = x.len();
    check(&inputs, eps, None, |g, v| {
        let bound = Bound::from_vars(v[nx..].to_vec());
        f(g, &bound, &v[..nx])
    })
}

/// `[a_log, proj_b, proj_c, proj_delta, delta_bias]` for one scan set.
pub(crate) fn ssm_tensors(channels: usize, n_state: usize, seed: u64) -> Vec<Tensor<f64>> {
    vec![
        random_tensor([1, 1, channels, n_state], seed, 0.5),
        random_tensor([n_state, channels, 1, 1], seed + 1, 1.2),
        random_tensor([n_state, channels, 1, 1], seed + 2, 1.2),
        random_tensor([1, channels, 1, 1], seed + 3, 1.2),
        random_tensor([1, channels, 1, 1], seed + 4, 0.5),
    ]
}

pub(crate) fn ssm_vars(v: &[Var]) -> SsmVars {
    SsmVars {
        a_log: v[0],
        proj_b: v[1],
        proj_c: v[2],
        proj_delta: v[3],
        delta_bias: v[4],
    }
}

fn built<T>(seed: u64, amp: f64, f: impl FnOnce(&mut Builder<'_, f64>) -> T) -> (ParamStore<f64>, T) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut Builder::new(&mut store, &mut rng));
    randomize(&mut store, seed * 31 + 7, amp);
    (store, m)
}

/// Same ordering as `x` with consecutive values `gap` apart.
fn rank_spaced(x: &Tensor<f64>, gap: f64) -> Tensor<f64> {
    let d = x.data();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    let mut out = x.clone();
    for (rank, &i) in order.iter().enumerate() {
        out.data_mut()[i] = rank as f64 * gap - 1.0;
    }
    out
}

/// Runs every case at step `eps`; returns `(case, result)` in catalog order.
pub fn op_audit(eps: f64) -> Result<Vec<(String, GradCheck)>> {
    let mut out: Vec<(String, GradCheck)> = Vec::new();
    let t = random_tensor;
    let x = t([2, 3, 4, 4], 1, 1.0);

    let unaries = [
        Unary::Sigmoid,
        Unary::Silu,
        Unary::Gelu,
        Unary::Exp,
        Unary::Square,
        Unary::Abs,
        Unary::Softplus,
        Unary::Neg,
    ];
    for u in unaries {
        let r = check(&[x.clone()], eps, None, |g, v| {
            let y = g.unary(u, v[0])?;
            probe_loss(g, y, 2)
        })?;
        out.push((format!("unary/{}", u.name()), r));
    }

    // Binary ops, equal shapes and each broadcast pattern used in the model.
    let partners = [
        ("same", t([2, 3, 4, 4], 3, 1.0)),
        ("channel", t([1, 3, 1, 1], 4, 1.0)),
        ("item_channel", t([2, 3, 1, 1], 5, 1.0)),
        ("plane", t([2, 1, 4, 4], 6, 1.0)),
    ];
    for (tag, b) in &partners {
        for op in ["add", "sub", "mul"] {
            let r = check(&[x.clone(), b.clone()], eps, None, |g, v| {
                let y = match op {
                    "add" => g.add(v[0], v[1])?,
                    "sub" => g.sub(v[0], v[1])?,
                    _ => g.mul(v[0], v[1])?,
                };
                probe_loss(g, y, 7)
            })?;
            out.push((format!("{op}/{tag}"), r));
        }
    }
    out.push((
        "scale".into(),
        check(&[x.clone()], eps, None, |g, v| {
            let y = g.scale(v[0], -1.7)?;
            probe_loss(g, y, 8)
        })?,
    ));
    out.push((
        "add_scalar".into(),
        check(&[x.clone()], eps, None, |g, v| {
            let y = g.add_scalar(v[0], 0.3)?;
            probe_loss(g, y, 9)
        })?,
    ));

    let convs: [(&str, [usize; 4], usize, Padding, bool); 5] = [
        ("same3", [4, 3, 3, 3], 1, Padding::Same, true),
        ("valid3", [2, 3, 3, 3], 1, Padding::Valid, false),
        ("stride2", [2, 3, 2, 2], 2, Padding::Valid, true),
        ("pointwise", [5, 3, 1, 1], 1, Padding::Valid, true),
        ("same3_stride2", [2, 3, 3, 3], 2, Padding::Same, false),
    ];
    for (k, (tag, ws, stride, pad, bias)) in convs.into_iter().enumerate() {
        let w = t(ws, 10 + k as u64, 0.7);
        let b = t([1, ws[0], 1, 1], 20 + k as u64, 0.5);
        let r = check(&[x.clone(), w, b], eps, None, |g, v| {
            let y = g.conv2d(v[0], v[1], bias.then_some(v[2]), stride, pad)?;
            probe_loss(g, y, 30)
        })?;
        out.push((format!("conv2d/{tag}"), r));
    }
    out.push((
        "depthwise_conv2d".into(),
        check(&[x.clone(), t([3, 1, 3, 3], 31, 0.7), t([1, 3, 1, 1], 32, 0.5)], eps, None, |g, v| {
            let y = g.depthwise_conv2d(v[0], v[1], Some(v[2]))?;
            probe_loss(g, y, 33)
        })?,
    ));

    out.push((
        "layer_norm".into(),
        check(&[x.clone(), t([1, 3, 1, 1], 34, 1.0), t([1, 3, 1, 1], 35, 1.0)], eps, None, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            probe_loss(g, y, 36)
        })?,
    ));
    out.push((
        "softmax_channels".into(),
        check(&[t([2, 3, 4, 4], 37, 2.0)], eps, None, |g, v| {
            let y = g.softmax_channels(v[0])?;
            probe_loss(g, y, 38)
        })?,
    ));

    let reductions: [(&str, Reduce, &[usize]); 5] = [
        ("mean/spatial", Reduce::Mean, &[2, 3]),
        ("max/spatial", Reduce::Max, &[2, 3]),
        ("sum/channel", Reduce::Sum, &[1]),
        ("max/channel", Reduce::Max, &[1]),
        ("mean/batch", Reduce::Mean, &[0]),
    ];
    // Max needs a gap between entries much larger than the step.
    let spaced = rank_spaced(&x, 0.05);
    for (tag, kind, axes) in reductions {
        let input = if kind == Reduce::Max { &spaced } else { &x };
        let r = check(&[input.clone()], eps, None, |g, v| {
            let y = g.reduce(kind, v[0], axes, true)?;
            probe_loss(g, y, 39)
        })?;
        out.push((format!("reduce/{tag}"), r));
    }
    out.push(("sum_all".into(), check(&[x.clone()], eps, None, |g, v| g.sum_all(v[0]))?));
    out.push(("mean_all".into(), check(&[x.clone()], eps, None, |g, v| g.mean_all(v[0]))?));

    out.push((
        "concat_narrow".into(),
        check(&[x.clone(), t([2, 2, 4, 4], 40, 1.0)], eps, None, |g, v| {
            let c = g.concat_channels(&[v[0], v[1]])?;
            let y = g.narrow_channels(c, 1, 3)?;
            probe_loss(g, y, 41)
        })?,
    ));
    out.push((
        "upsample_nearest".into(),
        check(&[t([1, 2, 3, 2], 42, 1.0)], eps, None, |g, v| {
            let y = g.upsample_nearest(v[0], 2)?;
            probe_loss(g, y, 43)
        })?,
    ));
    // A permutation with one source read twice and one never read.
    let index = Arc::new(vec![5, 0, 3, 3, 1, 2]);
    out.push((
        "gather_plane".into(),
        check(&[t([1, 2, 2, 3], 44, 1.0)], eps, None, |g, v| {
            let y = g.gather_plane(v[0], index.clone(), 3, 2)?;
            probe_loss(g, y, 45)
        })?,
    ));
    let perm = Arc::new(vec![4, 1, 5, 0, 2, 3]);
    out.push((
        "scatter_plane".into(),
        check(&[t([1, 2, 2, 3], 46, 1.0)], eps, None, |g, v| {
            let y = g.scatter_plane(v[0], perm.clone(), 3, 2)?;
            probe_loss(g, y, 47)
        })?,
    ));

    let (n, ch, ns, len) = (2, 2, 3, 7);
    let scan_in = vec![
        t([n, ch, 1, len], 50, 1.0),
        t([n, ch, 1, len], 51, 1.0),
        t([n, ns, 1, len], 52, 1.0),
        t([n, ns, 1, len], 53, 1.0),
        t([1, 1, ch, ns], 54, 1.0),
    ];
    for rule in [Discretization::Zoh, Discretization::Euler] {
        let r = check(&scan_in, eps, None, |g, v| {
            let d = g.unary(Unary::Softplus, v[1])?;
            let a = g.unary(Unary::Exp, v[4])?;
            let a = g.unary(Unary::Neg, a)?;
            let y = g.selective_scan(v[0], d, v[2], v[3], a, Arc::new(vec![0, 4]), rule)?;
            probe_loss(g, y, 55)
        })?;
        out.push((format!("selective_scan/{rule:?}").to_lowercase(), r));
    }

    // Sub-pixel offsets kept clear of integer cell edges by construction.
    let offsets = random_tensor([2, 18, 4, 4], 60, 0.4).map(|v| v + 0.5);
    let r = check(
        &[x.clone(), offsets, t([2, 9, 4, 4], 61, 1.0), t([2, 3, 3, 3], 62, 0.7), t([1, 2, 1, 1], 63, 0.5)],
        eps,
        None,
        |g, v| {
            let y = g.deform_conv(v[0], v[1], v[2], v[3], Some(v[4]))?;
            probe_loss(g, y, 64)
        },
    )?;
    out.push(("deform_conv".into(), r));

    let u = t([1, 3, 4, 4], 70, 1.0);
    for mode in [ScanMode::Global, ScanMode::Local] {
        for sets in [1usize, 4] {
            let mut inputs = vec![u.clone()];
            for k in 0..sets {
                inputs.extend(ssm_tensors(3, 4, 71 + 10 * k as u64));
            }
            let r = check(&inputs, eps, None, |g, v| {
                let params: Vec<_> = v[1..].chunks(5).map(ssm_vars).collect();
                let y = ss2d(g, v[0], &params, mode, Discretization::Zoh)?;
                probe_loss(g, y, 72)
            })?;
            out.push((format!("ss2d/{mode:?}/sets{sets}").to_lowercase(), r));
        }
    }

    let fx = t([1, 4, 4, 4], 80, 1.0);
    for (tag, mode, residual, rule, activation) in [
        ("global", ScanMode::Global, true, Discretization::Zoh, Activation::Silu),
        ("local_plain", ScanMode::Local, false, Discretization::Zoh, Activation::Silu),
        ("global_euler", ScanMode::Global, true, Discretization::Euler, Activation::Silu),
        ("global_gelu", ScanMode::Global, true, Discretization::Zoh, Activation::Gelu),
    ] {
        let opts = MambaOptions {
            mode,
            residual,
            rule,
            activation,
            ..Default::default()
        };
        let (store, m) = built(81, 0.5, |b| MambaBlockParams::new(b, "m", 4, 3, opts));
        let r = check_with_params(&[fx.clone()], &store, eps, |g, p, v| {
            let y = m.forward(g, p, v[0])?;
            probe_loss(g, y, 82)
        })?;
        out.push((format!("mamba_block/{tag}"), r));
    }
    let (store, ca) = built(83, 0.5, |b| ChannelAttention::new(b, "ca", 4));
    out.push((
        "channel_attention".into(),
        check_with_params(&[fx.clone()], &store, eps, |g, p, v| {
            let y = ca.forward(g, p, v[0])?;
            probe_loss(g, y, 84)
        })?,
    ));
    let (store, d) = built(85, 0.3, |b| DeformParams::new(b, "d", 2, 2));
    out.push((
        "deform_block".into(),
        check_with_params(&[t([1, 2, 4, 4], 86, 1.0)], &store, eps, |g, p, v| {
            let y = d.forward(g, p, v[0])?;
            probe_loss(g, y, 87)
        })?,
    ));
    out.push((
        "modulator".into(),
        check(&[t([1, 2, 3, 3], 88, 2.0), t([1, 2, 3, 3], 89, 2.0)], eps, None, |g, v| {
            let y = modulator(g, v[0], v[1])?;
            probe_loss(g, y, 90)
        })?,
    ));
    let (store, pe) = built(91, 0.5, |b| PatchEmbed::new(b, "pe", 4, 2));
    out.push((
        "patch_embed".into(),
        check_with_params(&[fx.clone()], &store, eps, |g, p, v| {
            let e = pe.embed(g, p, v[0])?;
            let y = pe.unembed(g, p, e)?;
            probe_loss(g, y, 92)
        })?,
    ));

    let (a, b) = (t([2, 2, 3, 3], 100, 1.0), t([2, 2, 3, 3], 101, 1.0));
    for (tag, op) in [
        ("fusion/difference", fuse_difference as fn(&mut Graph<f64>, Var, Var) -> Result<Var>),
        ("fusion/similarity", fuse_similarity),
    ] {
        let r = check(&[a.clone(), b.clone()], eps, None, |g, v| {
            let y = op(g, v[0], v[1])?;
            probe_loss(g, y, 102)
        })?;
        out.push((tag.into(), r));
    }
    let (store, f) = built(103, 0.5, |bld| FusionParams::new(bld, "fusion", 2));
    out.push((
        "fusion/complementary".into(),
        check_with_params(&[a.clone(), b.clone()], &store, eps, |g, p, v| {
            let (y, _) = f.complementary(g, p, v[0], v[1])?;
            probe_loss(g, y, 104)
        })?,
    ));
    out.push((
        "fusion/weighted".into(),
        check_with_params(&[a.clone(), b.clone(), t([2, 2, 3, 3], 105, 1.0)], &store, eps, |g, p, v| {
            let (y, _) = f.weighted(g, p, v[0], v[1], v[2])?;
            probe_loss(g, y, 106)
        })?,
    ));
    out.push((
        "fusion/mmff".into(),
        check_with_params(&[a.clone(), b.clone()], &store, eps, |g, p, v| {
            let o = f.forward(g, p, v[0], v[1])?;
            probe_loss(g, o.out, 107)
        })?,
    ));
    let (store, ac) = built(108, 0.5, |bld| AddConvFusion::new(bld, "fusion", 2));
    out.push((
        "fusion/add_conv".into(),
        check_with_params(&[a.clone(), b.clone()], &store, eps, |g, p, v| {
            let y = ac.forward(g, p, v[0], v[1])?;
            probe_loss(g, y, 109)
        })?,
    ));

    let (sr, hr) = (t([2, 1, 4, 4], 110, 1.0), t([2, 1, 4, 4], 111, 1.0));
    out.push(("loss/l1".into(), check(&[sr.clone(), hr.clone()], eps, None, |g, v| l1_loss(g, v[0], v[1]))?));
    for (tag, sym) in [("loss/celoss", false), ("loss/celoss_symmetric", true)] {
        let k = EdgeKernels::new(sym);
        let r = check(&[sr.clone(), hr.clone()], eps, None, |g, v| celoss(g, v[0], v[1], &k))?;
        out.push((tag.into(), r));
    }
    let (rec, rf) = (t([2, 1, 4, 4], 112, 1.0), t([2, 1, 4, 4], 113, 1.0));
    out.push((
        "loss/total".into(),
        check(&[sr, hr, rec, rf], eps, None, |g, v| {
            let terms = total_loss(g, v[0], v[1], v[2], v[3], &LossWeights::default(), &EdgeKernels::default())?;
            Ok(terms.total)
        })?,
    ));
    Ok(out)
}

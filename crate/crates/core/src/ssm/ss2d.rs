//! Four-direction 2D selective scan over a patch grid.

use std::sync::Arc;

use rand::Rng;

use super::{scan_plan, Direction, Discretization, ScanMode};
use crate::autodiff::{Graph, Unary, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, Conv2d, ParamId, WeightInit};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Learnable selective-scan parameters.
#[derive(Clone, Debug)]
pub struct SsmParams {
    /// `A = -exp(a_log)`, shape `(1, 1, C, S)`.
    pub a_log: ParamId,
    pub proj_b: Conv2d,
    pub proj_c: Conv2d,
    /// Token features to one timestep logit.
    pub proj_delta: Conv2d,
    /// Per-channel timestep bias, `(1, C, 1, 1)`.
    pub delta_bias: ParamId,
}

/// [`SsmParams`] resolved to graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_log: Var,
    pub proj_b: Var,
    pub proj_c: Var,
    pub proj_delta: Var,
    pub delta_bias: Var,
}

impl SsmParams {
    /// S4D-real state init `a_log[c, s] = ln(s + 1)` and timesteps drawn
    /// log-uniformly from `[1e-3, 1e-1]`.
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, name: &str, channels: usize, n_state: usize) -> Self {
        b.scope(name, |b| {
            let a_log = b.tensor(
                "a_log",
                Tensor::from_fn([1, 1, channels, n_state], |_, _, _, s| S::lit(((s + 1) as f64).ln())),
            );
            let proj_b = Conv2d::linear(b, "proj_b", channels, n_state, false, WeightInit::TruncNormal);
            let proj_c = Conv2d::linear(b, "proj_c", channels, n_state, false, WeightInit::TruncNormal);
            let proj_delta = Conv2d::linear(b, "proj_delta", channels, 1, false, WeightInit::TruncNormal);
            let rng = &mut *b.rng;
            let bias = Tensor::from_fn([1, channels, 1, 1], |_, _, _, _| {
                let dt = rng.gen_range(1e-3f64.ln()..1e-1f64.ln()).exp();
                // inverse softplus
                S::lit(dt + (-(-dt).exp_m1()).ln())
            });
            let delta_bias = b.tensor("delta_bias", bias);
            SsmParams {
                a_log,
                proj_b,
                proj_c,
                proj_delta,
                delta_bias,
            }
        })
    }

    pub fn bind(&self, p: &Bound) -> SsmVars {
        SsmVars {
            a_log: p.var(self.a_log),
            proj_b: p.var(self.proj_b.weight),
            proj_c: p.var(self.proj_c.weight),
            proj_delta: p.var(self.proj_delta.weight),
            delta_bias: p.var(self.delta_bias),
        }
    }
}

struct Projected {
    x: Var,
    delta: Var,
    b: Var,
    c: Var,
    a: Var,
}

fn project<S: Scalar>(g: &mut Graph<S>, u: Var, p: &SsmVars) -> Result<Projected> {
    use crate::autodiff::Padding::Valid;
    let dl = g.conv2d(u, p.proj_delta, None, 1, Valid)?;
    let dl = g.add(dl, p.delta_bias)?;
    let delta = g.unary(Unary::Softplus, dl)?;
    let b = g.conv2d(u, p.proj_b, None, 1, Valid)?;
    let c = g.conv2d(u, p.proj_c, None, 1, Valid)?;
    let a = g.unary(Unary::Exp, p.a_log)?;
    let a = g.unary(Unary::Neg, a)?;
    Ok(Projected { x: u, delta, b, c, a })
}

/// Expand → scan → merge over `u (N, C, H, W)`.
///
/// `params` holds either one parameter set shared by all directions or four
/// direction-specific sets in [`Direction::ALL`] order.
pub fn ss2d<S: Scalar>(g: &mut Graph<S>, u: Var, params: &[SsmVars], mode: ScanMode, rule: Discretization) -> Result<Var> {
    if params.len() != 1 && params.len() != 4 {
        return Err(Error::invalid("ss2d", "expected 1 or 4 parameter sets"));
    }
    let s = g.shape(u);
    let (h, w) = (s.h(), s.w());
    if h == 0 || w == 0 {
        return Err(Error::invalid("ss2d", format!("empty grid {s}")));
    }
    let shared = if params.len() == 1 { Some(project(g, u, &params[0])?) } else { None };
    let mut merged: Option<Var> = None;
    for (k, dir) in Direction::ALL.into_iter().enumerate() {
        let own;
        let proj = match &shared {
            Some(p) => p,
            None => {
                own = project(g, u, &params[k])?;
                &own
            }
        };
        let (order, starts) = scan_plan(mode, h, w, dir);
        let order = Arc::new(order);
        let l = order.len();
        let xs = g.gather_plane(proj.x, order.clone(), 1, l)?;
        let ds = g.gather_plane(proj.delta, order.clone(), 1, l)?;
        let bs = g.gather_plane(proj.b, order.clone(), 1, l)?;
        let cs = g.gather_plane(proj.c, order.clone(), 1, l)?;
        let ys = g.selective_scan(xs, ds, bs, cs, proj.a, Arc::new(starts), rule)?;
        let grid = g.scatter_plane(ys, order, h, w)?;
        merged = Some(match merged {
            None => grid,
            Some(m) => g.add(m, grid)?,
        });
    }
    Ok(merged.expect("four directions"))
}

pub fn ss2d_global<S: Scalar>(g: &mut Graph<S>, u: Var, params: &[SsmVars], rule: Discretization) -> Result<Var> {
    ss2d(g, u, params, ScanMode::Global, rule)
}

pub fn ss2d_local<S: Scalar>(g: &mut Graph<S>, u: Var, params: &[SsmVars], rule: Discretization) -> Result<Var> {
    ss2d(g, u, params, ScanMode::Local, rule)
}

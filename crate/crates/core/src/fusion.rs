//! Multi-modality feature fusion: difference, similarity, complementary
//! weighting, and a learned three-way mix.

use crate::autodiff::{Graph, Padding, Reduce, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, Conv2d, WeightInit};
use crate::scalar::Scalar;

fn same_shape<S: Scalar>(g: &Graph<S>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: g.shape(a),
            rhs: g.shape(b),
        });
    }
    Ok(())
}

pub fn fuse_difference<S: Scalar>(g: &mut Graph<S>, f_lr: Var, f_ref: Var) -> Result<Var> {
    same_shape(g, "fuse_difference", f_lr, f_ref)?;
    g.sub(f_lr, f_ref)
}

pub fn fuse_similarity<S: Scalar>(g: &mut Graph<S>, f_lr: Var, f_ref: Var) -> Result<Var> {
    same_shape(g, "fuse_similarity", f_lr, f_ref)?;
    g.mul(f_lr, f_ref)
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    /// 1×1 map from `2C` concatenated channels to two weight logits.
    pub comp_conv: Conv2d,
    /// Fully connected map from `3C` pooled features to three logits.
    pub mix_fc: Conv2d,
}

/// Intermediate and final fusion results.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutputs {
    pub f_di: Var,
    pub f_sim: Var,
    pub f_com: Var,
    /// Per-pixel `(w_lr, w_ref)`, shape `(N, 2, H, W)`.
    pub comp_weights: Var,
    /// Per-item `(w_di, w_sim, w_com)`, shape `(N, 3, 1, 1)`.
    pub weights: Var,
    pub out: Var,
}

impl FusionParams {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, name: &str, channels: usize) -> Self {
        b.scope(name, |b| FusionParams {
            comp_conv: Conv2d::linear(b, "comp_conv", 2 * channels, 2, true, WeightInit::Zeros),
            mix_fc: Conv2d::linear(b, "mix_fc", 3 * channels, 3, true, WeightInit::Zeros),
        })
    }

    /// Returns the output and the per-pixel weight pair.
    pub fn complementary<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, f_lr: Var, f_ref: Var) -> Result<(Var, Var)> {
        same_shape(g, "fuse_complementary", f_lr, f_ref)?;
        let cat = g.concat_channels(&[f_lr, f_ref])?;
        let logits = self.comp_conv.forward(g, p, cat)?;
        let w = g.softmax_channels(logits)?;
        let w_lr = g.narrow_channels(w, 0, 1)?;
        let w_ref = g.narrow_channels(w, 1, 1)?;
        let a = g.mul(f_lr, w_lr)?;
        let b = g.mul(f_ref, w_ref)?;
        Ok((g.add(a, b)?, w))
    }

    /// Returns the output and the per-item weight triple.
    pub fn weighted<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, f_di: Var, f_sim: Var, f_com: Var) -> Result<(Var, Var)> {
        same_shape(g, "fuse_weighted", f_di, f_sim)?;
        same_shape(g, "fuse_weighted", f_di, f_com)?;
        let cat = g.concat_channels(&[f_di, f_sim, f_com])?;
        let pooled = g.reduce(Reduce::Max, cat, &[2, 3], true)?;
        let logits = self.mix_fc.forward(g, p, pooled)?;
        let w = g.softmax_channels(logits)?;
        let mut out: Option<Var> = None;
        for (k, f) in [f_di, f_sim, f_com].into_iter().enumerate() {
            let wk = g.narrow_channels(w, k, 1)?;
            let term = g.mul(f, wk)?;
            out = Some(match out {
                None => term,
                Some(o) => g.add(o, term)?,
            });
        }
        Ok((out.expect("three terms"), w))
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, f_lr: Var, f_ref: Var) -> Result<FusionOutputs> {
        let f_di = fuse_difference(g, f_lr, f_ref)?;
        let f_sim = fuse_similarity(g, f_lr, f_ref)?;
        let (f_com, comp_weights) = self.complementary(g, p, f_lr, f_ref)?;
        let (out, weights) = self.weighted(g, p, f_di, f_sim, f_com)?;
        Ok(FusionOutputs {
            f_di,
            f_sim,
            f_com,
            comp_weights,
            weights,
            out,
        })
    }
}

/// Baseline fusion for ablations: `conv3x3(f_lr + f_ref)`.
#[derive(Clone, Debug)]
pub struct AddConvFusion {
    pub conv: Conv2d,
}

impl AddConvFusion {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, name: &str, channels: usize) -> Self {
        b.scope(name, |b| AddConvFusion {
            conv: Conv2d::new(b, "conv", channels, channels, 3, 1, Padding::Same, true, WeightInit::TruncNormal),
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, f_lr: Var, f_ref: Var) -> Result<Var> {
        same_shape(g, "add_conv_fusion", f_lr, f_ref)?;
        let s = g.add(f_lr, f_ref)?;
        self.conv.forward(g, p, s)
    }
}

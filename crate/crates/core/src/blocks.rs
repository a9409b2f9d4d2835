//! Per-branch building blocks: deform block, Mamba block, modulator, and the
//! patch embedding that bridges pixel and patch resolution.

use crate::autodiff::{Graph, Padding, Reduce, Unary, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, Conv2d, LayerNorm, ParamId, WeightInit, INIT_STD};
use crate::scalar::Scalar;
use crate::ssm::{ss2d, Discretization, ScanMode, SsmParams};

/// Channel-attention reduction ratio.
pub const CA_REDUCTION: usize = 4;

/// Deformable 3×3 convolution with learned offsets and masks.
#[derive(Clone, Debug)]
pub struct DeformParams {
    /// `(C_out, C_in, 3, 3)` kernel and bias.
    pub conv: Conv2d,
    /// Predicts `(Δy, Δx)` per tap: `2 * 9` output channels.
    pub offset_conv: Conv2d,
    /// Predicts pre-sigmoid mask logits: `9` output channels.
    pub mask_conv: Conv2d,
}

impl DeformParams {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, name: &str, cin: usize, cout: usize) -> Self {
        use crate::autodiff::TAPS;
        b.scope(name, |b| DeformParams {
            conv: Conv2d::new(b, "conv", cin, cout, 3, 1, Padding::Same, true, WeightInit::TruncNormal),
            offset_conv: Conv2d::new(b, "offset_conv", cin, 2 * TAPS, 3, 1, Padding::Same, true, WeightInit::Zeros),
            mask_conv: Conv2d::new(b, "mask_conv", cin, TAPS, 3, 1, Padding::Same, true, WeightInit::Zeros),
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let offsets = self.offset_conv.forward(g, p, x)?;
        let logits = self.mask_conv.forward(g, p, x)?;
        let mask = g.sigmoid(logits)?;
        deform_conv(g, p, x, offsets, mask, &self.conv)
    }
}

/// [`Graph::deform_conv`] with the kernel held by `conv`.
pub fn deform_conv<S: Scalar>(g: &mut Graph<S>, p: &Bound, x: Var, offsets: Var, mask: Var, conv: &Conv2d) -> Result<Var> {
    g.deform_conv(x, offsets, mask, p.var(conv.weight), conv.bias.map(|b| p.var(b)))
}

/// Squeeze-excite gate: `x ⊗ sigmoid(W2 · SiLU(W1 · GAP(x)))`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub squeeze: Conv2d,
    pub excite: Conv2d,
}

impl ChannelAttention {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, name: &str, channels: usize) -> Self {
        let hidden = (channels / CA_REDUCTION).max(1);
        b.scope(name, |b| ChannelAttention {
            squeeze: Conv2d::linear(b, "squeeze", channels, hidden, true, WeightInit::TruncNormal),
            excite: Conv2d::linear(b, "excite", hidden, channels, true, WeightInit::TruncNormal),
        })
    }

    /// Per-item, per-channel scale in `(0, 1)`, shape `(N, C, 1, 1)`.
    pub fn scale<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let pooled = g.reduce(Reduce::Mean, x, &[2, 3], true)?;
        let z = self.squeeze.forward(g, p, pooled)?;
        let z = g.silu(z)?;
        let z = self.excite.forward(g, p, z)?;
        g.sigmoid(z)
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let s = self.scale(g, p, x)?;
        g.mul(x, s)
    }
}

/// Pointwise nonlinearity of the Mamba block paths.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum Activation {
    #[default]
    Silu,
    Gelu,
}

impl Activation {
    pub fn unary(self) -> Unary {
        match self {
            Activation::Silu => Unary::Silu,
            Activation::Gelu => Unary::Gelu,
        }
    }
}

/// Options fixed when a Mamba block is built.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct MambaOptions {
    pub mode: ScanMode,
    pub residual: bool,
    pub rule: Discretization,
    /// Four direction-specific SSM parameter sets instead of one shared set.
    pub direction_specific: bool,
    pub activation: Activation,
}

impl Default for MambaOptions {
    fn default() -> Self {
        MambaOptions {
            mode: ScanMode::Global,
            residual: true,
            rule: Discretization::Zoh,
            direction_specific: false,
            activation: Activation::Silu,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MambaBlockParams {
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub lin_in_a: Conv2d,
    pub lin_in_b: Conv2d,
    pub lin_out: Conv2d,
    /// Depthwise `(C, 1, 3, 3)` kernel and bias.
    pub dwconv: ParamId,
    pub dwconv_bias: ParamId,
    pub ssm: Vec<SsmParams>,
    pub ca: ChannelAttention,
    pub options: MambaOptions,
}

impl MambaBlockParams {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, name: &str, channels: usize, n_state: usize, options: MambaOptions) -> Self {
        let c = channels;
        b.scope(name, |b| {
            let sets = if options.direction_specific { 4 } else { 1 };
            MambaBlockParams {
                norm1: LayerNorm::new(b, "norm1", c),
                norm2: LayerNorm::new(b, "norm2", c),
                lin_in_a: Conv2d::linear(b, "lin_in_a", c, c, true, WeightInit::TruncNormal),
                lin_in_b: Conv2d::linear(b, "lin_in_b", c, c, true, WeightInit::TruncNormal),
                lin_out: Conv2d::linear(b, "lin_out", c, c, true, WeightInit::TruncNormal),
                dwconv: b.trunc_normal("dwconv.weight", [c, 1, 3, 3], INIT_STD),
                dwconv_bias: b.zeros("dwconv.bias", [1, c, 1, 1]),
                ssm: (0..sets)
                    .map(|k| {
                        let n = if sets == 1 { "ssm".to_string() } else { format!("ssm{k}") };
                        SsmParams::new(b, &n, c, n_state)
                    })
                    .collect(),
                ca: ChannelAttention::new(b, "ca", c),
                options,
            }
        })
    }

    /// Two paths after layer norm, gated product, projection, channel
    /// attention, and the optional residual.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let o = self.options;
        let xn = self.norm1.forward(g, p, x)?;
        let a = self.lin_in_a.forward(g, p, xn)?;
        let act = o.activation.unary();
        let path1 = g.unary(act, a)?;
        let bpath = self.lin_in_b.forward(g, p, xn)?;
        let bpath = g.depthwise_conv2d(bpath, p.var(self.dwconv), Some(p.var(self.dwconv_bias)))?;
        let bpath = g.unary(act, bpath)?;
        let sets: Vec<_> = self.ssm.iter().map(|s| s.bind(p)).collect();
        let bpath = ss2d(g, bpath, &sets, o.mode, o.rule)?;
        let path2 = self.norm2.forward(g, p, bpath)?;
        let fused = g.mul(path1, path2)?;
        let y = self.lin_out.forward(g, p, fused)?;
        let y = self.ca.forward(g, p, y)?;
        if o.residual {
            g.add(x, y)
        } else {
            Ok(y)
        }
    }
}

/// `sigmoid(f_deform) ⊗ f_mamba + f_deform`.
pub fn modulator<S: Scalar>(g: &mut Graph<S>, f_deform: Var, f_mamba: Var) -> Result<Var> {
    let (a, b) = (g.shape(f_deform), g.shape(f_mamba));
    if a != b {
        return Err(Error::ShapeMismatch {
            op: "modulator",
            lhs: a,
            rhs: b,
        });
    }
    let gate = g.sigmoid(f_deform)?;
    let m = g.mul(gate, f_mamba)?;
    g.add(m, f_deform)
}

/// Non-overlapping `patch × patch` embedding and its inverse.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub embed: Conv2d,
    pub unembed: Conv2d,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, name: &str, channels: usize, patch: usize) -> Self {
        b.scope(name, |b| PatchEmbed {
            embed: Conv2d::new(b, "embed", channels, channels, patch, patch, Padding::Valid, true, WeightInit::TruncNormal),
            unembed: Conv2d::new(b, "unembed", channels, channels, 3, 1, Padding::Same, true, WeightInit::TruncNormal),
            patch,
        })
    }

    /// Pixel grid `(N, C, H, W)` to patch grid `(N, C, H/p, W/p)`.
    pub fn embed<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.h() % self.patch != 0 || s.w() % self.patch != 0 {
            return Err(Error::invalid(
                "patch_embed",
                format!("spatial size {}x{} not divisible by patch {}", s.h(), s.w(), self.patch),
            ));
        }
        self.embed.forward(g, p, x)
    }

    /// Nearest upsampling back to pixel resolution, then a 3×3 convolution.
    pub fn unembed<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let up = g.upsample_nearest(x, self.patch)?;
        self.unembed.forward(g, p, up)
    }
}

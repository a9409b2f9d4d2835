//! The two-branch network, its parameter report, and a FLOPs estimate.

mod upsample;

pub use upsample::{bicubic_resize, bicubic_upsample, BICUBIC_A};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Padding, Var};
use crate::blocks::{modulator, DeformParams, MambaBlockParams, MambaOptions, PatchEmbed};
use crate::config::{FusionKind, ModelConfig};
use crate::error::{Error, Result};
use crate::fusion::{AddConvFusion, FusionOutputs, FusionParams};
use crate::nn::{Bound, Builder, Conv2d, ParamStore, WeightInit};
use crate::scalar::Scalar;
use crate::ssm::ScanMode;
use crate::tensor::Tensor;

/// Parameter count reported for the reference implementation.
pub const REFERENCE_PARAMS: usize = 1_187_000;

/// Deform block in parallel with patch-embed → Mamba → un-patchify, joined
/// by the modulator.
#[derive(Clone, Debug)]
pub struct Stage {
    pub deform: DeformParams,
    pub patch: PatchEmbed,
    pub mamba: MambaBlockParams,
}

impl Stage {
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let d = self.deform.forward(g, p, x)?;
        let e = self.patch.embed(g, p, x)?;
        let m = self.mamba.forward(g, p, e)?;
        let u = self.patch.unembed(g, p, m)?;
        modulator(g, d, u)
    }
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub stem: Conv2d,
    pub stages: Vec<Stage>,
}

impl Branch {
    fn new<S: Scalar>(b: &mut Builder<'_, S>, name: &str, cfg: &ModelConfig, mode: ScanMode) -> Self {
        let c = cfg.channels;
        let opts = MambaOptions {
            mode,
            residual: cfg.mamba_residual,
            rule: cfg.rule(),
            direction_specific: cfg.direction_specific_params,
            activation: cfg.activation,
        };
        b.scope(name, |b| Branch {
            stem: Conv2d::new(b, "stem", 1, c, 3, 1, Padding::Same, true, WeightInit::TruncNormal),
            stages: (0..cfg.num_blocks)
                .map(|i| {
                    b.scope(&format!("stage{i}"), |b| Stage {
                        deform: DeformParams::new(b, "deform", c, c),
                        patch: PatchEmbed::new(b, "patch", c, cfg.patch),
                        mamba: MambaBlockParams::new(b, "mamba", c, cfg.n_state, opts),
                    })
                })
                .collect(),
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, img: Var) -> Result<Var> {
        let mut x = self.stem.forward(g, p, img)?;
        for s in &self.stages {
            x = s.forward(g, p, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Mmff(FusionParams),
    AddConv(AddConvFusion),
}

/// Network outputs, both `(N, 1, H, W)`.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub sr: Var,
    pub rec_ref: Var,
    pub fusion: Option<FusionOutputs>,
}

#[derive(Clone, Debug)]
pub struct GlMamba {
    pub config: ModelConfig,
    pub lr_branch: Branch,
    pub ref_branch: Branch,
    pub fusion: Fusion,
    pub sr_head: Conv2d,
    pub ref_head: Conv2d,
}

impl GlMamba {
    /// Registers every parameter in `store`, initialized from `rng`.
    pub fn build<S: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<S>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(store, rng);
        let c = cfg.channels;
        let lr_branch = Branch::new(&mut b, "lr", cfg, cfg.lr_scan);
        let ref_branch = Branch::new(&mut b, "ref", cfg, cfg.ref_scan);
        let fusion = match cfg.fusion {
            FusionKind::Mmff => Fusion::Mmff(FusionParams::new(&mut b, "fusion", c)),
            FusionKind::AddConv => Fusion::AddConv(AddConvFusion::new(&mut b, "fusion", c)),
        };
        let sr_head = Conv2d::new(&mut b, "sr_head", c, 1, 3, 1, Padding::Same, true, WeightInit::TruncNormal);
        let ref_head = Conv2d::new(&mut b, "ref_head", c, 1, 3, 1, Padding::Same, true, WeightInit::TruncNormal);
        Ok(GlMamba {
            config: cfg.clone(),
            lr_branch,
            ref_branch,
            fusion,
            sr_head,
            ref_head,
        })
    }

    /// Fresh parameters seeded by `cfg.seed`.
    pub fn init<S: Scalar>(cfg: &ModelConfig) -> Result<(Self, ParamStore<S>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let m = Self::build(cfg, &mut store, &mut rng)?;
        Ok((m, store))
    }

    /// Checks the LR/Ref size contract and patch divisibility.
    pub fn check_inputs(&self, lr: [usize; 4], reference: [usize; 4]) -> Result<()> {
        let s = self.config.scale;
        let [n, c, h, w] = reference;
        if c != 1 || lr[1] != 1 {
            return Err(Error::invalid("glmamba", "images must be single-channel"));
        }
        if lr[0] != n || lr[2] * s != h || lr[3] * s != w {
            return Err(Error::invalid(
                "glmamba",
                format!("lr {}x{} at scale {s} does not match ref {h}x{w}", lr[2], lr[3]),
            ));
        }
        let p = self.config.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::invalid("glmamba", format!("ref {h}x{w} not divisible by patch {p}")));
        }
        Ok(())
    }

    /// `lr_up` is the bicubic-upsampled LR image (see [`bicubic_upsample`]).
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, lr_up: Var, reference: Var) -> Result<Outputs> {
        let fl = self.lr_branch.forward(g, p, lr_up)?;
        let fr = self.ref_branch.forward(g, p, reference)?;
        let (fused, fusion) = match &self.fusion {
            Fusion::Mmff(f) => {
                let o = f.forward(g, p, fl, fr)?;
                (o.out, Some(o))
            }
            Fusion::AddConv(f) => (f.forward(g, p, fl, fr)?, None),
        };
        let mut sr = self.sr_head.forward(g, p, fused)?;
        if self.config.global_skip {
            sr = g.add(sr, lr_up)?;
        }
        let rec_ref = self.ref_head.forward(g, p, fr)?;
        Ok(Outputs { sr, rec_ref, fusion })
    }

    /// Upsamples `lr`, records both images as constants, and runs the network.
    pub fn forward_images<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, lr: &Tensor<S>, reference: &Tensor<S>) -> Result<Outputs> {
        self.check_inputs(lr.shape().0, reference.shape().0)?;
        let up = g.constant(bicubic_upsample(lr, self.config.scale));
        let r = g.constant(reference.clone());
        self.forward(g, p, up, r)
    }

    /// Inference without gradient tracking; returns `(sr, rec_ref)`.
    pub fn predict<S: Scalar>(&self, store: &ParamStore<S>, lr: &Tensor<S>, reference: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let o = self.forward_images(&mut g, &p, lr, reference)?;
        Ok((g.value(o.sr).clone(), g.value(o.rec_ref).clone()))
    }
}

/// Module a parameter name belongs to, e.g. `lr.stage0.mamba`.
pub fn module_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let depth = if parts.len() > 2 && parts[1].starts_with("stage") { 3 } else { 2.min(parts.len()) };
    let depth = if matches!(parts[0], "fusion" | "sr_head" | "ref_head") { 1 } else { depth };
    parts[..depth].join(".")
}

/// Component kind of a parameter name: `stem`, `deform`, `patch`, `mamba`,
/// `fusion`, or `head`.
pub fn kind_of(name: &str) -> &'static str {
    let module = module_of(name);
    let last = module.rsplit('.').next().unwrap_or("");
    match last {
        "stem" => "stem",
        "deform" => "deform",
        "patch" => "patch",
        "mamba" => "mamba",
        "fusion" => "fusion",
        _ => "head",
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub total: usize,
    /// `(module, count)` in registration order.
    pub modules: Vec<(String, usize)>,
    /// `(kind, count)` summed over branches and stages.
    pub kinds: Vec<(&'static str, usize)>,
}

impl ParamReport {
    pub fn ratio_to_reference(&self) -> f64 {
        self.total as f64 / REFERENCE_PARAMS as f64
    }

    pub fn render(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(s, "total {} ({:.3} M), reference {:.3} M, ratio {:.3}", self.total, self.total as f64 / 1e6, REFERENCE_PARAMS as f64 / 1e6, self.ratio_to_reference());
        for (k, n) in &self.kinds {
            let _ = writeln!(s, "  {k:<8} {n:>10}");
        }
        for (m, n) in &self.modules {
            let _ = writeln!(s, "  {m:<24} {n:>10}");
        }
        s
    }
}

pub fn param_count<S: Scalar>(store: &ParamStore<S>) -> usize {
    store.numel()
}

pub fn param_report<S: Scalar>(store: &ParamStore<S>) -> ParamReport {
    let mut modules: Vec<(String, usize)> = Vec::new();
    let mut kinds: Vec<(&'static str, usize)> = Vec::new();
    for e in store.entries() {
        let m = module_of(&e.name);
        match modules.last_mut() {
            Some((last, n)) if *last == m => *n += e.value.numel(),
            _ => modules.push((m, e.value.numel())),
        }
        let k = kind_of(&e.name);
        match kinds.iter_mut().find(|(kk, _)| *kk == k) {
            Some((_, n)) => *n += e.value.numel(),
            None => kinds.push((k, e.value.numel())),
        }
    }
    ParamReport {
        total: store.numel(),
        modules,
        kinds,
    }
}

/// Multiply-accumulate count of one forward pass at `h × w`, doubled to
/// FLOPs. Elementwise work and normalizations are ignored.
pub fn estimate_flops(cfg: &ModelConfig, h: usize, w: usize) -> f64 {
    let (c, s) = (cfg.channels as f64, cfg.n_state as f64);
    let px = (h * w) as f64;
    let tokens = px / (cfg.patch * cfg.patch) as f64;
    let conv = |cin: f64, cout: f64, k: f64, n: f64| cin * cout * k * k * n;
    let deform = conv(c, c, 3.0, px) + conv(c, 27.0, 3.0, px) + px * 9.0 * c * 4.0;
    let patch = conv(c, c, cfg.patch as f64, tokens) + conv(c, c, 3.0, px);
    let sets = if cfg.direction_specific_params { 4.0 } else { 1.0 };
    let scan = 4.0 * tokens * c * s * 3.0 + tokens * (2.0 * s + 1.0) * c * sets;
    let mamba = 3.0 * conv(c, c, 1.0, tokens) + 9.0 * c * tokens + scan;
    let stage = deform + patch + mamba;
    let branches = 2.0 * (conv(1.0, c, 3.0, px) + cfg.num_blocks as f64 * stage);
    let fusion = match cfg.fusion {
        FusionKind::Mmff => conv(2.0 * c, 2.0, 1.0, px) + 3.0 * c * 3.0,
        FusionKind::AddConv => conv(c, c, 3.0, px),
    };
    let heads = 2.0 * conv(c, 1.0, 3.0, px);
    2.0 * (branches + fusion + heads)
}

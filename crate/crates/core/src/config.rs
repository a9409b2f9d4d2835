//! Model configuration and the `key = value` text format shared by config
//! files and checkpoint snapshots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::blocks::{Activation, CA_REDUCTION};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::ssm::{Discretization, ScanMode};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum FusionKind {
    /// Difference, similarity, and complementary maps mixed by learned weights.
    #[default]
    Mmff,
    /// `conv3x3(f_lr + f_ref)` baseline.
    AddConv,
}

/// Ordered `key = value` pairs. Lines starting with `#` and blank lines are
/// ignored; trailing `# ...` comments are stripped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap {
    pub entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{}`", no + 1, raw.trim())))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", no + 1)));
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(KvMap { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

fn scan_name(m: ScanMode) -> &'static str {
    match m {
        ScanMode::Global => "global",
        ScanMode::Local => "local",
    }
}

fn parse_scan(key: &str, v: &str) -> Result<ScanMode> {
    match v {
        "global" => Ok(ScanMode::Global),
        "local" => Ok(ScanMode::Local),
        _ => Err(Error::Config(format!("invalid scan mode `{v}` for `{key}` (global|local)"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub num_blocks: usize,
    pub patch: usize,
    pub scale: usize,
    pub n_state: usize,
    pub loss_weights: LossWeights,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub precision: Precision,
    pub mamba_residual: bool,
    pub e2_symmetric: bool,
    pub euler_discretization: bool,
    pub direction_specific_params: bool,
    pub activation: Activation,
    pub lr_scan: ScanMode,
    pub ref_scan: ScanMode,
    pub fusion: FusionKind,
    /// Adds the upsampled LR input to the SR head output.
    pub global_skip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 96,
            num_blocks: 4,
            patch: 2,
            scale: 2,
            n_state: 16,
            loss_weights: LossWeights::default(),
            lr: 2e-4,
            batch: 2,
            seed: 0,
            precision: Precision::F32,
            mamba_residual: true,
            e2_symmetric: false,
            euler_discretization: false,
            direction_specific_params: false,
            activation: Activation::Silu,
            lr_scan: ScanMode::Global,
            ref_scan: ScanMode::Local,
            fusion: FusionKind::Mmff,
            global_skip: false,
        }
    }
}

/// Keys that change the parameter layout; checkpoints must agree on them.
pub const ARCHITECTURE_KEYS: &[&str] = &[
    "channels",
    "num_blocks",
    "patch",
    "n_state",
    "direction_specific_params",
    "fusion",
];

impl ModelConfig {
    pub fn rule(&self) -> Discretization {
        if self.euler_discretization {
            Discretization::Euler
        } else {
            Discretization::Zoh
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.num_blocks == 0 || self.n_state == 0 || self.batch == 0 {
            return bad("channels, num_blocks, n_state and batch must be positive".into());
        }
        if self.channels > 1 && self.channels % CA_REDUCTION != 0 {
            return bad(format!("channels {} not divisible by the attention ratio {CA_REDUCTION}", self.channels));
        }
        if self.patch == 0 {
            return bad("patch must be positive".into());
        }
        if self.scale != 2 && self.scale != 4 {
            return bad(format!("scale must be 2 or 4, got {}", self.scale));
        }
        let w = self.loss_weights;
        if !(self.lr >= 0.0 && self.lr.is_finite()) || [w.alpha, w.beta, w.gamma].iter().any(|v| !(*v >= 0.0)) {
            return bad("learning rate and loss weights must be non-negative".into());
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "channels" => self.channels = parse_value(key, v)?,
            "num_blocks" => self.num_blocks = parse_value(key, v)?,
            "patch" => self.patch = parse_value(key, v)?,
            "scale" => self.scale = parse_value(key, v)?,
            "n_state" => self.n_state = parse_value(key, v)?,
            "alpha" => self.loss_weights.alpha = parse_value(key, v)?,
            "beta" => self.loss_weights.beta = parse_value(key, v)?,
            "gamma" => self.loss_weights.gamma = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "batch" => self.batch = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("invalid precision `{v}` (f32|f64)"))),
                }
            }
            "mamba_residual" => self.mamba_residual = parse_bool(key, v)?,
            "e2_symmetric" => self.e2_symmetric = parse_bool(key, v)?,
            "euler_discretization" => self.euler_discretization = parse_bool(key, v)?,
            "direction_specific_params" => self.direction_specific_params = parse_bool(key, v)?,
            "activation" => {
                self.activation = match v {
                    "silu" => Activation::Silu,
                    "gelu" => Activation::Gelu,
                    _ => return Err(Error::Config(format!("invalid activation `{v}` (silu|gelu)"))),
                }
            }
            "lr_scan" => self.lr_scan = parse_scan(key, v)?,
            "ref_scan" => self.ref_scan = parse_scan(key, v)?,
            "fusion" => {
                self.fusion = match v {
                    "mmff" => FusionKind::Mmff,
                    "add_conv" => FusionKind::AddConv,
                    _ => return Err(Error::Config(format!("invalid fusion `{v}` (mmff|add_conv)"))),
                }
            }
            "global_skip" => self.global_skip = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn is_key(key: &str) -> bool {
        Self::default().to_kv().get(key).is_some()
    }

    /// Applies every recognized key of `kv`; unrecognized keys are returned.
    pub fn apply(&mut self, kv: &KvMap) -> Result<Vec<String>> {
        let mut rest = Vec::new();
        for (k, v) in &kv.entries {
            if Self::is_key(k) {
                self.set(k, v)?;
            } else {
                rest.push(k.clone());
            }
        }
        Ok(rest)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("channels", self.channels);
        kv.set("num_blocks", self.num_blocks);
        kv.set("patch", self.patch);
        kv.set("scale", self.scale);
        kv.set("n_state", self.n_state);
        kv.set("alpha", self.loss_weights.alpha);
        kv.set("beta", self.loss_weights.beta);
        kv.set("gamma", self.loss_weights.gamma);
        kv.set("lr", self.lr);
        kv.set("batch", self.batch);
        kv.set("seed", self.seed);
        kv.set(
            "precision",
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            },
        );
        kv.set("mamba_residual", self.mamba_residual);
        kv.set("e2_symmetric", self.e2_symmetric);
        kv.set("euler_discretization", self.euler_discretization);
        kv.set("direction_specific_params", self.direction_specific_params);
        kv.set(
            "activation",
            match self.activation {
                Activation::Silu => "silu",
                Activation::Gelu => "gelu",
            },
        );
        kv.set("lr_scan", scan_name(self.lr_scan));
        kv.set("ref_scan", scan_name(self.ref_scan));
        kv.set(
            "fusion",
            match self.fusion {
                FusionKind::Mmff => "mmff",
                FusionKind::AddConv => "add_conv",
            },
        );
        kv.set("global_skip", self.global_skip);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut c = ModelConfig::default();
        let rest = c.apply(kv)?;
        if let Some(k) = rest.first() {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        c.validate()?;
        Ok(c)
    }
}

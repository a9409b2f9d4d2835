//! Checkpoint files: parameters, optimizer moments, and a config snapshot.
//!
//! Layout: `GLCK`, u32 LE version, then three length-prefixed sections
//! (u64 LE byte count each): the manifest text, the config text, and the
//! concatenated GT1 blobs. Manifest lines read `name rank d0 .. offset`,
//! with offsets relative to the start of the blob section. Optimizer moments
//! are stored as tensors named `adam.m/<param>` and `adam.v/<param>`.

use std::path::Path;

use crate::config::{KvMap, ModelConfig, ARCHITECTURE_KEYS};
use crate::error::{Error, Result};
use crate::io::{decode_gt1, encode_gt1};
use crate::model::GlMamba;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{Adam, AdamState};

pub const MAGIC: &[u8; 4] = b"GLCK";
pub const VERSION: u32 = 1;

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub adam: Option<Adam<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
}

impl ManifestEntry {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

fn corrupt(path: &Path, msg: impl Into<String>) -> Error {
    Error::format(path, msg)
}

/// Serializes a checkpoint to bytes.
pub fn encode<S: Scalar>(config: &ModelConfig, params: &ParamStore<S>, adam: Option<&Adam<S>>) -> Vec<u8> {
    let mut named: Vec<(String, &Tensor<S>)> = params.entries().iter().map(|e| (e.name.clone(), &e.value)).collect();
    let mut kv = config.to_kv();
    if let Some(a) = adam {
        for (e, (m, v)) in params.entries().iter().zip(a.state.m.iter().zip(&a.state.v)) {
            named.push((format!("{M_PREFIX}{}", e.name), m));
            named.push((format!("{V_PREFIX}{}", e.name), v));
        }
        kv.set("adam_step", a.state.step);
        kv.set("adam_lr", a.lr);
        kv.set("adam_beta1", a.beta1);
        kv.set("adam_beta2", a.beta2);
        kv.set("adam_eps", a.eps);
    }
    let mut blob = Vec::new();
    let mut manifest = String::new();
    for (name, t) in &named {
        let dims = t.shape().0;
        manifest.push_str(&format!(
            "{name} 4 {} {} {} {} {}\n",
            dims[0],
            dims[1],
            dims[2],
            dims[3],
            blob.len()
        ));
        encode_gt1(t, &mut blob);
    }
    let config_text = kv.render();
    let mut out = Vec::with_capacity(blob.len() + manifest.len() + config_text.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for section in [manifest.as_bytes(), config_text.as_bytes(), &blob] {
        out.extend_from_slice(&(section.len() as u64).to_le_bytes());
        out.extend_from_slice(section);
    }
    out
}

pub fn save<S: Scalar>(path: impl AsRef<Path>, config: &ModelConfig, params: &ParamStore<S>, adam: Option<&Adam<S>>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(config, params, adam)).map_err(|e| Error::io(path, e))
}

fn parse_manifest(path: &Path, text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let bad = || corrupt(path, format!("manifest line {}: `{line}`", k + 1));
        let f: Vec<&str> = line.split_ascii_whitespace().collect();
        let rank: usize = f.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        if f.len() != rank + 3 {
            return Err(bad());
        }
        let nums: Vec<usize> = f[2..].iter().map(|s| s.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        out.push(ManifestEntry {
            name: f[0].to_string(),
            dims: nums[..rank].to_vec(),
            offset: nums[rank],
        });
    }
    Ok(out)
}

/// Parsed but unvalidated contents.
pub struct RawCheckpoint {
    pub manifest: Vec<ManifestEntry>,
    pub config: KvMap,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<RawCheckpoint> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(corrupt(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("version {version} not supported (expected {VERSION})")));
    }
    let mut pos = 8usize;
    let mut sections: Vec<&[u8]> = Vec::new();
    for name in ["manifest", "config", "blob"] {
        let truncated = || corrupt(path, format!("truncated file in {name} section"));
        let len = bytes.get(pos..pos + 8).ok_or_else(truncated)?;
        let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
        pos += 8;
        let end = pos.checked_add(len).ok_or_else(truncated)?;
        sections.push(bytes.get(pos..end).ok_or_else(truncated)?);
        pos = end;
    }
    if pos != bytes.len() {
        return Err(corrupt(path, format!("{} trailing bytes", bytes.len() - pos)));
    }
    let text = |s: &[u8], what: &str| String::from_utf8(s.to_vec()).map_err(|_| corrupt(path, format!("{what} is not UTF-8")));
    let manifest = parse_manifest(path, &text(sections[0], "manifest")?)?;
    let config = KvMap::parse(&text(sections[1], "config")?)?;
    let blob = sections[2];
    let mut tensors = Vec::with_capacity(manifest.len());
    for e in &manifest {
        let src = blob
            .get(e.offset..)
            .ok_or_else(|| corrupt(path, format!("offset of {} past end", e.name)))?;
        let (t, _) = decode_gt1(src).map_err(|m| corrupt(path, format!("tensor {}: {m}", e.name)))?;
        if t.numel() != e.numel() {
            return Err(corrupt(path, format!("tensor {} disagrees with manifest", e.name)));
        }
        tensors.push((e.name.clone(), t));
    }
    Ok(RawCheckpoint {
        manifest,
        config,
        tensors,
    })
}

/// Loads a checkpoint and checks it against the parameter layout of
/// `template` (a freshly built store for `expected`). The returned config is
/// the stored snapshot.
pub fn load<S: Scalar>(path: impl AsRef<Path>, expected: &ModelConfig, template: &ParamStore<S>) -> Result<Checkpoint<S>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let raw = decode(path, &bytes)?;
    let config = {
        let mut c = ModelConfig::default();
        c.apply(&raw.config)?;
        c
    };
    let (want, have) = (expected.to_kv(), config.to_kv());
    for key in ARCHITECTURE_KEYS {
        if want.get(key) != have.get(key) {
            return Err(Error::Checkpoint(format!(
                "{key}: checkpoint has {}, config expects {}",
                have.get(key).unwrap_or("?"),
                want.get(key).unwrap_or("?")
            )));
        }
    }

    let mut params = template.clone();
    let mut seen = vec![false; params.len()];
    let mut m = vec![None; params.len()];
    let mut v = vec![None; params.len()];
    for (name, t) in raw.tensors {
        let (base, slot) = if let Some(b) = name.strip_prefix(M_PREFIX) {
            (b, Some(&mut m))
        } else if let Some(b) = name.strip_prefix(V_PREFIX) {
            (b, Some(&mut v))
        } else {
            (name.as_str(), None)
        };
        let id = params
            .find(base)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor name `{name}`")))?;
        let want = params.get(id).shape();
        if t.shape() != want {
            return Err(Error::Checkpoint(format!("{name}: shape {} but model expects {want}", t.shape())));
        }
        let value: Tensor<S> = t.cast();
        match slot {
            Some(s) => s[id.0] = Some(value),
            None => {
                if std::mem::replace(&mut seen[id.0], true) {
                    return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
                }
                *params.get_mut(id) = value;
            }
        }
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        let id = params.ids().nth(k).expect("index in range");
        return Err(Error::Checkpoint(format!("missing tensor `{}`", params.name(id))));
    }
    let adam = match raw.config.get("adam_step") {
        None => None,
        Some(step) => {
            let num = |key: &str| -> Result<f64> {
                raw.config
                    .get(key)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Checkpoint(format!("missing or bad {key}")))
            };
            let step = step.parse().map_err(|_| Error::Checkpoint("bad adam_step".into()))?;
            let take = |slots: Vec<Option<Tensor<S>>>, what: &str| -> Result<Vec<Tensor<S>>> {
                slots
                    .into_iter()
                    .enumerate()
                    .map(|(k, t)| t.ok_or_else(|| Error::Checkpoint(format!("missing {what} moment for parameter {k}"))))
                    .collect()
            };
            Some(Adam {
                lr: num("adam_lr")?,
                beta1: num("adam_beta1")?,
                beta2: num("adam_beta2")?,
                eps: num("adam_eps")?,
                state: AdamState {
                    step,
                    m: take(m, "first")?,
                    v: take(v, "second")?,
                },
            })
        }
    };
    Ok(Checkpoint { config, params, adam })
}

/// Reads only the manifest of a checkpoint file.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(path, &bytes)?.manifest)
}

/// The config snapshot stored in a checkpoint.
pub fn read_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = ModelConfig::default();
    c.apply(&decode(path, &bytes)?.config)?;
    Ok(c)
}

/// Rebuilds the model described by a checkpoint's own config and loads it.
pub fn open<S: Scalar>(path: impl AsRef<Path>) -> Result<(GlMamba, Checkpoint<S>)> {
    let path = path.as_ref();
    let cfg = read_config(path)?;
    let (model, template) = GlMamba::init::<S>(&cfg)?;
    let ck = load(path, &cfg, &template)?;
    Ok((model, ck))
}

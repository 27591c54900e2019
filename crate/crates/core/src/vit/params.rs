//! Named parameter tensors, their initialization, gradients, and the `AVT1`
//! checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "AVT1" | u32 meta_len | meta JSON {config, seed} | u32 n_entries |
//!   per entry: u32 name_len | name | u8 dtype (0 = f32, 1 = f64) | u8 frozen |
//!              u32 ndim | u32 dims[ndim] | payload
//! ```

use super::config::{Compression, EncoderConfig};
use super::ModelError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const AVT_MAGIC: &[u8; 4] = b"AVT1";
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub frozen: bool,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    /// Truncated normal at +-2 std.
    Normal(f64),
}

fn block_layout(prefix: &str, cfg: &EncoderConfig, out: &mut Vec<(String, Vec<usize>, Init)>) {
    let d = cfg.d_model;
    let h = cfg.mlp_hidden();
    let w = Init::Normal(INIT_STD);
    for (name, shape, init) in [
        ("ln1.g", vec![d], Init::Ones),
        ("ln1.b", vec![d], Init::Zeros),
        ("attn.qkv.w", vec![d, 3 * d], w),
        ("attn.q.b", vec![d], Init::Zeros),
        ("attn.v.b", vec![d], Init::Zeros),
        ("attn.out.w", vec![d, d], w),
        ("attn.out.b", vec![d], Init::Zeros),
        ("ln2.g", vec![d], Init::Ones),
        ("ln2.b", vec![d], Init::Zeros),
        ("mlp.fc1.w", vec![d, h], w),
        ("mlp.fc1.b", vec![h], Init::Zeros),
        ("mlp.fc2.w", vec![h, d], w),
        ("mlp.fc2.b", vec![d], Init::Zeros),
    ] {
        out.push((format!("{prefix}.{name}"), shape, init));
    }
}

fn layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let td = cfg.token_dim();
    let w = Init::Normal(INIT_STD);
    let mut out: Vec<(String, Vec<usize>, Init)> = vec![
        ("encoder.patch_embed.w".into(), vec![td, d], w),
        ("encoder.patch_embed.b".into(), vec![d], Init::Zeros),
    ];
    for l in 0..cfg.n_layers {
        block_layout(&format!("encoder.blocks.{l}"), cfg, &mut out);
    }
    out.push(("encoder.ln_f.g".into(), vec![d], Init::Ones));
    out.push(("encoder.ln_f.b".into(), vec![d], Init::Zeros));

    out.push(("mae.mask_token".into(), vec![d], w));
    block_layout("mae.decoder", cfg, &mut out);
    out.push(("mae.head.w".into(), vec![d, td], w));
    out.push(("mae.head.b".into(), vec![td], Init::Zeros));

    out.push(("flip.proj.w".into(), vec![d, cfg.d_joint], w));

    if cfg.compression == Compression::Perceiver {
        out.push(("connector.resampler.queries".into(), vec![cfg.n_queries, d], w));
        // Keys carry no bias: softmax is invariant to it.
        for p in ["q", "k", "v"] {
            out.push((format!("connector.resampler.{p}.w"), vec![d, d], w));
        }
        for p in ["q", "v"] {
            out.push((format!("connector.resampler.{p}.b"), vec![d], Init::Zeros));
        }
    }
    let cin = cfg.connector_in();
    out.push(("connector.fc1.w".into(), vec![cin, cfg.d_llm], w));
    out.push(("connector.fc1.b".into(), vec![cfg.d_llm], Init::Zeros));
    if cfg.connector_depth == 2 {
        out.push(("connector.fc2.w".into(), vec![cfg.d_llm, cfg.d_llm], w));
        out.push(("connector.fc2.b".into(), vec![cfg.d_llm], Init::Zeros));
    }

    // Stand-in for the frozen language model: a random projection scaled to
    // preserve norms rather than the small init used for trainable layers.
    let lm_std = 1.0 / (cfg.d_llm as f64).sqrt();
    out.push(("lm_head.w".into(), vec![cfg.d_llm, cfg.d_joint], Init::Normal(lm_std)));
    out.push(("lm_head.b".into(), vec![cfg.d_joint], Init::Zeros));
    out
}

/// Every tensor of the micro model, by name, with per-tensor freeze flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    config: EncoderConfig,
    seed: u64,
    tensors: BTreeMap<String, Param>,
}

/// Weights ~ N(0, 0.02) truncated at +-2 std; biases and LN shifts zero; LN
/// gains one. Tensors are filled in name order from one seeded stream.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ParameterSet, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = layout(cfg);
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    let mut tensors = BTreeMap::new();
    for (name, shape, init) in entries {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n)
                    .map(|_| loop {
                        let x: f64 = dist.sample(&mut rng);
                        if x.abs() <= 2.0 * std {
                            break x;
                        }
                    })
                    .collect()
            }
        };
        tensors.insert(
            name,
            Param {
                shape,
                data,
                frozen: false,
            },
        );
    }
    Ok(ParameterSet {
        config: cfg.clone(),
        seed,
        tensors,
    })
}

/// True when `name` equals `selector` or sits below it in the dotted hierarchy.
pub fn name_matches(selector: &str, name: &str) -> bool {
    name == selector
        || (name.len() > selector.len()
            && name.starts_with(selector)
            && name.as_bytes()[selector.len()] == b'.')
}

impl ParameterSet {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Panics on unknown names; layouts are fixed by the config.
    pub fn tensor(&self, name: &str) -> &[f64] {
        match self.tensors.get(name) {
            Some(p) => &p.data,
            None => panic!("no tensor named {name}"),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.tensors.get_mut(name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut [f64] {
        match self.tensors.get_mut(name) {
            Some(p) => &mut p.data,
            None => panic!("no tensor named {name}"),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(|p| p.data.len()).sum()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.tensors.get(name).is_some_and(|p| p.frozen)
    }

    /// Names covered by a selector; empty when the selector matches nothing.
    pub fn resolve(&self, selector: &str) -> Vec<&str> {
        self.names().filter(|n| name_matches(selector, n)).collect()
    }

    /// Unfreezes exactly the tensors matched by `selectors`.
    pub fn set_trainable(&mut self, selectors: &[String]) -> Result<(), ModelError> {
        for s in selectors {
            if self.resolve(s).is_empty() {
                return Err(ModelError::UnknownTensor(s.clone()));
            }
        }
        for (name, p) in self.tensors.iter_mut() {
            p.frozen = !selectors.iter().any(|s| name_matches(s, name));
        }
        Ok(())
    }

    pub fn freeze_all(&mut self, frozen: bool) {
        self.tensors.values_mut().for_each(|p| p.frozen = frozen);
    }

    /// True when any tensor under `prefix` is trainable.
    pub fn any_trainable(&self, prefix: &str) -> bool {
        self.tensors
            .iter()
            .any(|(n, p)| !p.frozen && name_matches(prefix, n))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Copies every tensor present in both sets with equal shape from `other`.
    pub fn load_matching(&mut self, other: &ParameterSet, selector: &str) -> usize {
        let mut n = 0;
        for (name, p) in self.tensors.iter_mut() {
            if !name_matches(selector, name) {
                continue;
            }
            if let Some(o) = other.tensors.get(name) {
                if o.shape == p.shape {
                    p.data.clone_from(&o.data);
                    n += 1;
                }
            }
        }
        n
    }

    /// Names of tensors whose bits differ between two sets of equal layout.
    pub fn diff(&self, other: &ParameterSet) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|(name, p)| {
                other.tensors.get(*name).is_none_or(|o| {
                    o.shape != p.shape
                        || o.data
                            .iter()
                            .zip(&p.data)
                            .any(|(a, b)| a.to_bits() != b.to_bits())
                })
            })
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&CheckpointMeta {
            config: self.config.clone(),
            seed: self.seed,
        })
        .expect("config serializes");
        let mut buf = AVT_MAGIC.to_vec();
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, p) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(1);
            buf.push(p.frozen as u8);
            buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &p.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != AVT_MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| ModelError::Checkpoint(format!("metadata: {e}")))?;
        let n = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ModelError::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            let frozen = r.take(1)?[0] != 0;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let count: usize = shape.iter().product();
            let data = match dtype {
                0 => r
                    .take(count * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                1 => r
                    .take(count * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                other => {
                    return Err(ModelError::Checkpoint(format!("unknown dtype {other}")))
                }
            };
            tensors.insert(
                name,
                Param {
                    shape,
                    data,
                    frozen,
                },
            );
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Checkpoint("trailing bytes".into()));
        }
        let set = ParameterSet {
            config: meta.config,
            seed: meta.seed,
            tensors,
        };
        set.check_layout()?;
        Ok(set)
    }

    /// Every tensor the config requires is present with the right shape.
    pub fn check_layout(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let expected = layout(&self.config);
        if expected.len() != self.tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape, _) in expected {
            match self.tensors.get(&name) {
                Some(p) if p.shape == shape => {}
                Some(p) => {
                    return Err(ModelError::Checkpoint(format!(
                        "{name}: shape {:?}, expected {shape:?}",
                        p.shape
                    )))
                }
                None => return Err(ModelError::Checkpoint(format!("missing tensor {name}"))),
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: EncoderConfig,
    seed: u64,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ModelError::Checkpoint("truncated".into())),
        }
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Gradient tensors keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads {
    map: BTreeMap<String, Vec<f64>>,
}

impl Grads {
    pub fn add(&mut self, name: &str, g: &[f64]) {
        match self.map.get_mut(name) {
            Some(acc) => {
                debug_assert_eq!(acc.len(), g.len(), "{name}");
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => {
                self.map.insert(name.to_string(), g.to_vec());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.map.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn scale(&mut self, s: f64) {
        self.map
            .values_mut()
            .for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }

    pub fn merge(&mut self, other: Grads) {
        for (k, v) in other.map {
            self.add(&k, &v);
        }
    }

    /// Drops gradients of frozen tensors.
    pub fn retain_trainable(&mut self, params: &ParameterSet) {
        self.map.retain(|name, _| !params.is_frozen(name));
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

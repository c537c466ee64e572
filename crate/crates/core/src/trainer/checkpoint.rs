//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `CTXS`, `u32` version, a length-prefixed
//! UTF-8 config block of sorted `key=value` lines (values are JSON text),
//! `u32` tensor count, then per tensor a length-prefixed name, `u32` rank,
//! `u64` dims and raw `f32` or `f64` values, and finally a CRC32 of every
//! preceding byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::seq2seq::{ModelConfig, Seq2Seq};
use crate::tensor::{AdamState, ParamSet, Tensor};
use crate::topic_cnn::{CnnConfig, CnnParams};
use crate::util::write_atomic;

pub const MAGIC: &[u8; 4] = b"CTXS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Position reached by a training run: `epoch` epochs of stage `stage` are
/// complete, after `step` optimizer updates in total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Progress {
    pub stage: usize,
    pub epoch: usize,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub model: AdamState,
    pub cnn: Option<AdamState>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Seq2Seq,
    pub cnn: Option<CnnParams>,
    pub precision: Precision,
    pub optimizer: Option<OptimizerState>,
    pub progress: Progress,
    pub vocab_hash: String,
    pub rng_state: String,
}

#[derive(Serialize, Deserialize)]
struct AdamHyper {
    t: u64,
    alpha: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

// ── Config block ──────────────────────────────────────────────────────

fn flatten(prefix: &str, value: &impl Serialize, out: &mut BTreeMap<String, String>) -> Result<()> {
    match serde_json::to_value(value)? {
        Value::Object(map) => {
            for (k, v) in map {
                out.insert(format!("{prefix}.{k}"), v.to_string());
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
    Ok(())
}

fn section<T: for<'de> Deserialize<'de>>(
    entries: &BTreeMap<String, String>,
    prefix: &str,
) -> Result<Option<T>> {
    let lead = format!("{prefix}.");
    let mut map = Map::new();
    for (k, v) in entries.range(lead.clone()..) {
        let Some(field) = k.strip_prefix(&lead) else {
            break;
        };
        let value: Value = serde_json::from_str(v).map_err(|e| Error::Format {
            field: k.clone(),
            detail: e.to_string(),
        })?;
        map.insert(field.to_string(), value);
    }
    if map.is_empty() {
        return Ok(None);
    }
    serde_json::from_value(Value::Object(map))
        .map(Some)
        .map_err(|e| Error::Format {
            field: prefix.to_string(),
            detail: e.to_string(),
        })
}

fn single<T: for<'de> Deserialize<'de>>(
    entries: &BTreeMap<String, String>,
    key: &str,
) -> Result<T> {
    let text = entries.get(key).ok_or_else(|| Error::Format {
        field: key.to_string(),
        detail: "missing from config block".into(),
    })?;
    serde_json::from_str(text).map_err(|e| Error::Format {
        field: key.to_string(),
        detail: e.to_string(),
    })
}

fn required<T>(value: Option<T>, field: &str) -> Result<T> {
    value.ok_or_else(|| Error::Format {
        field: field.to_string(),
        detail: "missing from config block".into(),
    })
}

/// Canonical `key=value` lines of a model configuration.
pub fn config_entries(config: &ModelConfig) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    flatten("model", config, &mut out)?;
    Ok(out)
}

// ── Byte-level reader ─────────────────────────────────────────────────

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                field: field.to_string(),
                detail: format!("truncated: needs {n} bytes at offset {}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, field)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, field)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, field: &str) -> Result<String> {
        let n = self.u32(field)? as usize;
        let raw = self.take(n, field)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            field: field.to_string(),
            detail: "invalid UTF-8".into(),
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

// ── Container ─────────────────────────────────────────────────────────

fn write_container(
    entries: &BTreeMap<String, String>,
    tensors: &[(String, &Tensor)],
    precision: Precision,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let block: String = entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    put_str(&mut out, &block);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_str(&mut out, name);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            match precision {
                Precision::F64 => out.extend_from_slice(&x.to_le_bytes()),
                Precision::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Verifies framing and checksum; returns the config entries and the
/// tensors grouped by prefix.
fn read_container(bytes: &[u8]) -> Result<(BTreeMap<String, String>, BTreeMap<String, ParamSet>)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format {
            field: "magic".into(),
            detail: "not a checkpoint file".into(),
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Format {
            field: "header".into(),
            detail: "truncated".into(),
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let mut r = Reader {
        bytes: body,
        pos: 4,
    };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            field: "version".into(),
            detail: format!("version {version}, expected {VERSION}"),
        });
    }
    if crc32fast::hash(body) != stored {
        return Err(Error::Format {
            field: "crc32".into(),
            detail: "checksum mismatch (corrupted or truncated file)".into(),
        });
    }
    let block = r.string("config")?;
    let mut entries = BTreeMap::new();
    for line in block.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            field: "config".into(),
            detail: format!("line without '=': {line:?}"),
        })?;
        entries.insert(k.to_string(), v.to_string());
    }
    let precision: Precision = single(&entries, "format.precision")?;
    let count = r.u32("tensor count")? as usize;
    let mut groups: BTreeMap<String, ParamSet> = BTreeMap::new();
    for i in 0..count {
        let field = format!("tensor {i}");
        let full = r.string(&field)?;
        let rank = r.u32(&full)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&full)? as usize);
        }
        let n: usize = shape.iter().product();
        let width = match precision {
            Precision::F64 => 8,
            Precision::F32 => 4,
        };
        let raw = r.take(n * width, &full)?;
        let data = match precision {
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        let tensor = Tensor::from_vec(&shape, data).map_err(|e| Error::Format {
            field: full.clone(),
            detail: e.to_string(),
        })?;
        let (group, name) = split_group(&full)?;
        groups.entry(group).or_default().add(name.clone(), tensor)?;
    }
    if r.pos != body.len() {
        return Err(Error::Format {
            field: "trailer".into(),
            detail: format!(
                "{} unexpected bytes after the last tensor",
                body.len() - r.pos
            ),
        });
    }
    Ok((entries, groups))
}

// ── Encoding ──────────────────────────────────────────────────────────

impl Checkpoint {
    fn entries(&self) -> Result<BTreeMap<String, String>> {
        let mut out = config_entries(&self.model.config)?;
        flatten("format.precision", &self.precision, &mut out)?;
        if let Some(cnn) = &self.cnn {
            flatten("cnn", &cnn.config, &mut out)?;
        }
        flatten("progress", &self.progress, &mut out)?;
        flatten("vocab.hash", &self.vocab_hash, &mut out)?;
        flatten("rng.state", &self.rng_state, &mut out)?;
        if let Some(opt) = &self.optimizer {
            for (prefix, state) in [
                ("opt.model", Some(&opt.model)),
                ("opt.cnn", opt.cnn.as_ref()),
            ] {
                if let Some(s) = state {
                    let hyper = AdamHyper {
                        t: s.t,
                        alpha: s.alpha,
                        beta1: s.beta1,
                        beta2: s.beta2,
                        epsilon: s.epsilon,
                    };
                    flatten(prefix, &hyper, &mut out)?;
                }
            }
        }
        Ok(out)
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (name, t) in self.model.params.iter() {
            out.push((format!("model.{name}"), t));
        }
        if let Some(cnn) = &self.cnn {
            for (name, t) in cnn.params.iter() {
                out.push((format!("cnn.{name}"), t));
            }
        }
        if let Some(opt) = &self.optimizer {
            for (tag, set, state) in [
                ("model", Some(&self.model.params), Some(&opt.model)),
                (
                    "cnn",
                    self.cnn.as_ref().map(|c| &c.params),
                    opt.cnn.as_ref(),
                ),
            ] {
                if let (Some(set), Some(state)) = (set, state) {
                    for ((name, _), (m, v)) in set.iter().zip(state.m.iter().zip(&state.v)) {
                        out.push((format!("opt.m.{tag}.{name}"), m));
                        out.push((format!("opt.v.{tag}.{name}"), v));
                    }
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(write_container(
            &self.entries()?,
            &self.tensors(),
            self.precision,
        ))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (entries, mut groups) = read_container(bytes)?;
        let precision: Precision = single(&entries, "format.precision")?;
        let model_config: ModelConfig = required(section(&entries, "model")?, "model")?;
        let model_params = groups.remove("model").unwrap_or_default();
        let model = Seq2Seq::from_params(model_config, &model_params)?;
        let cnn = match section::<CnnConfig>(&entries, "cnn")? {
            None => None,
            Some(cfg) => Some(CnnParams::from_params(
                cfg,
                groups.remove("cnn").unwrap_or_default(),
            )?),
        };
        let adam = |tag: &str,
                    set: &ParamSet,
                    groups: &mut BTreeMap<String, ParamSet>|
         -> Result<Option<AdamState>> {
            let Some(h) = section::<AdamHyper>(&entries, &format!("opt.{tag}"))? else {
                return Ok(None);
            };
            let m = groups.remove(&format!("opt.m.{tag}")).unwrap_or_default();
            let v = groups.remove(&format!("opt.v.{tag}")).unwrap_or_default();
            let mut state = AdamState::with_hyper(set, h.alpha, h.beta1, h.beta2, h.epsilon)?;
            state.t = h.t;
            for (k, (name, t)) in set.iter().enumerate() {
                for (moments, src, which) in [(&mut state.m, &m, "m"), (&mut state.v, &v, "v")] {
                    let got = src.by_name(name).ok_or_else(|| Error::Format {
                        field: format!("opt.{which}.{tag}.{name}"),
                        detail: "missing optimizer moment".into(),
                    })?;
                    if got.shape() != t.shape() {
                        return Err(Error::Format {
                            field: format!("opt.{which}.{tag}.{name}"),
                            detail: format!(
                                "shape {:?}, parameter has {:?}",
                                got.shape(),
                                t.shape()
                            ),
                        });
                    }
                    moments[k] = Tensor::from_vec(got.shape(), got.data().to_vec())?;
                }
            }
            Ok(Some(state))
        };
        let model_adam = adam("model", &model.params, &mut groups)?;
        let cnn_adam = match &cnn {
            Some(c) => adam("cnn", &c.params, &mut groups)?,
            None => None,
        };
        let optimizer = model_adam.map(|m| OptimizerState {
            model: m,
            cnn: cnn_adam,
        });
        if let Some((group, _)) = groups.iter().next() {
            return Err(Error::Format {
                field: group.clone(),
                detail: "unexpected tensor group".into(),
            });
        }
        Ok(Self {
            model,
            cnn,
            precision,
            optimizer,
            progress: required(section(&entries, "progress")?, "progress")?,
            vocab_hash: single(&entries, "vocab.hash")?,
            rng_state: single(&entries, "rng.state")?,
        })
    }

    /// Fails unless the stored model configuration equals `expected`, naming
    /// the first differing field.
    pub fn ensure_config(&self, expected: &ModelConfig) -> Result<()> {
        let have = config_entries(&self.model.config)?;
        let want = config_entries(expected)?;
        for (k, v) in &want {
            match have.get(k) {
                Some(h) if h == v => {}
                Some(h) => {
                    return Err(Error::Incompatible(format!(
                        "{k}: checkpoint has {h}, expected {v}"
                    )));
                }
                None => return Err(Error::Incompatible(format!("{k}: missing from checkpoint"))),
            }
        }
        Ok(())
    }
}

/// `model.dec.l0.w` → (`model`, `dec.l0.w`); `opt.m.model.x` → (`opt.m.model`, `x`).
fn split_group(full: &str) -> Result<(String, String)> {
    let n = if full.starts_with("opt.") { 3 } else { 1 };
    let mut parts = full.splitn(n + 1, '.');
    let group: Vec<&str> = parts.by_ref().take(n).collect();
    match parts.next() {
        Some(name) if group.len() == n && !name.is_empty() => {
            Ok((group.join("."), name.to_string()))
        }
        _ => Err(Error::Format {
            field: full.to_string(),
            detail: "malformed tensor name".into(),
        }),
    }
}

pub fn checkpoint_save(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes()?)
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

// ── Topic encoder files ───────────────────────────────────────────────

/// A trained topic encoder stored on its own, in the same container format
/// with only `cnn.*` entries and tensors.
pub fn encoder_to_bytes(cnn: &CnnParams, vocab_hash: &str) -> Result<Vec<u8>> {
    let mut entries = BTreeMap::new();
    flatten("cnn", &cnn.config, &mut entries)?;
    flatten("format.precision", &Precision::F64, &mut entries)?;
    flatten("vocab.hash", &vocab_hash, &mut entries)?;
    let tensors: Vec<(String, &Tensor)> = cnn
        .params
        .iter()
        .map(|(n, t)| (format!("cnn.{n}"), t))
        .collect();
    Ok(write_container(&entries, &tensors, Precision::F64))
}

/// Reads an encoder file; returns the encoder and its vocabulary hash.
pub fn encoder_from_bytes(bytes: &[u8]) -> Result<(CnnParams, String)> {
    let (entries, mut groups) = read_container(bytes)?;
    if entries.keys().any(|k| k.starts_with("model.")) {
        return Err(Error::Format {
            field: "model".into(),
            detail: "this is a model checkpoint, not a topic encoder file".into(),
        });
    }
    let config: CnnConfig = required(section(&entries, "cnn")?, "cnn")?;
    let cnn = CnnParams::from_params(config, groups.remove("cnn").unwrap_or_default())?;
    if let Some((group, _)) = groups.iter().next() {
        return Err(Error::Format {
            field: group.clone(),
            detail: "unexpected tensor group".into(),
        });
    }
    Ok((cnn, single(&entries, "vocab.hash")?))
}

pub fn encoder_save(path: &Path, cnn: &CnnParams, vocab_hash: &str) -> Result<()> {
    write_atomic(path, &encoder_to_bytes(cnn, vocab_hash)?)
}

pub fn encoder_load(path: &Path) -> Result<(CnnParams, String)> {
    encoder_from_bytes(&std::fs::read(path)?)
}

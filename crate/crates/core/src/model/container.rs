//! Binary tensor container.
//!
//! `SAMO` magic, u32 version, u32 entry count, then per entry: u16 name
//! length, UTF-8 name, u8 dtype (0 = f64, 1 = f32, 2 = raw bytes), u8 rank,
//! u32 dims, little-endian payload. An 8-byte SHA-256 prefix of everything
//! before it closes the file.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::{Expert, Layer, Linear, LoraAdapter, Model, Routing, PROJECTIONS};
use super::vocab::VocabSlice;
use super::ModelError;
use crate::num::{Float, Tensor, FLOAT_DTYPE};

pub const MAGIC: &[u8; 4] = b"SAMO";
pub const VERSION: u32 = 1;
const TRAILER: usize = 8;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ContainerError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated container: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("integrity check failed")]
    Integrity,
    #[error("malformed container: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    F32(Vec<f32>),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub payload: Payload,
}

impl Entry {
    pub fn tensor(name: impl Into<String>, t: &Tensor) -> Self {
        let dims = t.shape().iter().map(|&d| d as u32).collect();
        let payload = if FLOAT_DTYPE == 0 {
            Payload::F64(t.data().iter().map(|&v| v as f64).collect())
        } else {
            Payload::F32(t.data().iter().map(|&v| v as f32).collect())
        };
        Self {
            name: name.into(),
            dims,
            payload,
        }
    }

    pub fn bytes(name: impl Into<String>, b: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            dims: vec![b.len() as u32],
            payload: Payload::Bytes(b),
        }
    }

    pub fn text(name: impl Into<String>, s: &str) -> Self {
        Self::bytes(name, s.as_bytes().to_vec())
    }

    pub fn to_tensor(&self) -> Result<Tensor, ContainerError> {
        let data: Vec<Float> = match &self.payload {
            Payload::F64(v) => v.iter().map(|&x| x as Float).collect(),
            Payload::F32(v) => v.iter().map(|&x| x as Float).collect(),
            Payload::Bytes(_) => return Err(ContainerError::Malformed(format!("{} is not a tensor", self.name))),
        };
        let shape = self.dims.iter().map(|&d| d as usize).collect();
        Tensor::new(shape, data).map_err(|e| ContainerError::Malformed(format!("{}: {e}", self.name)))
    }

    pub fn as_bytes(&self) -> Result<&[u8], ContainerError> {
        match &self.payload {
            Payload::Bytes(b) => Ok(b),
            _ => Err(ContainerError::Malformed(format!("{} is not a byte entry", self.name))),
        }
    }

    pub fn as_text(&self) -> Result<&str, ContainerError> {
        std::str::from_utf8(self.as_bytes()?).map_err(|_| ContainerError::Malformed(format!("{} is not UTF-8", self.name)))
    }
}

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        let code = match e.payload {
            Payload::F64(_) => 0u8,
            Payload::F32(_) => 1,
            Payload::Bytes(_) => 2,
        };
        out.push(code);
        out.push(e.dims.len() as u8);
        for d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &e.payload {
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Bytes(b) => out.extend_from_slice(b),
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest[..TRAILER]);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        if self.buf.len() - self.pos < n {
            return Err(ContainerError::Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Entry>, ContainerError> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let mut r = Reader { buf, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(ContainerError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| ContainerError::Malformed(format!("entry name at offset {} is not UTF-8", r.pos - nlen)))?
            .to_string();
        let code = r.u8()?;
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()?);
        }
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
        let n = n.ok_or_else(|| ContainerError::Malformed(format!("{name}: dimension overflow")))?;
        let payload = match code {
            0 => {
                let b = r.take(n.checked_mul(8).ok_or(ContainerError::Malformed("size overflow".into()))?)?;
                Payload::F64(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            1 => {
                let b = r.take(n.checked_mul(4).ok_or(ContainerError::Malformed("size overflow".into()))?)?;
                Payload::F32(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            2 => Payload::Bytes(r.take(n)?.to_vec()),
            c => return Err(ContainerError::Malformed(format!("{name}: unknown dtype code {c}"))),
        };
        entries.push(Entry { name, dims, payload });
    }
    let body_end = r.pos;
    let trailer = r.take(TRAILER)?;
    if r.pos != buf.len() {
        return Err(ContainerError::Malformed(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    if Sha256::digest(&buf[..body_end])[..TRAILER] != *trailer {
        return Err(ContainerError::Integrity);
    }
    Ok(entries)
}

/// Entries describing a model: config, routing, per-expert metadata, tensors.
pub fn model_entries(m: &Model) -> Vec<Entry> {
    let mut out = vec![
        Entry::text("model.config", &m.config.to_text()),
        Entry::text(
            "model.routing",
            match m.routing {
                Routing::Modality => "modality",
                Routing::Dense => "dense",
            },
        ),
    ];
    let names: Vec<&str> = m.experts.iter().map(|e| e.name.as_str()).collect();
    out.push(Entry::text("model.experts", &names.join(",")));
    for e in &m.experts {
        let alpha = e
            .layers
            .iter()
            .flat_map(|l| l.projections())
            .find_map(|p| p.lora.as_ref().map(|l| l.alpha));
        let mut meta = format!(
            "input={}\noutput={}\nrope_theta={:?}\n",
            e.input.to_text(),
            e.output.to_text(),
            e.rope_theta
        );
        if let Some(a) = alpha {
            meta.push_str(&format!("lora_alpha={a:?}\n"));
        }
        out.push(Entry::text(format!("{}.meta", e.name), &meta));
    }
    m.walk(&mut |info, t| out.push(Entry::tensor(info.name, t)));
    out
}

/// Rebuild a model from [`model_entries`]; other entries are ignored.
pub fn model_from_entries(entries: &[Entry]) -> Result<Model, ModelError> {
    let by_name: BTreeMap<&str, &Entry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let get = |n: &str| -> Result<&Entry, ModelError> {
        by_name
            .get(n)
            .copied()
            .ok_or_else(|| ModelError::Structural(format!("missing entry {n}")))
    };
    let tensor = |n: &str| -> Result<Tensor, ModelError> { Ok(get(n)?.to_tensor()?) };
    let config = ModelConfig::from_text(get("model.config")?.as_text()?)?;
    let routing = match get("model.routing")?.as_text()? {
        "modality" => Routing::Modality,
        "dense" => Routing::Dense,
        other => return Err(ModelError::Structural(format!("unknown routing {other:?}"))),
    };
    let mut experts = Vec::new();
    for en in get("model.experts")?.as_text()?.split(',') {
        let meta = super::config::parse_kv(get(&format!("{en}.meta"))?.as_text()?)?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| ModelError::Structural(format!("{en}.meta lacks {k}")))
        };
        let slice = |k: &str| -> Result<VocabSlice, ModelError> {
            VocabSlice::from_text(&field(k)?).ok_or_else(|| ModelError::Structural(format!("{en}.meta: bad {k}")))
        };
        let rope_theta: Float = field("rope_theta")?
            .parse()
            .map_err(|_| ModelError::Structural(format!("{en}.meta: bad rope_theta")))?;
        let alpha: Option<Float> = meta.get("lora_alpha").and_then(|a| a.parse().ok());
        let mut layers = Vec::new();
        for li in 0..config.n_layers {
            let lin = |pn: &str| -> Result<Linear, ModelError> {
                let w = tensor(&format!("{en}.layer{li}.{pn}"))?;
                let an = format!("lora.{en}.layer{li}.{pn}.A");
                let lora = if by_name.contains_key(an.as_str()) {
                    let alpha = alpha.ok_or_else(|| ModelError::Structural(format!("{en}: adapters without lora_alpha")))?;
                    Some(LoraAdapter {
                        a: tensor(&an)?,
                        b: tensor(&format!("lora.{en}.layer{li}.{pn}.B"))?,
                        alpha,
                    })
                } else {
                    None
                };
                Ok(Linear { w, lora })
            };
            let [wq, wk, wv, wo, w_gate, w_up, w_down] = PROJECTIONS.map(lin);
            layers.push(Layer {
                attn_norm: tensor(&format!("{en}.layer{li}.attn_norm"))?,
                wq: wq?,
                wk: wk?,
                wv: wv?,
                wo: wo?,
                ffn_norm: tensor(&format!("{en}.layer{li}.ffn_norm"))?,
                w_gate: w_gate?,
                w_up: w_up?,
                w_down: w_down?,
            });
        }
        experts.push(Expert {
            name: en.to_string(),
            input: slice("input")?,
            output: slice("output")?,
            rope_theta,
            embed: tensor(&format!("{en}.embed"))?,
            layers,
            final_norm: tensor(&format!("{en}.final_norm"))?,
            unembed: tensor(&format!("{en}.unembed"))?,
        });
    }
    let m = Model {
        config,
        experts,
        routing,
    };
    validate_shapes(&m)?;
    Ok(m)
}

fn validate_shapes(m: &Model) -> Result<(), ModelError> {
    let c = &m.config;
    let d = c.d_model;
    for e in &m.experts {
        let bad = |what: &str| Err(ModelError::Structural(format!("{}: {what} has the wrong shape", e.name)));
        if e.embed.shape() != [e.input.len(), d] {
            return bad("embed");
        }
        if e.unembed.shape() != [d, e.output.len()] || e.final_norm.len() != d {
            return bad("output head");
        }
        for l in &e.layers {
            let dims = [
                (d, c.q_dim()),
                (d, c.kv_dim()),
                (d, c.kv_dim()),
                (c.q_dim(), d),
                (d, c.d_ff),
                (d, c.d_ff),
                (c.d_ff, d),
            ];
            for (p, (i, o)) in l.projections().iter().zip(dims) {
                if p.w.shape() != [i, o] {
                    return bad("projection");
                }
                if let Some(a) = &p.lora {
                    if a.a.rows() != i || a.b.cols() != o || a.b.rows() != a.a.cols() || a.rank() == 0 {
                        return bad("adapter");
                    }
                }
            }
            if l.attn_norm.len() != d || l.ffn_norm.len() != d {
                return bad("norm gain");
            }
        }
    }
    Ok(())
}

pub fn save_model(m: &Model) -> Vec<u8> {
    encode(&model_entries(m))
}

pub fn load_model(bytes: &[u8]) -> Result<Model, ModelError> {
    model_from_entries(&decode(bytes)?)
}

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::model::container::{decode, encode, model_entries, model_from_entries, Entry};
use crate::model::Model;

use super::adamw::Moments;
use super::config::TrainConfig;
use super::trainer::trainable;
use super::{Result, TrainError};

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub moments: Moments,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

fn trained_names(c: &TrainConfig, m: &Model) -> Vec<String> {
    m.param_infos().into_iter().filter(|i| trainable(c.stage, i)).map(|i| i.name).collect()
}

fn rng_bytes(r: &ChaCha8Rng) -> Vec<u8> {
    let mut out = r.get_seed().to_vec();
    out.extend_from_slice(&r.get_stream().to_le_bytes());
    out.extend_from_slice(&r.get_word_pos().to_le_bytes());
    out
}

fn rng_from(b: &[u8]) -> Result<ChaCha8Rng> {
    if b.len() != 32 + 8 + 16 {
        return Err(TrainError::Checkpoint(format!("rng state has {} bytes", b.len())));
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&b[..32]);
    let mut r = ChaCha8Rng::from_seed(seed);
    r.set_stream(u64::from_le_bytes(b[32..40].try_into().unwrap()));
    r.set_word_pos(u128::from_le_bytes(b[40..56].try_into().unwrap()));
    Ok(r)
}

pub fn save_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut entries = vec![
        Entry::text("train.config", &ck.config.to_text()),
        Entry::bytes("train.step", ck.step.to_le_bytes().to_vec()),
        Entry::bytes("train.rng", rng_bytes(&ck.rng)),
    ];
    entries.extend(model_entries(&ck.model));
    for (i, name) in trained_names(&ck.config, &ck.model).iter().enumerate() {
        entries.push(Entry::tensor(format!("adam.m.{name}"), &ck.moments.m[i]));
        entries.push(Entry::tensor(format!("adam.v.{name}"), &ck.moments.v[i]));
    }
    encode(&entries)
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let entries = decode(bytes)?;
    let by: BTreeMap<&str, &Entry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let get = |n: &str| by.get(n).copied().ok_or_else(|| TrainError::Checkpoint(format!("missing entry {n}")));
    let config = TrainConfig::from_text(get("train.config")?.as_text()?)?;
    let step_bytes = get("train.step")?.as_bytes()?;
    let step = u64::from_le_bytes(step_bytes.try_into().map_err(|_| TrainError::Checkpoint("bad step entry".into()))?);
    let rng = rng_from(get("train.rng")?.as_bytes()?)?;
    let model = model_from_entries(&entries)?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for name in trained_names(&config, &model) {
        m.push(get(&format!("adam.m.{name}"))?.to_tensor()?);
        v.push(get(&format!("adam.v.{name}"))?.to_tensor()?);
    }
    Ok(Checkpoint { config, model, moments: Moments { m, v }, step, rng })
}

/// Model weights from either a checkpoint or a bare model container.
pub fn load_model_any(bytes: &[u8]) -> Result<Model> {
    Ok(model_from_entries(&decode(bytes)?)?)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io { path: dir.display().to_string(), source })?;
    }
    std::fs::write(path, bytes).map_err(|source| TrainError::Io { path: path.display().to_string(), source })
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| TrainError::Io { path: path.display().to_string(), source })
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &save_checkpoint(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_checkpoint(&read_file(path)?)
    }
}


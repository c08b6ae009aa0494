//! Teacher-forced token datasets built from scripted rollouts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::script::{derive_seed, Sim, TaskKind};
use super::{Result, SimError};
use crate::codec::{encode_block, prompt_prefix, Mode};
use crate::model::{ModalityTag, SeqToken};

const TASK_SALT: u64 = 0xda7a;
const SEED_SALT: u64 = 0x5eed;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskMix {
    pub weights: Vec<(TaskKind, f64)>,
}

impl TaskMix {
    pub fn new(weights: Vec<(TaskKind, f64)>) -> Result<Self> {
        let mix = Self { weights };
        mix.validate()?;
        Ok(mix)
    }

    pub fn uniform(tasks: &[TaskKind]) -> Self {
        Self { weights: tasks.iter().map(|&t| (t, 1.0)).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((t, w)) = self.weights.iter().find(|(_, w)| !w.is_finite() || *w < 0.0) {
            return Err(SimError::Mix(format!("weight {w} for {t}")));
        }
        if !self.weights.iter().any(|(_, w)| *w > 0.0) {
            return Err(SimError::ZeroMix);
        }
        Ok(())
    }

    pub fn tasks(&self) -> Vec<TaskKind> {
        self.weights.iter().filter(|(_, w)| *w > 0.0).map(|(t, _)| *t).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataToken {
    pub id: usize,
    pub tag: ModalityTag,
    pub tick: usize,
    /// Loss target.
    pub mask: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetEpisode {
    pub index: usize,
    pub task: TaskKind,
    pub seed: u64,
    pub mode: Mode,
    pub tokens: Vec<DataToken>,
}

impl DatasetEpisode {
    pub fn seq_tokens(&self) -> Vec<SeqToken> {
        self.tokens.iter().map(|t| SeqToken { id: t.id, tag: t.tag, tick: t.tick }).collect()
    }

    pub fn mask_bits(&self) -> usize {
        self.tokens.iter().filter(|t| t.mask).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub mix: TaskMix,
    pub episodes: Vec<DatasetEpisode>,
}

/// Encode a scripted rollout as a token stream with payload loss masks.
pub fn encode_episode(sim: &Sim, task: TaskKind, seed: u64, index: usize) -> Result<DatasetEpisode> {
    let ep = sim.gold(task, seed)?;
    let layout = sim.words.layout();
    let mut tokens: Vec<DataToken> = prompt_prefix(layout, &ep.script.prompt)?
        .into_iter()
        .map(|(id, tag)| DataToken { id, tag, tick: 0, mask: false })
        .collect();
    for block in ep.blocks() {
        for (id, tag) in encode_block(&block, ep.script.mode(), &sim.geo, layout)? {
            let mask = matches!(tag, ModalityTag::TextOut | ModalityTag::ActionOut);
            tokens.push(DataToken { id, tag, tick: block.tick, mask });
        }
    }
    Ok(DatasetEpisode { index, task, seed, mode: ep.script.mode(), tokens })
}

/// Seed of held-out episode `i` of `task`; disjoint stream from training data.
pub fn eval_seed(base: u64, task: TaskKind, i: usize) -> u64 {
    derive_seed(base ^ 0xe7a1_0000_0000_0000, task as u64 + 1, i as u64)
}

pub fn gen_dataset(sim: &Sim, mix: &TaskMix, n: usize, seed: u64) -> Result<Dataset> {
    mix.validate()?;
    let dist = WeightedIndex::new(mix.weights.iter().map(|(_, w)| *w)).map_err(|e| SimError::Mix(e.to_string()))?;
    let mut episodes = Vec::with_capacity(n);
    for index in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TASK_SALT, index as u64));
        let task = mix.weights[dist.sample(&mut rng)].0;
        let ep_seed = derive_seed(seed, SEED_SALT, index as u64);
        episodes.push(encode_episode(sim, task, ep_seed, index)?);
    }
    Ok(Dataset { seed, mix: mix.clone(), episodes })
}

impl Dataset {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.episodes {
            let _ = writeln!(out, "E {} {} {} {}", e.index, e.task, e.seed, e.mode.name());
            let toks: Vec<String> = e.tokens.iter().map(|t| format!("{},{},{},{}", t.id, t.tag.code(), t.tick, t.mask as u8)).collect();
            let _ = writeln!(out, "{}", toks.join(" "));
        }
        out
    }

    pub fn parse_episodes(text: &str) -> Result<Vec<DatasetEpisode>> {
        let bad = |detail: String| SimError::Parse { what: "dataset", detail };
        let mut out = Vec::new();
        let mut lines = text.lines();
        while let Some(head) = lines.next() {
            if head.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = head.split_whitespace().collect();
            if f.len() != 5 || f[0] != "E" {
                return Err(bad(format!("bad episode header `{head}`")));
            }
            let index = f[1].parse().map_err(|_| bad("bad index".into()))?;
            let task: TaskKind = f[2].parse()?;
            let seed = f[3].parse().map_err(|_| bad("bad seed".into()))?;
            let mode = match f[4] {
                "default" => Mode::Default,
                "speech-only" => Mode::SpeechOnly,
                m => return Err(bad(format!("unknown mode `{m}`"))),
            };
            let body = lines.next().ok_or_else(|| bad("missing token line".into()))?;
            let mut tokens = Vec::new();
            for t in body.split_whitespace() {
                let p: Vec<&str> = t.split(',').collect();
                let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad token `{t}`")));
                if p.len() != 4 {
                    return Err(bad(format!("bad token `{t}`")));
                }
                let tag = u8::try_from(num(p[1])?).ok().and_then(ModalityTag::from_code).ok_or_else(|| bad(format!("bad tag in `{t}`")))?;
                tokens.push(DataToken { id: num(p[0])?, tag, tick: num(p[2])?, mask: num(p[3])? == 1 });
            }
            out.push(DatasetEpisode { index, task, seed, mode, tokens });
        }
        Ok(out)
    }

    pub fn counts(&self) -> BTreeMap<TaskKind, usize> {
        let mut c = BTreeMap::new();
        for e in &self.episodes {
            *c.entry(e.task).or_insert(0) += 1;
        }
        c
    }

    pub fn manifest(&self) -> String {
        let body = self.to_text();
        let digest: String = Sha256::digest(body.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
        let mut out = String::from("format=samoe-dataset-1\n");
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "episodes={}", self.episodes.len());
        for (t, w) in &self.mix.weights {
            let _ = writeln!(out, "mix.{t}={w}");
        }
        for (t, n) in self.counts() {
            let _ = writeln!(out, "count.{t}={n}");
        }
        let _ = writeln!(out, "tokens={}", self.episodes.iter().map(|e| e.tokens.len()).sum::<usize>());
        let _ = writeln!(out, "mask_bits={}", self.episodes.iter().map(DatasetEpisode::mask_bits).sum::<usize>());
        let _ = writeln!(out, "sha256={digest}");
        out
    }
}

use std::ops::Deref;

use crate::codec::{prompt_prefix, truncate_history, HistoryPolicy, Mode, Tagged};
use crate::model::stream::feed;
use crate::model::{sample_segment, Modality, ModalityTag, Model, UnifiedKVCache};
use crate::num::Float;
use crate::sim::{derive_seed, Agent, EpisodeScript, EpisodeTrace, Observation};

/// Streams observations through a model and samples its replies.
pub struct ModelAgent<M> {
    pub model: M,
    pub policy: HistoryPolicy,
    /// `<= 0` is greedy.
    pub temperature: Float,
    pub seed: u64,
    /// Force-feed `<silence>` instead of sampling text.
    pub silent: bool,
    cache: UnifiedKVCache,
    mode: Mode,
}

impl<M: Deref<Target = Model>> ModelAgent<M> {
    pub fn new(model: M) -> Self {
        let cache = UnifiedKVCache::new(&model.config);
        Self {
            model,
            policy: HistoryPolicy::default(),
            temperature: 0.0,
            seed: 0,
            silent: false,
            cache,
            mode: Mode::Default,
        }
    }

    pub fn cache(&self) -> &UnifiedKVCache {
        &self.cache
    }

    /// Reset the cache and feed the prompt prefix.
    pub fn begin(&mut self, prompt: &[usize], mode: Mode) -> Result<(), String> {
        self.cache = UnifiedKVCache::new(&self.model.config);
        self.mode = mode;
        let prefix = prompt_prefix(&self.model.config.layout(), prompt).map_err(|e| e.to_string())?;
        feed(&self.model, &mut self.cache, &prefix, 0).map_err(|e| e.to_string())?;
        Ok(())
    }

    /// Consume one block's inputs and produce its text and action payloads.
    /// `salt` decorrelates sampling across episodes.
    pub fn step(&mut self, tick: usize, speech: &[usize], images: &[Vec<usize>], salt: u64) -> Result<(Vec<usize>, Vec<usize>), String> {
        let model: &Model = &self.model;
        let geo = model.config.block;
        let layout = model.config.layout();
        truncate_history(&mut self.cache, tick, self.policy);
        let mut toks = Vec::new();
        segment(&mut toks, model, Modality::Speech, speech);
        if images.is_empty() {
            segment(&mut toks, model, Modality::Image, &[]);
        }
        for img in images {
            segment(&mut toks, model, Modality::Image, img);
        }
        feed(model, &mut self.cache, &toks, tick).map_err(|e| e.to_string())?;
        let seed = derive_seed(self.seed, salt, tick as u64);
        let text = if self.silent {
            let silence = vec![layout.silence()];
            let mut t = Vec::new();
            segment(&mut t, model, Modality::Text, &silence);
            feed(model, &mut self.cache, &t, tick).map_err(|e| e.to_string())?;
            silence
        } else {
            sample_segment(model, &mut self.cache, ModalityTag::TextOut, tick, geo.text, self.temperature, seed)
                .map_err(|e| e.to_string())?
        };
        let action = if self.mode == Mode::SpeechOnly {
            let noop = vec![layout.noop(); geo.action];
            let mut t = Vec::new();
            segment(&mut t, model, Modality::Action, &noop);
            feed(model, &mut self.cache, &t, tick).map_err(|e| e.to_string())?;
            noop
        } else {
            sample_segment(model, &mut self.cache, ModalityTag::ActionOut, tick, geo.action, self.temperature, seed ^ 1)
                .map_err(|e| e.to_string())?
        };
        Ok((text, action))
    }
}

fn segment(out: &mut Vec<Tagged>, model: &Model, m: Modality, payload: &[usize]) {
    let l = model.config.layout();
    out.push((l.open(m), ModalityTag::Boundary(m)));
    out.extend(payload.iter().map(|&id| (id, m.payload_tag())));
    out.push((l.close(m), ModalityTag::Boundary(m)));
}

impl<M: Deref<Target = Model>> Agent for ModelAgent<M> {
    fn start(&mut self, script: &EpisodeScript) -> Result<(), String> {
        self.begin(&script.prompt, script.mode())
    }

    fn respond(&mut self, obs: &Observation<'_>) -> Result<(Vec<usize>, Vec<usize>), String> {
        self.step(obs.tick, obs.speech, obs.images, obs.script.seed)
    }
}

/// Re-emits the outputs recorded in a trace.
pub struct ReplayAgent<'a> {
    pub trace: &'a EpisodeTrace,
}

impl Agent for ReplayAgent<'_> {
    fn respond(&mut self, obs: &Observation<'_>) -> Result<(Vec<usize>, Vec<usize>), String> {
        let r = self
            .trace
            .records
            .get(obs.tick)
            .ok_or_else(|| format!("trace has no tick {}", obs.tick))?;
        Ok((r.text.clone(), r.action.clone()))
    }
}

use std::thread;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::sequence::sequence_loss;
use crate::model::vocab::ModalityTag;
use crate::model::{Expert, Model, ParamInfo, ParamKind};
use crate::num::{Float, Tensor};
use crate::sim::dataset::encode_episode;
use crate::sim::{derive_seed, DatasetEpisode, Sim};

use super::adamw::{adamw_update, lr_at, AdamW, Moments};
use super::checkpoint::Checkpoint;
use super::config::{DenseInit, Stage, TrainConfig};
use super::{Result, TrainError};

const INIT_SALT: u64 = 0x1417;

/// Which parameters a stage updates.
pub fn trainable(stage: Stage, info: &ParamInfo) -> bool {
    match stage {
        Stage::ExpertSpeech => info.expert == 0 && info.kind == ParamKind::Base,
        Stage::ExpertAction => info.expert == 1 && info.kind == ParamKind::Base,
        Stage::JointSamoe => info.kind != ParamKind::Base,
        Stage::DenseBaseline => true,
    }
}

fn stage_targets(stage: Stage, tag: ModalityTag) -> bool {
    match stage {
        Stage::ExpertSpeech => tag == ModalityTag::TextOut,
        Stage::ExpertAction => tag == ModalityTag::ActionOut,
        _ => matches!(tag, ModalityTag::TextOut | ModalityTag::ActionOut),
    }
}

/// Next-token targets: masked payloads of the kept tags plus the closing boundary after each run.
pub fn targets_for(ep: &DatasetEpisode, keep: &dyn Fn(ModalityTag) -> bool) -> Vec<Option<usize>> {
    let t = &ep.tokens;
    let mut out = vec![None; t.len()];
    for i in 0..t.len().saturating_sub(1) {
        let next = t[i + 1];
        let closes = matches!(next.tag, ModalityTag::Boundary(_)) && t[i].mask && keep(t[i].tag);
        if (next.mask && keep(next.tag)) || closes {
            out[i] = Some(next.id);
        }
    }
    out
}

fn copy_into_dense(dense: &mut Expert, src: &Expert) {
    let d = dense.embed.cols();
    for (i, id) in dense.input.ids().enumerate().collect::<Vec<_>>() {
        if let Some(j) = src.input.local(id) {
            dense.embed.row_mut(i).copy_from_slice(src.embed.row(j));
        }
    }
    let n_out = dense.output.len();
    let src_out = src.output.len();
    for (i, id) in dense.output.ids().enumerate().collect::<Vec<_>>() {
        if let Some(j) = src.output.local(id) {
            for r in 0..d {
                dense.unembed.data_mut()[r * n_out + i] = src.unembed.data()[r * src_out + j];
            }
        }
    }
    dense.layers = src.layers.clone();
    for l in &mut dense.layers {
        for p in l.projections_mut() {
            p.lora = None;
        }
    }
    dense.final_norm = src.final_norm.clone();
    dense.rope_theta = src.rope_theta;
}

/// Starting weights for a stage. `speech` and `action` are stage-1 results.
pub fn initial_model(c: &TrainConfig, speech: Option<&Model>, action: Option<&Model>) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, INIT_SALT, 0));
    let need = |m: Option<&Model>, what: &str| -> Result<Model> {
        let m = m.ok_or_else(|| TrainError::Config(format!("stage {} needs the {what} checkpoint", c.stage.name())))?;
        if m.config != c.model || m.experts.len() != 2 {
            return Err(crate::model::ModelError::Structural(format!("{what} checkpoint geometry does not match the config")).into());
        }
        Ok(m.strip_lora())
    };
    match c.stage {
        Stage::ExpertSpeech => Ok(Model::new_samoe(c.model.clone(), &mut rng)?),
        Stage::ExpertAction => {
            let mut m = Model::new_samoe(c.model.clone(), &mut rng)?;
            if speech.is_some() {
                m.experts[0] = need(speech, "speech")?.experts[0].clone();
            }
            Ok(m)
        }
        Stage::JointSamoe => {
            let s = need(speech, "speech")?;
            let a = need(action, "action")?;
            s.check_same_geometry(&a)?;
            let mut m = s.clone();
            m.experts[1] = a.experts[1].clone();
            m.attach_lora(c.lora_rank, c.lora_alpha, &mut rng)?;
            Ok(m)
        }
        Stage::DenseBaseline => {
            let mut m = Model::new_dense(c.model.clone(), &mut rng)?;
            match c.dense_init {
                DenseInit::Scratch => {}
                DenseInit::FromSpeech => copy_into_dense(&mut m.experts[0], &need(speech, "speech")?.experts[0]),
                DenseInit::FromAction => copy_into_dense(&mut m.experts[0], &need(action, "action")?.experts[1]),
            }
            Ok(m)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: Float,
    pub lr: Float,
    pub grad_norm: Float,
    pub targets: usize,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub step: u64,
    pub moments: Moments,
    /// Worker threads for per-episode gradients; results do not depend on it.
    pub jobs: usize,
    sim: Sim,
    rng: ChaCha8Rng,
    trainable: Vec<bool>,
}

struct EpisodeGrad {
    loss_sum: Float,
    n: usize,
    grads: Vec<Tensor>,
}

impl Trainer {
    pub fn new(config: TrainConfig, speech: Option<&Model>, action: Option<&Model>) -> Result<Self> {
        config.validate()?;
        let model = initial_model(&config, speech, action)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::assemble(config, model, 0, None, rng)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        Self::assemble(ck.config, ck.model, ck.step, Some(ck.moments), ck.rng)
    }

    fn assemble(config: TrainConfig, model: Model, step: u64, moments: Option<Moments>, rng: ChaCha8Rng) -> Result<Self> {
        let sim = Sim::for_model(&config.model)?;
        let trainable: Vec<bool> = model.param_infos().iter().map(|i| trainable(config.stage, i)).collect();
        let params: Vec<&Tensor> = model.tensors().into_iter().zip(&trainable).filter(|(_, &t)| t).map(|(p, _)| p).collect();
        let moments = match moments {
            Some(m) => {
                if m.m.len() != params.len() || m.m.iter().zip(&params).any(|(a, p)| a.shape() != p.shape()) {
                    return Err(TrainError::Checkpoint("optimizer moments do not match the trainable parameters".into()));
                }
                m
            }
            None => Moments::zeros_like(&params),
        };
        Ok(Self { config, model, step, moments, jobs: 1, sim, rng, trainable })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            moments: self.moments.clone(),
            step: self.step,
            rng: self.rng.clone(),
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.model.param_infos().into_iter().zip(&self.trainable).filter(|(_, &t)| t).map(|(i, _)| i.name).collect()
    }

    /// Draw the next batch of scripted episodes.
    pub fn next_batch(&mut self) -> Result<Vec<DatasetEpisode>> {
        let mix = &self.config.task_mix;
        let dist = WeightedIndex::new(mix.weights.iter().map(|(_, w)| *w)).map_err(|e| TrainError::Config(e.to_string()))?;
        let mut out = Vec::with_capacity(self.config.batch_size);
        for i in 0..self.config.batch_size {
            let task = mix.weights[dist.sample(&mut self.rng)].0;
            let seed = self.rng.next_u64();
            out.push(encode_episode(&self.sim, task, seed, i)?);
        }
        Ok(out)
    }

    fn episode_grad(&self, ep: &DatasetEpisode) -> Result<EpisodeGrad> {
        let stage = self.config.stage;
        let targets = targets_for(ep, &|t| stage_targets(stage, t));
        let tokens = ep.seq_tokens();
        let sl = sequence_loss(&self.model, &tokens, &targets, self.config.horizon, &|i| trainable(stage, i))?;
        let n = sl.n_targets;
        let mut grads = sl.graph.backward(sl.loss).map_err(crate::model::ModelError::from)?;
        let loss = sl.graph.value(sl.loss).item();
        let scale = n as Float;
        let mut out = Vec::new();
        for (j, &v) in sl.params.vars.iter().enumerate() {
            if !self.trainable[j] {
                continue;
            }
            let g = match grads.take(v) {
                Some(g) => g.scaled(scale),
                None => Tensor::zeros(sl.graph.value(v).shape()),
            };
            out.push(g);
        }
        Ok(EpisodeGrad { loss_sum: loss * scale, n, grads: out })
    }

    fn batch_grads(&self, batch: &[DatasetEpisode]) -> Result<Vec<EpisodeGrad>> {
        let jobs = self.jobs.max(1).min(batch.len().max(1));
        if jobs == 1 {
            return batch.iter().map(|e| self.episode_grad(e)).collect();
        }
        let chunk = batch.len().div_ceil(jobs);
        let parts: Vec<Result<Vec<EpisodeGrad>>> = thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(|e| self.episode_grad(e)).collect::<Result<Vec<_>>>()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(batch.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// One optimizer step on a fresh batch.
    pub fn train_step(&mut self) -> Result<StepStats> {
        let batch = self.next_batch()?;
        let per = self.batch_grads(&batch)?;
        let total: usize = per.iter().map(|g| g.n).sum();
        let denom = total.max(1) as Float;
        let mut grads: Vec<Tensor> = self.moments.m.iter().map(|m| Tensor::zeros(m.shape())).collect();
        let mut loss = 0.0;
        for eg in &per {
            loss += eg.loss_sum;
            for (acc, g) in grads.iter_mut().zip(&eg.grads) {
                acc.add_assign(g);
            }
        }
        loss /= denom;
        let inv = 1.0 / denom;
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|x| *x *= inv);
        }
        let grad_norm = grads.iter().map(Tensor::sum_squares).sum::<Float>().sqrt();
        self.step += 1;
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(TrainError::Diverged(self.step));
        }
        if self.config.grad_clip > 0.0 && grad_norm > self.config.grad_clip {
            let c = self.config.grad_clip / grad_norm;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= c);
            }
        }
        let lr = lr_at(&self.config, self.step);
        let hp = AdamW::from_config(&self.config);
        let step = self.step;
        let Self { model, moments, trainable, .. } = self;
        let (mut idx, mut k) = (0, 0);
        model.walk_mut(&mut |_, t| {
            if trainable[idx] {
                let decay = t.shape().len() >= 2;
                adamw_update(t, &grads[k], &mut moments.m[k], &mut moments.v[k], decay, step, lr, &hp);
                k += 1;
            }
            idx += 1;
        });
        Ok(StepStats { step: self.step, loss, lr, grad_norm, targets: total })
    }

    /// Mean loss on a fixed batch without updating anything.
    pub fn eval_loss(&self, batch: &[DatasetEpisode]) -> Result<Float> {
        let per = self.batch_grads(batch)?;
        let n: usize = per.iter().map(|g| g.n).sum();
        Ok(per.iter().map(|g| g.loss_sum).sum::<Float>() / n.max(1) as Float)
    }

    /// Train until `config.steps`, reporting each step.
    pub fn run(&mut self, on_step: &mut dyn FnMut(&StepStats, &Trainer) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let s = self.train_step()?;
            on_step(&s, self)?;
        }
        Ok(())
    }
}

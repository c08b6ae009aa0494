use std::fmt::Write as _;

use crate::model::config::{apply_key, parse_kv};
use crate::model::ModelConfig;
use crate::num::Float;
use crate::sim::{TaskKind, TaskMix};

use super::{Result, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    ExpertSpeech,
    ExpertAction,
    JointSamoe,
    DenseBaseline,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::ExpertSpeech, Stage::ExpertAction, Stage::JointSamoe, Stage::DenseBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Stage::ExpertSpeech => "EXPERT_SPEECH",
            Stage::ExpertAction => "EXPERT_ACTION",
            Stage::JointSamoe => "JOINT_SAMOE",
            Stage::DenseBaseline => "DENSE_BASELINE",
        }
    }

    /// Tasks a stage may draw from.
    pub fn allowed_tasks(self) -> &'static [TaskKind] {
        match self {
            Stage::ExpertSpeech => &[TaskKind::Echo, TaskKind::Qa],
            Stage::ExpertAction => &[TaskKind::Manip],
            _ => &TaskKind::ALL,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DenseInit {
    FromSpeech,
    FromAction,
    Scratch,
}

impl DenseInit {
    pub fn name(self) -> &'static str {
        match self {
            DenseInit::FromSpeech => "FROM_SPEECH",
            DenseInit::FromAction => "FROM_ACTION",
            DenseInit::Scratch => "SCRATCH",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: Float,
    /// Fraction of `steps` spent on linear warmup.
    pub warmup: Float,
    pub schedule: Schedule,
    /// Final learning rate as a fraction of `lr` under the cosine schedule.
    pub min_lr: Float,
    pub beta1: Float,
    pub beta2: Float,
    pub eps: Float,
    pub weight_decay: Float,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: Float,
    pub seed: u64,
    pub task_mix: TaskMix,
    pub lora_rank: usize,
    pub lora_alpha: Float,
    pub dense_init: DenseInit,
    /// History horizon in blocks for windowed segments; `None` keeps everything.
    pub horizon: Option<usize>,
    pub init_speech: Option<String>,
    pub init_action: Option<String>,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        let tasks = stage.allowed_tasks();
        let weights = tasks
            .iter()
            .map(|&t| (t, if t == TaskKind::SilenceControl { 0.5 } else { 1.0 }))
            .collect();
        Self {
            stage,
            steps: 1000,
            batch_size: 16,
            lr: 3e-3,
            warmup: 0.01,
            schedule: Schedule::Cosine,
            min_lr: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            task_mix: TaskMix { weights },
            lora_rank: 8,
            lora_alpha: 16.0,
            dense_init: DenseInit::FromSpeech,
            horizon: Some(2),
            init_speech: None,
            init_action: None,
            model: ModelConfig::small(),
        }
    }

    pub fn with_dense(mut self, init: DenseInit) -> Self {
        self.dense_init = init;
        self
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup * self.steps as Float).ceil() as u64
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(0.0..1.0).contains(&self.warmup) {
            return fail(format!("warmup must lie in [0, 1), got {}", self.warmup));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("lr must be positive and betas in [0, 1)".into());
        }
        if self.stage == Stage::JointSamoe && self.lora_rank == 0 {
            return fail("lora.rank must be positive".into());
        }
        self.task_mix.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        let allowed = self.stage.allowed_tasks();
        if let Some(t) = self.task_mix.tasks().into_iter().find(|t| !allowed.contains(t)) {
            return fail(format!("task {t} does not belong to stage {}", self.stage.name()));
        }
        let total: f64 = self.task_mix.weights.iter().map(|(_, w)| w).sum();
        let silence: f64 = self.task_mix.weights.iter().filter(|(t, _)| *t == TaskKind::SilenceControl).map(|(_, w)| w).sum();
        if silence > 0.2 * total + 1e-12 {
            return fail("SILENCE_CONTROL may take at most 20% of the mix".into());
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let stage = match kv.get("stage").map(String::as_str) {
            Some(s) => Stage::ALL
                .into_iter()
                .find(|x| x.name() == s.to_ascii_uppercase())
                .ok_or_else(|| TrainError::Config(format!("unknown stage {s:?}")))?,
            None => return Err(TrainError::Config("missing key `stage`".into())),
        };
        let mut c = Self::new(stage);
        let mut mix: Vec<(TaskKind, f64)> = Vec::new();
        for (k, v) in &kv {
            let f = || -> Result<Float> { v.parse().map_err(|_| TrainError::Config(format!("{k}: expected a number, got {v:?}"))) };
            let u = || -> Result<u64> { v.parse().map_err(|_| TrainError::Config(format!("{k}: expected an unsigned integer, got {v:?}"))) };
            match k.as_str() {
                "stage" => {}
                "steps" => c.steps = u()?,
                "batch_size" => c.batch_size = u()? as usize,
                "lr" => c.lr = f()?,
                "warmup" => c.warmup = f()?,
                "schedule" => {
                    c.schedule = match v.as_str() {
                        "constant" => Schedule::Constant,
                        "cosine" => Schedule::Cosine,
                        _ => return Err(TrainError::Config(format!("schedule must be constant or cosine, got {v:?}"))),
                    }
                }
                "min_lr" => c.min_lr = f()?,
                "beta1" => c.beta1 = f()?,
                "beta2" => c.beta2 = f()?,
                "eps" => c.eps = f()?,
                "weight_decay" => c.weight_decay = f()?,
                "grad_clip" => c.grad_clip = f()?,
                "seed" => c.seed = u()?,
                "lora.rank" => c.lora_rank = u()? as usize,
                "lora.alpha" => c.lora_alpha = f()?,
                "dense.init" => {
                    c.dense_init = [DenseInit::FromSpeech, DenseInit::FromAction, DenseInit::Scratch]
                        .into_iter()
                        .find(|d| d.name() == v.to_ascii_uppercase())
                        .ok_or_else(|| TrainError::Config(format!("unknown dense.init {v:?}")))?
                }
                "horizon" => c.horizon = if v == "none" { None } else { Some(u()? as usize) },
                "init.speech" => c.init_speech = Some(v.clone()),
                "init.action" => c.init_action = Some(v.clone()),
                _ => {
                    if let Some(t) = k.strip_prefix("task_mix.") {
                        let task: TaskKind = t.parse().map_err(|e: crate::sim::SimError| TrainError::Config(e.to_string()))?;
                        mix.push((task, f()? as f64));
                    } else if let Some(m) = k.strip_prefix("model.") {
                        apply_key(&mut c.model, m, v)?;
                    } else {
                        return Err(TrainError::Config(format!("unknown key {k:?}")));
                    }
                }
            }
        }
        if !mix.is_empty() {
            mix.sort_by_key(|(t, _)| *t);
            c.task_mix = TaskMix { weights: mix };
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "stage={}", self.stage.name());
        let _ = writeln!(s, "steps={}", self.steps);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "lr={:?}", self.lr);
        let _ = writeln!(s, "warmup={:?}", self.warmup);
        let _ = writeln!(s, "schedule={}", if self.schedule == Schedule::Cosine { "cosine" } else { "constant" });
        let _ = writeln!(s, "min_lr={:?}", self.min_lr);
        let _ = writeln!(s, "beta1={:?}", self.beta1);
        let _ = writeln!(s, "beta2={:?}", self.beta2);
        let _ = writeln!(s, "eps={:?}", self.eps);
        let _ = writeln!(s, "weight_decay={:?}", self.weight_decay);
        let _ = writeln!(s, "grad_clip={:?}", self.grad_clip);
        let _ = writeln!(s, "seed={}", self.seed);
        for (t, w) in &self.task_mix.weights {
            let _ = writeln!(s, "task_mix.{t}={w:?}");
        }
        let _ = writeln!(s, "lora.rank={}", self.lora_rank);
        let _ = writeln!(s, "lora.alpha={:?}", self.lora_alpha);
        let _ = writeln!(s, "dense.init={}", self.dense_init.name());
        let _ = writeln!(s, "horizon={}", self.horizon.map_or("none".into(), |h| h.to_string()));
        if let Some(p) = &self.init_speech {
            let _ = writeln!(s, "init.speech={p}");
        }
        if let Some(p) = &self.init_action {
            let _ = writeln!(s, "init.action={p}");
        }
        for line in self.model.to_text().lines() {
            let _ = writeln!(s, "model.{line}");
        }
        s
    }
}

use rand::Rng;

use super::config::ModelConfig;
use super::vocab::{route, ExpertId, ModalityTag, VocabSlice};
use super::ModelError;
use crate::num::{Float, Tensor};

/// Low-rank delta `(alpha / rank) · (x A) B` on a `[d_in × d_out]` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: Float,
}

impl LoraAdapter {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rank: usize, alpha: Float, rng: &mut R) -> Result<Self, ModelError> {
        if rank == 0 {
            return Err(ModelError::Config("LoRA rank must be positive".into()));
        }
        Ok(Self {
            a: Tensor::randn(&[d_in, rank], 1.0 / (d_in as Float).sqrt(), rng),
            b: Tensor::zeros(&[rank, d_out]),
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn scale(&self) -> Float {
        self.alpha / self.rank() as Float
    }

    /// Dense `[d_in × d_out]` delta.
    pub fn delta(&self) -> Tensor {
        let ab = crate::num::matmul(&self.a, &self.b).expect("adapter factors agree by construction");
        ab.scaled(self.scale())
    }
}

/// Projection stored as `[d_in × d_out]`; rows multiply from the left.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, std: Float, rng: &mut R) -> Self {
        Self {
            w: Tensor::randn(&[d_in, d_out], std, rng),
            lora: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[1]
    }

    /// `out = x · W (+ adapter)`.
    pub fn apply_row(&self, x: &[Float], out: &mut [Float]) {
        let n = self.d_out();
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(&self.w.data()[i * n..(i + 1) * n]) {
                *o += xi * w;
            }
        }
        if let Some(l) = &self.lora {
            let r = l.rank();
            let mut t = vec![0.0; r];
            for (i, &xi) in x.iter().enumerate() {
                for (tj, &a) in t.iter_mut().zip(l.a.row(i)) {
                    *tj += xi * a;
                }
            }
            let s = l.scale();
            for (j, &tj) in t.iter().enumerate() {
                for (o, &b) in out.iter_mut().zip(l.b.row(j)) {
                    *o += s * tj * b;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub attn_norm: Tensor,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ffn_norm: Tensor,
    pub w_gate: Linear,
    pub w_up: Linear,
    pub w_down: Linear,
}

pub const PROJECTIONS: [&str; 7] = ["wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"];

impl Layer {
    pub fn projections(&self) -> [&Linear; 7] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w_gate, &self.w_up, &self.w_down]
    }

    pub fn projections_mut(&mut self) -> [&mut Linear; 7] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// One expert's full parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub name: String,
    pub input: VocabSlice,
    pub output: VocabSlice,
    pub rope_theta: Float,
    pub embed: Tensor,
    pub layers: Vec<Layer>,
    pub final_norm: Tensor,
    pub unembed: Tensor,
}

impl Expert {
    pub fn init<R: Rng + ?Sized>(
        name: &str,
        input: VocabSlice,
        output: VocabSlice,
        rope_theta: Float,
        c: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let d = c.d_model;
        let s_in = 1.0 / (d as Float).sqrt();
        let s_res = s_in / ((2 * c.n_layers) as Float).sqrt();
        let s_ff = 1.0 / (c.d_ff as Float).sqrt() / ((2 * c.n_layers) as Float).sqrt();
        let embed = Tensor::randn(&[input.len(), d], 1.0, rng);
        let layers = (0..c.n_layers)
            .map(|_| Layer {
                attn_norm: Tensor::filled(&[d], 1.0),
                wq: Linear::init(d, c.q_dim(), s_in, rng),
                wk: Linear::init(d, c.kv_dim(), s_in, rng),
                wv: Linear::init(d, c.kv_dim(), s_in, rng),
                wo: Linear::init(c.q_dim(), d, s_res, rng),
                ffn_norm: Tensor::filled(&[d], 1.0),
                w_gate: Linear::init(d, c.d_ff, s_in, rng),
                w_up: Linear::init(d, c.d_ff, s_in, rng),
                w_down: Linear::init(c.d_ff, d, s_ff, rng),
            })
            .collect();
        let unembed = Tensor::randn(&[d, output.len()], s_in, rng);
        Self {
            name: name.to_string(),
            input,
            output,
            rope_theta,
            embed,
            layers,
            final_norm: Tensor::filled(&[d], 1.0),
            unembed,
        }
    }

    pub fn embed_row(&self, token: usize) -> Result<&[Float], ModelError> {
        let i = self.input.local(token).ok_or_else(|| ModelError::Vocab {
            token,
            expert: self.name.clone(),
        })?;
        Ok(self.embed.row(i))
    }

    pub fn has_lora(&self) -> bool {
        self.layers.iter().any(|l| l.projections().iter().any(|p| p.lora.is_some()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// Expert 0 is the speech expert, expert 1 the action expert.
    Modality,
    /// A single expert sees every token.
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Base,
    LoraA,
    LoraB,
}

/// Identity of one tensor in [`Model::walk`] order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub expert: usize,
    pub kind: ParamKind,
}

fn lora_infos(expert: usize, en: &str, li: usize, pn: &str) -> (ParamInfo, ParamInfo) {
    (
        ParamInfo {
            name: format!("lora.{en}.layer{li}.{pn}.A"),
            expert,
            kind: ParamKind::LoraA,
        },
        ParamInfo {
            name: format!("lora.{en}.layer{li}.{pn}.B"),
            expert,
            kind: ParamKind::LoraB,
        },
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub experts: Vec<Expert>,
    pub routing: Routing,
}

impl Model {
    /// Two freshly initialised modality experts.
    pub fn new_samoe(config: ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let l = config.layout();
        let speech = Expert::init(
            ExpertId::Speech.name(),
            l.speech_input(),
            l.speech_output(),
            config.rope_theta[0],
            &config,
            rng,
        );
        let action = Expert::init(
            ExpertId::Action.name(),
            l.action_input(),
            l.action_output(),
            config.rope_theta[1],
            &config,
            rng,
        );
        Ok(Self {
            config,
            experts: vec![speech, action],
            routing: Routing::Modality,
        })
    }

    /// Single expert over the unified vocabulary with both output slices.
    pub fn new_dense(config: ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let l = config.layout();
        let e = Expert::init("dense", l.full(), l.joint_output(), config.rope_theta[0], &config, rng);
        Ok(Self {
            config,
            experts: vec![e],
            routing: Routing::Dense,
        })
    }

    /// Two copies of one expert under modality routing.
    pub fn tied(config: ModelConfig, expert: &Expert) -> Result<Self, ModelError> {
        config.validate()?;
        let mut a = expert.clone();
        a.name = ExpertId::Speech.name().into();
        let mut b = expert.clone();
        b.name = ExpertId::Action.name().into();
        Ok(Self {
            config,
            experts: vec![a, b],
            routing: Routing::Modality,
        })
    }

    pub fn expert_index(&self, tag: ModalityTag) -> usize {
        match self.routing {
            Routing::Modality => route(tag).index(),
            Routing::Dense => 0,
        }
    }

    pub fn expert_for(&self, tag: ModalityTag) -> &Expert {
        &self.experts[self.expert_index(tag)]
    }

    /// Visit every tensor in a fixed order. Adapter factors follow their weight.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(ParamInfo, &'a Tensor)) {
        for (ei, e) in self.experts.iter().enumerate() {
            let en = &e.name;
            let base = |name: String| ParamInfo {
                name,
                expert: ei,
                kind: ParamKind::Base,
            };
            f(base(format!("{en}.embed")), &e.embed);
            for (li, layer) in e.layers.iter().enumerate() {
                f(base(format!("{en}.layer{li}.attn_norm")), &layer.attn_norm);
                for (pi, p) in layer.projections().into_iter().enumerate() {
                    if pi == 4 {
                        f(base(format!("{en}.layer{li}.ffn_norm")), &layer.ffn_norm);
                    }
                    let pn = PROJECTIONS[pi];
                    f(base(format!("{en}.layer{li}.{pn}")), &p.w);
                    if let Some(l) = &p.lora {
                        let (ia, ib) = lora_infos(ei, en, li, pn);
                        f(ia, &l.a);
                        f(ib, &l.b);
                    }
                }
            }
            f(base(format!("{en}.final_norm")), &e.final_norm);
            f(base(format!("{en}.unembed")), &e.unembed);
        }
    }

    /// Mutable twin of [`Model::walk`], same order.
    pub fn walk_mut(&mut self, f: &mut dyn FnMut(ParamInfo, &mut Tensor)) {
        for (ei, e) in self.experts.iter_mut().enumerate() {
            let en = e.name.clone();
            let base = |name: String| ParamInfo {
                name,
                expert: ei,
                kind: ParamKind::Base,
            };
            f(base(format!("{en}.embed")), &mut e.embed);
            for (li, layer) in e.layers.iter_mut().enumerate() {
                f(base(format!("{en}.layer{li}.attn_norm")), &mut layer.attn_norm);
                let visit = |pn: &str, p: &mut Linear, f: &mut dyn FnMut(ParamInfo, &mut Tensor)| {
                    f(base(format!("{en}.layer{li}.{pn}")), &mut p.w);
                    if let Some(l) = &mut p.lora {
                        let (ia, ib) = lora_infos(ei, &en, li, pn);
                        f(ia, &mut l.a);
                        f(ib, &mut l.b);
                    }
                };
                visit("wq", &mut layer.wq, f);
                visit("wk", &mut layer.wk, f);
                visit("wv", &mut layer.wv, f);
                visit("wo", &mut layer.wo, f);
                f(base(format!("{en}.layer{li}.ffn_norm")), &mut layer.ffn_norm);
                visit("w_gate", &mut layer.w_gate, f);
                visit("w_up", &mut layer.w_up, f);
                visit("w_down", &mut layer.w_down, f);
            }
            f(base(format!("{en}.final_norm")), &mut e.final_norm);
            f(base(format!("{en}.unembed")), &mut e.unembed);
        }
    }

    pub fn param_infos(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        self.walk(&mut |i, _| out.push(i));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.walk(&mut |_, t| out.push(t));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Attach fresh adapters to every projection of every expert.
    pub fn attach_lora(&mut self, rank: usize, alpha: Float, rng: &mut impl Rng) -> Result<(), ModelError> {
        for e in &mut self.experts {
            for layer in &mut e.layers {
                for p in layer.projections_mut() {
                    p.lora = Some(LoraAdapter::new(p.d_in(), p.d_out(), rank, alpha, rng)?);
                }
            }
        }
        Ok(())
    }

    /// Fold adapters into the base weights, producing an adapter-free model.
    pub fn merge_lora(&self) -> Model {
        let mut m = self.clone();
        for e in &mut m.experts {
            for layer in &mut e.layers {
                for p in layer.projections_mut() {
                    if let Some(l) = p.lora.take() {
                        p.w.add_assign(&l.delta());
                    }
                }
            }
        }
        m
    }

    pub fn strip_lora(&self) -> Model {
        let mut m = self.clone();
        for e in &mut m.experts {
            for layer in &mut e.layers {
                for p in layer.projections_mut() {
                    p.lora = None;
                }
            }
        }
        m
    }

    /// Structural compatibility: same geometry and the same tensor names and shapes.
    pub fn check_same_geometry(&self, other: &Model) -> Result<(), ModelError> {
        let a: Vec<(String, Vec<usize>)> = {
            let mut v = Vec::new();
            self.walk(&mut |i, t| v.push((i.name, t.shape().to_vec())));
            v
        };
        let mut b = Vec::new();
        other.walk(&mut |i, t| b.push((i.name, t.shape().to_vec())));
        if a != b || self.config != other.config {
            return Err(ModelError::Structural("model geometries differ".into()));
        }
        Ok(())
    }
}

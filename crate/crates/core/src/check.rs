//! Invariant suites behind `samoe check`.

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{decode_stream, encode_block, prompt_prefix, truncate_history, with_tick, Block, HistoryPolicy, Mode, Tagged};
use crate::model::dense::dense_oracle_forward;
use crate::model::sequence::sequence_loss;
use crate::model::stream::feed;
use crate::model::{
    forward_sequence, forward_token, BlockGeometry, Expert, Modality, ModalityTag, Model, ModelConfig, ParamKind, SeqToken,
    UnifiedKVCache, VocabLayout, VocabSizes,
};
use crate::num::{finite_diff_check, Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

impl std::str::FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fast" => Ok(Level::Fast),
            "full" => Ok(Level::Full),
            _ => Err(format!("unknown check level {s:?} (expected fast or full)")),
        }
    }
}

/// Deliberate defects used to show that a check can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Cached decoding rotates with the wrong frequency base.
    BrokenRope,
}

impl std::str::FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Fault::None),
            "broken-rope" => Ok(Fault::BrokenRope),
            _ => Err(format!("unknown fault {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub name: &'static str,
    pub pass: bool,
    pub measured: f64,
    pub bound: f64,
    pub detail: String,
}

impl Outcome {
    fn at_most(name: &'static str, measured: f64, bound: f64, detail: String) -> Self {
        Self { name, pass: measured <= bound, measured, bound, detail }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} measured={:.3e} bound={:.3e} {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.bound,
            self.detail
        )
    }
}

fn test_vocab() -> VocabSizes {
    VocabSizes { prompt: 3, speech: 12, image: 10, text: 9, action: 7 }
}

fn cfg(n_layers: usize, d_model: usize, n_heads: usize, n_kv_heads: usize, d_head: usize) -> ModelConfig {
    ModelConfig { n_layers, d_model, n_heads, n_kv_heads, d_head, d_ff: 2 * d_model, vocab: test_vocab(), ..ModelConfig::default() }
}

/// Random tokens whose ids agree with their tags, ticks nondecreasing.
pub fn random_sequence(c: &ModelConfig, n: usize, rng: &mut impl Rng) -> Vec<SeqToken> {
    let l = c.layout();
    let mut tick = 0;
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.15) {
                tick += 1;
            }
            let tag = ModalityTag::ALL[rng.gen_range(0..ModalityTag::ALL.len())];
            let id = match tag {
                ModalityTag::Boundary(m) => {
                    if rng.gen() {
                        l.open(m)
                    } else {
                        l.close(m)
                    }
                }
                t => rng.gen_range(l.payload(t.modality())),
            };
            SeqToken { id, tag, tick }
        })
        .collect()
}

/// A well-formed block with random payloads.
pub fn random_block(rng: &mut impl Rng, l: &VocabLayout, g: &BlockGeometry, mode: Mode, tick: usize) -> Block {
    let mut pick = |m: Modality, n: usize| -> Vec<usize> { (0..n).map(|_| rng.gen_range(l.payload(m))).collect() };
    let speech = pick(Modality::Speech, g.speech);
    let images = match mode {
        Mode::Default => (0..g.n_img).map(|_| pick(Modality::Image, g.image)).collect(),
        Mode::SpeechOnly => Vec::new(),
    };
    let silent = rng.gen_bool(0.4);
    let text = if silent {
        vec![l.silence()]
    } else {
        (0..g.text).map(|_| rng.gen_range(l.payload(Modality::Text).start + 1..l.payload(Modality::Text).end)).collect()
    };
    let action = match mode {
        Mode::Default => (0..g.action).map(|_| rng.gen_range(l.payload(Modality::Action))).collect(),
        Mode::SpeechOnly => vec![l.noop(); g.action],
    };
    Block { tick, speech, images, text, action }
}

fn stream(m: &Model, seq: &[SeqToken]) -> Vec<Vec<Float>> {
    let mut cache = UnifiedKVCache::new(&m.config);
    seq.iter()
        .enumerate()
        .map(|(p, t)| forward_token(m, &mut cache, t.id, t.tag, t.tick, p, None).expect("valid sequence"))
        .collect()
}

fn max_diff(a: &[Vec<Float>], b: &[Vec<Float>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs() as f64))
        .fold(0.0, f64::max)
}

/// Both experts holding the same weights reproduce a plain dense transformer.
pub fn tied_equivalence(level: Level) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let configs = match level {
        Level::Fast => vec![cfg(1, 16, 2, 1, 8), cfg(2, 32, 4, 2, 8)],
        Level::Full => vec![cfg(1, 16, 2, 1, 8), cfg(2, 32, 4, 2, 8), cfg(4, 16, 4, 4, 4), cfg(1, 64, 4, 2, 16), cfg(4, 64, 8, 2, 8), cfg(2, 16, 2, 2, 6)],
    };
    let n = configs.len();
    let mut worst: f64 = 0.0;
    for c in configs {
        let l = c.layout();
        let e = Expert::init("dense", l.full(), l.full(), 10000.0, &c, &mut rng);
        let tied = Model::tied(c.clone(), &e).expect("tied model");
        let seq = random_sequence(&c, 48, &mut rng);
        let ids: Vec<usize> = seq.iter().map(|t| t.id).collect();
        let oracle = dense_oracle_forward(&c, &e, &ids).expect("oracle");
        let oracle: Vec<Vec<Float>> = (0..ids.len()).map(|i| oracle.row(i).to_vec()).collect();
        worst = worst.max(max_diff(&oracle, &forward_sequence(&tied, &seq, None).expect("forward")));
        worst = worst.max(max_diff(&oracle, &stream(&tied, &seq)));
    }
    Outcome::at_most("tied_dense_equivalence", worst, 1e-9, format!("configs={n}"))
}

/// Block-by-block cached decoding against full recomputation, with and without the history window.
pub fn streaming_equivalence(level: Level, fault: Fault) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut c = cfg(2, 16, 4, 2, 4);
    c.rope_theta = [10000.0, 777.0];
    let m = Model::new_samoe(c.clone(), &mut ChaCha8Rng::seed_from_u64(3)).expect("model");
    let mut cached = m.clone();
    if fault == Fault::BrokenRope {
        for e in &mut cached.experts {
            e.rope_theta *= 1.5;
        }
    }
    let n = if level == Level::Full { 100 } else { 30 };
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let len = rng.gen_range(8..64);
        let seq = random_sequence(&c, len, &mut rng);
        let horizon = (i % 2 == 1).then_some(2);
        let full = forward_sequence(&m, &seq, horizon).expect("forward");
        let mut cache = UnifiedKVCache::new(&c);
        let mut cur = usize::MAX;
        let mut inc = Vec::with_capacity(len);
        for (p, t) in seq.iter().enumerate() {
            if t.tick != cur {
                cur = t.tick;
                truncate_history(&mut cache, cur, HistoryPolicy { horizon });
            }
            inc.push(forward_token(&cached, &mut cache, t.id, t.tag, t.tick, p, None).expect("valid sequence"));
        }
        worst = worst.max(max_diff(&full, &inc));
    }
    Outcome::at_most("streaming_equivalence", worst, 1e-10, format!("sequences={n}"))
}

/// Central differences on the training loss. Targets sit on one expert while
/// the other expert's coordinates are checked, so those gradients only exist
/// through shared attention.
pub fn gradient_check(level: Level) -> Outcome {
    let c = cfg(2, 8, 2, 1, 4);
    let mut m = Model::new_samoe(c.clone(), &mut ChaCha8Rng::seed_from_u64(12)).expect("model");
    m.attach_lora(2, 2.0, &mut ChaCha8Rng::seed_from_u64(1)).expect("lora");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    m.walk_mut(&mut |i, t| {
        if i.kind == ParamKind::LoraB {
            *t = Tensor::randn(t.shape(), 0.1, &mut rng);
        }
    });
    let per_run = if level == Level::Full { 200 } else { 60 };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let seq = random_sequence(&c, 24, &mut rng);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (target_expert, probe_expert) in [(1, 0), (0, 1), (2, 2)] {
        let targets: Vec<Option<usize>> = seq
            .iter()
            .map(|t| {
                let ei = m.expert_index(t.tag);
                if target_expert != 2 && ei != target_expert {
                    return None;
                }
                let ids: Vec<usize> = m.experts[ei].output.ranges().iter().flat_map(|r| r.clone()).collect();
                Some(ids[rng.gen_range(0..ids.len())])
            })
            .collect();
        let sl = sequence_loss(&m, &seq, &targets, Some(2), &|_| true).expect("loss");
        let mut grads = sl.graph.backward(sl.loss).expect("backward");
        let all: Vec<Tensor> = m.tensors().into_iter().cloned().collect();
        let analytic_all: Vec<Tensor> =
            sl.params.vars.iter().zip(&all).map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape()))).collect();
        let pick: Vec<usize> = (0..all.len()).filter(|&i| probe_expert == 2 || sl.params.infos[i].expert == probe_expert).collect();
        let params: Vec<Tensor> = pick.iter().map(|&i| all[i].clone()).collect();
        let analytic: Vec<Tensor> = pick.iter().map(|&i| analytic_all[i].clone()).collect();
        let template = m.clone();
        let report = finite_diff_check(
            |ps: &[Tensor]| {
                let mut mm = template.clone();
                let (mut i, mut k) = (0, 0);
                mm.walk_mut(&mut |_, t| {
                    if k < pick.len() && pick[k] == i {
                        *t = ps[k].clone();
                        k += 1;
                    }
                    i += 1;
                });
                sequence_loss(&mm, &seq, &targets, Some(2), &|_| false).map(|s| s.graph.value(s.loss).item()).expect("loss")
            },
            &params,
            &analytic,
            1e-5,
            per_run,
            21 + probe_expert as u64,
        );
        worst = worst.max(report.max_rel_error as f64);
        checked += report.checked;
    }
    Outcome::at_most("gradient_check", worst, 1e-4, format!("coordinates={checked}"))
}

/// Zero-init adapters are an exact no-op and merged weights match the adapter path.
pub fn lora_contracts() -> Outcome {
    let c = cfg(2, 16, 4, 2, 4);
    let base = Model::new_samoe(c.clone(), &mut ChaCha8Rng::seed_from_u64(20)).expect("model");
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let seq = random_sequence(&c, 40, &mut rng);
    let reference = forward_sequence(&base, &seq, None).expect("forward");
    let mut adapted = base.clone();
    adapted.attach_lora(4, 4.0, &mut rng).expect("lora");
    let zero = max_diff(&reference, &forward_sequence(&adapted, &seq, None).expect("forward")).max(max_diff(&reference, &stream(&adapted, &seq)));
    adapted.walk_mut(&mut |i, t| {
        if i.kind == ParamKind::LoraB {
            *t = Tensor::randn(t.shape(), 0.2, &mut rng);
        }
    });
    let runtime = forward_sequence(&adapted, &seq, None).expect("forward");
    let merged = max_diff(&runtime, &forward_sequence(&adapted.merge_lora(), &seq, None).expect("forward"));
    let moved = max_diff(&runtime, &reference);
    let mut o = Outcome::at_most("lora_contracts", merged, 1e-9, format!("zero_init_delta={zero:e} trained_delta={moved:.3e}"));
    o.pass &= zero == 0.0 && moved > 0.0;
    o
}

/// Encode/decode round trip on random blocks and a mutation fuzz of whole streams.
pub fn codec_round_trip(level: Level) -> Outcome {
    let c = ModelConfig::default();
    let (l, g) = (c.layout(), c.block);
    let n = if level == Level::Full { 1000 } else { 200 };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for i in 0..n {
        let mode = if i % 3 == 0 { Mode::SpeechOnly } else { Mode::Default };
        let b = random_block(&mut rng, &l, &g, mode, 0);
        let toks = encode_block(&b, mode, &g, &l).expect("valid block");
        match decode_stream(&toks, &g, &l) {
            Ok(d) if d.blocks.len() == 1 && d.partial.is_none() && d.blocks[0] == b => {}
            _ => mismatches += 1,
        }
    }
    let mut crashes = 0;
    let mut rejected = 0;
    let tags = ModalityTag::ALL;
    for i in 0..n {
        let mode = if i % 3 == 0 { Mode::SpeechOnly } else { Mode::Default };
        let mut toks: Vec<Tagged> = prompt_prefix(&l, &[l.payload(Modality::Prompt).start]).expect("prompt");
        for t in 0..3 {
            toks.extend(encode_block(&random_block(&mut rng, &l, &g, mode, t), mode, &g, &l).expect("valid block"));
        }
        for _ in 0..rng.gen_range(1..4) {
            if toks.is_empty() {
                break;
            }
            let at = rng.gen_range(0..toks.len());
            match rng.gen_range(0..5) {
                0 => {
                    toks.remove(at);
                }
                1 => toks.insert(at, (rng.gen_range(0..l.total() + 3), tags[rng.gen_range(0..tags.len())])),
                2 => toks[at].0 = rng.gen_range(0..l.total() + 3),
                3 => toks[at].1 = tags[rng.gen_range(0..tags.len())],
                _ => {
                    let b = rng.gen_range(0..toks.len());
                    toks.swap(at, b);
                }
            }
        }
        match catch_unwind(AssertUnwindSafe(|| decode_stream(&toks, &g, &l))) {
            Err(_) => crashes += 1,
            Ok(Err(_)) => rejected += 1,
            Ok(Ok(_)) => {}
        }
    }
    let mut o = Outcome::at_most(
        "codec_round_trip",
        (mismatches + crashes) as f64,
        0.0,
        format!("blocks={n} mismatches={mismatches} fuzz={n} crashes={crashes} rejected={rejected}"),
    );
    o.pass &= rejected > 0;
    o
}

/// Cache census after streaming ten blocks under the default two-block horizon.
pub fn truncation_census() -> Outcome {
    let c = ModelConfig { n_layers: 1, d_model: 8, n_heads: 2, n_kv_heads: 1, d_head: 4, d_ff: 8, ..ModelConfig::default() };
    let m = Model::new_samoe(c.clone(), &mut ChaCha8Rng::seed_from_u64(1)).expect("model");
    let (l, g) = (c.layout(), c.block);
    let policy = HistoryPolicy::default();
    let h = policy.horizon.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cache = UnifiedKVCache::new(&c);
    let mut all = Vec::new();
    let last = 10;
    for tick in 1..=last {
        truncate_history(&mut cache, tick, policy);
        let toks = encode_block(&random_block(&mut rng, &l, &g, Mode::Default, tick), Mode::Default, &g, &l).expect("valid block");
        feed(&m, &mut cache, &toks, tick).expect("feed");
        all.extend(with_tick(&toks, tick));
    }
    let mut errors = 0;
    for tick in 1..=last {
        for windowed in [false, true] {
            let have = cache.entries().iter().filter(|e| e.tick == tick && e.tag.is_windowed() == windowed).count();
            let total = all.iter().filter(|t| t.tick == tick && t.tag.is_windowed() == windowed).count();
            let want = if !windowed || tick + h >= last { total } else { 0 };
            if have != want {
                errors += 1;
            }
        }
    }
    Outcome::at_most("truncation_census", errors as f64, 0.0, format!("horizon={h} ticks={last} entries={}", cache.len()))
}

/// Every invariant at the given level.
pub fn run(level: Level, fault: Fault) -> Vec<Outcome> {
    vec![
        tied_equivalence(level),
        streaming_equivalence(level, fault),
        gradient_check(level),
        lora_contracts(),
        codec_round_trip(level),
        truncation_census(),
    ]
}

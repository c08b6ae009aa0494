use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cache::UnifiedKVCache;
use super::params::Model;
use super::stream::forward_token;
use super::vocab::{Modality, ModalityTag};
use super::ModelError;
use crate::num::Float;

/// Pick a global id from `logits` restricted to `allowed`.
pub fn choose(
    logits: &[Float],
    output: &super::vocab::VocabSlice,
    allowed: &[usize],
    temperature: Float,
    rng: &mut impl Rng,
) -> usize {
    let scored: Vec<(usize, Float)> = allowed
        .iter()
        .map(|&id| (id, logits[output.local(id).expect("allowed ids lie in the output slice")]))
        .collect();
    if temperature <= 0.0 {
        let mut best = scored[0];
        for &s in &scored[1..] {
            if s.1 > best.1 {
                best = s;
            }
        }
        return best.0;
    }
    let max = scored.iter().map(|s| s.1).fold(Float::NEG_INFINITY, Float::max);
    let w: Vec<Float> = scored.iter().map(|s| ((s.1 - max) / temperature).exp()).collect();
    let total: Float = w.iter().sum();
    let mut u: Float = rng.gen::<Float>() * total;
    for (i, wi) in w.iter().enumerate() {
        u -= wi;
        if u < 0.0 {
            return scored[i].0;
        }
    }
    scored[scored.len() - 1].0
}

/// Generate one output segment, feeding its boundaries and payload into the cache.
///
/// Text segments stop after a leading `<silence>`; otherwise `len` tokens are produced.
pub fn sample_segment(
    model: &Model,
    cache: &mut UnifiedKVCache,
    tag: ModalityTag,
    tick: usize,
    len: usize,
    temperature: Float,
    seed: u64,
) -> Result<Vec<usize>, ModelError> {
    let m = match tag {
        ModalityTag::TextOut => Modality::Text,
        ModalityTag::ActionOut => Modality::Action,
        other => return Err(ModelError::Config(format!("cannot sample a {other} segment"))),
    };
    if len == 0 {
        return Err(ModelError::Config("segment length must be positive".into()));
    }
    let layout = model.config.layout();
    let output = &model.expert_for(tag).output;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let payload: Vec<usize> = layout.payload(m).collect();
    let silence = layout.silence();
    let after_first: Vec<usize> = payload.iter().copied().filter(|&id| !(m == Modality::Text && id == silence)).collect();

    let mut pos = cache.next_position();
    let mut logits = forward_token(model, cache, layout.open(m), ModalityTag::Boundary(m), tick, pos, None)?;
    pos += 1;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let allowed = if i == 0 { &payload } else { &after_first };
        let id = choose(&logits, output, allowed, temperature, &mut rng);
        out.push(id);
        logits = forward_token(model, cache, id, tag, tick, pos, None)?;
        pos += 1;
        if m == Modality::Text && i == 0 && id == silence {
            break;
        }
    }
    forward_token(model, cache, layout.close(m), ModalityTag::Boundary(m), tick, pos, None)?;
    Ok(out)
}

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use samoe::codec::{
    decode_stream, dump, encode_block, parse_dump, prompt_prefix, token_name, truncate_history, with_tick, Block,
    CodecErrorKind, HistoryPolicy, Mode, Tagged,
};
use samoe::model::stream::feed;
use samoe::model::{
    forward_sequence, forward_token, route, BlockGeometry, ExpertId, Modality, ModalityTag, Model, ModelConfig,
    UnifiedKVCache, VocabLayout,
};

fn layout() -> VocabLayout {
    ModelConfig::default().layout()
}

fn geo() -> BlockGeometry {
    BlockGeometry::default()
}

fn names(l: &VocabLayout, toks: &[Tagged]) -> String {
    toks.iter().map(|t| token_name(l, t.0)).collect::<Vec<_>>().join(" ")
}

fn random_block(rng: &mut impl Rng, mode: Mode, tick: usize) -> Block {
    let l = layout();
    let g = geo();
    let pick = |m: Modality, rng: &mut dyn rand::RngCore| rng.gen_range(l.payload(m));
    let speech = (0..g.speech).map(|_| pick(Modality::Speech, rng)).collect();
    let images = match mode {
        Mode::Default => (0..g.n_img).map(|_| (0..g.image).map(|_| pick(Modality::Image, rng)).collect()).collect(),
        Mode::SpeechOnly => Vec::new(),
    };
    let text = if rng.gen_bool(0.4) {
        vec![l.silence()]
    } else {
        (0..g.text).map(|_| pick(Modality::Text, rng)).collect()
    };
    let action = match mode {
        Mode::Default => (0..g.action).map(|_| pick(Modality::Action, rng)).collect(),
        Mode::SpeechOnly => vec![l.noop(); g.action],
    };
    Block {
        tick,
        speech,
        images,
        text,
        action,
    }
}

fn stream_of(blocks: &[Block], mode: Mode, prompt: Option<&[usize]>) -> Vec<Tagged> {
    let l = layout();
    let mut out = Vec::new();
    if let Some(p) = prompt {
        out.extend(prompt_prefix(&l, p).unwrap());
    }
    for b in blocks {
        out.extend(encode_block(b, mode, &geo(), &l).unwrap());
    }
    out
}

#[test]
fn speech_only_silence_block_pattern() {
    let l = layout();
    let s = l.payload(Modality::Speech).start;
    let b = Block {
        tick: 0,
        speech: (s + 1..s + 6).collect(),
        images: vec![],
        text: vec![l.silence()],
        action: vec![l.noop(); 2],
    };
    let toks = encode_block(&b, Mode::SpeechOnly, &geo(), &l).unwrap();
    assert_eq!(
        names(&l, &toks),
        "<bos> S:1 S:2 S:3 S:4 S:5 <eos> <boi> <eoi> <bot> T:0 <eot> <boa> A:0 A:0 <eoa>"
    );
}

#[test]
fn default_block_pattern() {
    let l = layout();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut b = random_block(&mut rng, Mode::Default, 0);
    b.text = (0..8).map(|i| l.payload(Modality::Text).start + 2 + i).collect();
    let toks = encode_block(&b, Mode::Default, &geo(), &l).unwrap();
    let tags: Vec<String> = toks.iter().map(|t| t.1.to_string()).collect();
    let mut want = vec!["BOUNDARY(SPEECH_IN)".to_string()];
    want.extend(std::iter::repeat("SPEECH_IN".to_string()).take(5));
    want.push("BOUNDARY(SPEECH_IN)".into());
    want.push("BOUNDARY(IMAGE_IN)".into());
    want.extend(std::iter::repeat("IMAGE_IN".to_string()).take(4));
    want.push("BOUNDARY(IMAGE_IN)".into());
    want.push("BOUNDARY(TEXT_OUT)".into());
    want.extend(std::iter::repeat("TEXT_OUT".to_string()).take(8));
    want.push("BOUNDARY(TEXT_OUT)".into());
    want.push("BOUNDARY(ACTION_OUT)".into());
    want.extend(std::iter::repeat("ACTION_OUT".to_string()).take(2));
    want.push("BOUNDARY(ACTION_OUT)".into());
    assert_eq!(tags, want);
    assert_eq!(toks.len(), 7 + 6 + 10 + 4);
}

#[test]
fn encode_rejects_bad_payloads() {
    let l = layout();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let good = random_block(&mut rng, Mode::Default, 0);
    let mut short = good.clone();
    short.speech.pop();
    assert_eq!(encode_block(&short, Mode::Default, &geo(), &l).unwrap_err().kind, CodecErrorKind::WrongLength);
    let mut foreign = good.clone();
    foreign.action[1] = l.silence();
    let e = encode_block(&foreign, Mode::Default, &geo(), &l).unwrap_err();
    assert_eq!(e.kind, CodecErrorKind::OutOfSlice);
    assert_eq!(e.offset, 7 + 6 + foreign.text.len() + 2 + 2);
    let mut moving = random_block(&mut rng, Mode::SpeechOnly, 0);
    moving.action[0] = l.noop() + 1;
    assert_eq!(encode_block(&moving, Mode::SpeechOnly, &geo(), &l).unwrap_err().kind, CodecErrorKind::ModeMismatch);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn round_trip(seed in any::<u64>(), speech_only in any::<bool>()) {
        let mode = if speech_only { Mode::SpeechOnly } else { Mode::Default };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_block(&mut rng, mode, 0);
        let toks = stream_of(std::slice::from_ref(&b), mode, None);
        let d = decode_stream(&toks, &geo(), &layout()).unwrap();
        prop_assert_eq!(d.blocks, vec![b]);
        prop_assert_eq!(d.mode, Some(mode));
        prop_assert!(d.partial.is_none());
    }
}

#[test]
fn three_block_stream_and_partial_tail() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let blocks: Vec<Block> = (0..3).map(|t| random_block(&mut rng, Mode::Default, t)).collect();
    let toks = stream_of(&blocks, Mode::Default, Some(&[layout().payload(Modality::Prompt).start]));
    let d = decode_stream(&toks, &geo(), &layout()).unwrap();
    assert_eq!(d.blocks, blocks);
    assert_eq!(d.prompt.as_deref().map(|p| p.len()), Some(1));

    let cut = &toks[..toks.len() - 2];
    let d = decode_stream(cut, &geo(), &layout()).unwrap();
    assert_eq!(d.blocks.len(), 2);
    let p = d.partial.unwrap();
    assert_eq!(p.segments.len(), 3);
    assert_eq!(p.open.map(|o| o.0), Some(Modality::Action));
}

#[test]
fn action_before_text_is_an_order_violation() {
    let l = layout();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let b = random_block(&mut rng, Mode::Default, 0);
    let toks = stream_of(&[b], Mode::Default, None);
    let t_start = toks.iter().position(|t| t.0 == l.open(Modality::Text)).unwrap();
    let a_start = toks.iter().position(|t| t.0 == l.open(Modality::Action)).unwrap();
    let mut swapped = toks[..t_start].to_vec();
    swapped.extend_from_slice(&toks[a_start..]);
    swapped.extend_from_slice(&toks[t_start..a_start]);
    let e = decode_stream(&swapped, &geo(), &l).unwrap_err();
    assert_eq!(e.kind, CodecErrorKind::OrderViolation);
    assert_eq!(e.offset, t_start);
    assert_eq!(e.expected, "<bot>");
    assert!(e.found.starts_with("<boa>"));
}

#[test]
fn oversize_and_unbalanced_are_located() {
    let l = layout();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let toks = stream_of(&[random_block(&mut rng, Mode::Default, 0)], Mode::Default, None);
    let mut extra = toks.clone();
    extra.insert(3, (l.speech_pad(), ModalityTag::SpeechIn));
    let e = decode_stream(&extra, &geo(), &l).unwrap_err();
    assert_eq!((e.kind, e.offset), (CodecErrorKind::Oversize, 6));
    let mut unclosed = toks.clone();
    unclosed.remove(6);
    let e = decode_stream(&unclosed, &geo(), &l).unwrap_err();
    assert_eq!((e.kind, e.offset), (CodecErrorKind::Unbalanced, 6));
}

#[test]
fn prompt_prefix_rules() {
    let l = layout();
    assert_eq!(names(&l, &prompt_prefix(&l, &[]).unwrap()), "<bop> <eop>");
    let p = prompt_prefix(&l, &[l.payload(Modality::Prompt).start]).unwrap();
    for t in &p {
        assert_eq!(route(t.1), ExpertId::Speech);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut toks = p.clone();
    toks.extend(stream_of(&[random_block(&mut rng, Mode::Default, 0)], Mode::Default, None));
    toks.extend(p.clone());
    let e = decode_stream(&toks, &geo(), &l).unwrap_err();
    assert_eq!(e.kind, CodecErrorKind::DuplicatePrompt);
}

#[test]
fn fuzzed_streams_never_panic() {
    let l = layout();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let all_tags = ModalityTag::ALL;
    let (mut ok, mut errs) = (0, 0);
    for i in 0..1000 {
        let mode = if i % 3 == 0 { Mode::SpeechOnly } else { Mode::Default };
        let blocks: Vec<Block> = (0..3).map(|t| random_block(&mut rng, mode, t)).collect();
        let mut toks = stream_of(&blocks, mode, Some(&[l.payload(Modality::Prompt).start]));
        for _ in 0..rng.gen_range(1..4) {
            let at = rng.gen_range(0..toks.len());
            match rng.gen_range(0..5) {
                0 => {
                    toks.remove(at);
                }
                1 => toks.insert(at, (rng.gen_range(0..l.total() + 3), all_tags[rng.gen_range(0..10)])),
                2 => toks[at].0 = rng.gen_range(0..l.total() + 3),
                3 => toks[at].1 = all_tags[rng.gen_range(0..10)],
                _ => {
                    let b = rng.gen_range(0..toks.len());
                    toks.swap(at, b);
                }
            }
            if toks.is_empty() {
                break;
            }
        }
        match decode_stream(&toks, &geo(), &l) {
            Ok(d) => {
                ok += 1;
                // Accepted streams re-encode to a prefix of themselves.
                let m = d.mode.unwrap_or(Mode::Default);
                let mut again = Vec::new();
                if let Some(p) = &d.prompt {
                    again.extend(prompt_prefix(&l, p).unwrap());
                }
                for b in &d.blocks {
                    again.extend(encode_block(b, m, &geo(), &l).unwrap());
                }
                assert_eq!(&toks[..again.len()], &again[..]);
            }
            Err(e) => {
                errs += 1;
                assert!(e.offset <= toks.len());
            }
        }
    }
    assert_eq!(ok + errs, 1000);
    assert!(errs > 500);
}

fn tiny_model() -> Model {
    let c = ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        n_kv_heads: 1,
        d_head: 4,
        d_ff: 8,
        ..ModelConfig::default()
    };
    Model::new_samoe(c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

#[test]
fn truncation_keeps_speech_text_and_recent_vision_action() {
    let m = tiny_model();
    let l = m.config.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let policy = HistoryPolicy::default();
    let mut cache = UnifiedKVCache::new(&m.config);
    let mut untouched = UnifiedKVCache::new(&m.config);
    let mut all = Vec::new();
    for tick in 1..=10 {
        truncate_history(&mut cache, tick, policy);
        truncate_history(&mut untouched, tick, HistoryPolicy { horizon: None });
        let b = random_block(&mut rng, Mode::Default, tick);
        let toks = encode_block(&b, Mode::Default, &geo(), &l).unwrap();
        feed(&m, &mut cache, &toks, tick).unwrap();
        feed(&m, &mut untouched, &toks, tick).unwrap();
        all.extend(with_tick(&toks, tick));
    }
    assert_eq!(untouched.len(), all.len());
    for tick in 1..=10 {
        let count = |tag_windowed: bool| {
            cache
                .entries()
                .iter()
                .filter(|e| e.tick == tick && e.tag.is_windowed() == tag_windowed)
                .count()
        };
        let kept = |tw: bool| all.iter().filter(|t| t.tick == tick && t.tag.is_windowed() == tw).count();
        assert_eq!(count(false), kept(false), "speech/text at tick {tick}");
        let want = if tick >= 8 { kept(true) } else { 0 };
        assert_eq!(count(true), want, "vision/action at tick {tick}");
    }
    let positions: Vec<usize> = cache.entries().iter().map(|e| e.position).collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]));
    for e in cache.entries() {
        assert_eq!(all[e.position].tag, e.tag);
    }
    // Truncated decoding equals recomputation under the masked history.
    let masked = forward_sequence(&m, &all, Some(2)).unwrap();
    let mut cache = UnifiedKVCache::new(&m.config);
    let mut diff: f64 = 0.0;
    let mut cur = usize::MAX;
    for (p, t) in all.iter().enumerate() {
        if t.tick != cur {
            cur = t.tick;
            truncate_history(&mut cache, cur, policy);
        }
        let lg = forward_token(&m, &mut cache, t.id, t.tag, t.tick, p, None).unwrap();
        for (a, b) in lg.iter().zip(&masked[p]) {
            diff = diff.max((a - b).abs() as f64);
        }
    }
    assert!(diff <= 1e-10);
}

#[test]
fn dump_round_trip_and_golden() {
    let l = layout();
    let s = l.payload(Modality::Speech).start;
    let i = l.payload(Modality::Image).start;
    let b = Block {
        tick: 0,
        speech: vec![s; 5],
        images: vec![vec![i, i + 1, i + 2, i + 3]],
        text: vec![l.silence()],
        action: vec![l.noop(), l.noop() + 1],
    };
    let text = dump(Some(&[10]), &[b.clone()]);
    assert_eq!(
        text,
        "P[10]\nS[13 13 13 13 13] I[96 97 98 99] T[314] A[342 343]\n"
    );
    assert_eq!(parse_dump(&text).unwrap(), (Some(vec![10]), vec![b]));
    assert!(parse_dump("S[1] A[2] T[3] I[4]").is_err());
}

use std::collections::BTreeSet;

use proptest::prelude::*;
use samoe::codec::{Block, Mode};
use samoe::model::config::DEFAULT_VOCAB;
use samoe::model::{BlockGeometry, ModalityTag, VocabLayout};
use samoe::sim::dataset::encode_episode;
use samoe::sim::script::{emit_speech, VALUE_TABLE};
use samoe::sim::words::{required_sizes, INTERRUPTS};
use samoe::sim::*;

fn sim() -> Sim {
    Sim::new(VocabLayout::new(DEFAULT_VOCAB), BlockGeometry::default()).unwrap()
}

fn scene(gripper: Cell, obj: Cell, goal: Cell) -> WorldState {
    WorldState {
        width: 5,
        height: 5,
        objects: vec![Object { id: 2, color: Color::Blue, cell: Some(obj) }],
        gripper,
        held: None,
        walls: BTreeSet::new(),
        goal,
    }
}

#[test]
fn word_tables_fill_default_vocab() {
    assert_eq!(required_sizes(), DEFAULT_VOCAB);
    let s = sim();
    assert_eq!(s.words.silence(), s.words.layout().silence());
    assert_eq!(s.words.tpad(), s.words.layout().text_pad());
    assert_eq!(s.words.speech_pad(), s.words.layout().speech_pad());
    assert_eq!(s.words.action(Action::Noop), s.words.layout().noop());
    assert_eq!(s.words.name(s.words.w_cell(2, 1)), "CELL-2-1");
    assert_eq!(s.words.name(s.words.w_interrupt(0)), "STOP-NOW");
    assert_eq!(s.words.name(s.words.t_reject(Defect::Visual)), "REJECT-VISUAL");
}

#[test]
fn reset_is_deterministic() {
    let s = sim();
    for task in TaskKind::ALL {
        for seed in 0..20 {
            assert_eq!(s.reset(task, seed).unwrap(), s.reset(task, seed).unwrap());
        }
    }
    assert!(matches!("JUGGLE".parse::<TaskKind>(), Err(SimError::UnknownTask(_))));
    assert_eq!("context-vqa".parse::<TaskKind>().unwrap(), TaskKind::ContextVqa);
}

#[test]
fn defective_scripts_follow_taxonomy() {
    let s = sim();
    let w = &s.words;
    let mut kinds = BTreeSet::new();
    for seed in 0..200 {
        let (world, script) = s.reset(TaskKind::Defective, seed).unwrap();
        let d = script.defect.unwrap();
        kinds.insert(d.name());
        let toks = &script.instruction.as_ref().unwrap().tokens;
        let obj = &world.objects[0];
        match d {
            Defect::Visual => {
                assert!(Color::ALL.iter().any(|&c| toks[1] == w.w_color(c) && c != obj.color));
            }
            Defect::Semantic => {
                let present: Vec<usize> = world.objects.iter().map(|o| w.w_obj(o.id)).collect();
                assert!(!present.contains(&toks[2]), "semantic defect names a present object");
            }
            Defect::Motion => {
                let oob = (0..6).any(|k| toks[4] == w.w_cell(5, k) || toks[4] == w.w_cell(k, 5));
                let walled = !world.walls.is_empty() && oracle_policy(&world, 0).is_err();
                assert!(oob ^ walled);
                if walled {
                    assert_eq!(s.observe(&world)[3], w.img_goal_blocked());
                }
            }
            Defect::OutOfContext => assert!(toks.iter().all(|&t| w.name(t).starts_with("GIB-"))),
        }
    }
    assert_eq!(kinds.len(), 4);
}

#[test]
fn barge_in_uses_an_interrupt_word() {
    let s = sim();
    let mut used = BTreeSet::new();
    for seed in 0..200 {
        let (_, script) = s.reset(TaskKind::BargeIn, seed).unwrap();
        let u = script.interrupt.as_ref().unwrap();
        assert_eq!(u.tokens.len(), 1);
        assert!(s.words.is_interrupt(u.tokens[0]));
        used.insert(s.words.name(u.tokens[0]));
        let t_i = script.instruction.as_ref().unwrap().tick;
        assert!(u.tick >= t_i + 2 && u.tick <= t_i + 8);
        assert!(u.tick < script.done_tick.unwrap());
    }
    assert_eq!(used.len(), INTERRUPTS.len());
}

#[test]
fn noop_and_illegal_steps() {
    let w = scene((1, 1), (3, 3), (0, 4));
    let (n, flag) = w.step(Action::Noop);
    assert_eq!(n, w);
    assert_eq!(flag, None);
    let (n, flag) = w.step(Action::Grip);
    assert_eq!(n, w);
    assert_eq!(flag, Some(Illegal::NothingToGrip));
    let corner = scene((0, 0), (3, 3), (0, 4));
    assert_eq!(corner.step(Action::Up), (corner.clone(), Some(Illegal::Blocked)));
    assert_eq!(corner.step(Action::Release).1, Some(Illegal::NothingHeld));
}

proptest! {
    #[test]
    fn random_rollouts_keep_invariants(seed in 0u64..1000, acts in prop::collection::vec(0usize..7, 50)) {
        let s = sim();
        let (mut world, _) = s.reset(TaskKind::Manip, seed).unwrap();
        world.objects.push(Object { id: 3, color: Color::Green, cell: None });
        let free = (0..5).flat_map(|r| (0..5).map(move |c| (r, c))).find(|&c| world.object_at(c).is_none() && c != world.goal).unwrap();
        world.objects[1].cell = Some(free);
        for a in acts {
            world.apply(Action::ALL[a]);
            prop_assert!(world.check().is_ok(), "{:?}", world.check());
            for t in s.observe(&world) {
                prop_assert!(s.words.layout().payload(samoe::model::Modality::Image).contains(&t));
            }
        }
    }
}

#[test]
fn image_tokens_track_the_gripper() {
    let s = sim();
    let base = scene((0, 0), (2, 2), (4, 4));
    assert_eq!(s.observe(&base), s.observe(&base.clone()));
    let mut seen = BTreeSet::new();
    for r in 0..5 {
        for c in 0..5 {
            let mut w = base.clone();
            w.gripper = (r, c);
            let img = s.observe(&w);
            assert_eq!(img.len(), 4);
            seen.insert(img);
        }
    }
    assert_eq!(seen.len(), 25);
}

#[test]
fn speech_streams_in_blocks() {
    let s = sim();
    let (_, mut script) = s.reset(TaskKind::Manip, 1).unwrap();
    let toks: Vec<usize> = (0..12).map(|i| s.words.w_echo(i % 10)).collect();
    script.instruction = Some(Utterance { tick: 2, tokens: toks.clone() });
    let pad = s.words.speech_pad();
    let real = |v: &[usize]| v.iter().filter(|&&t| t != pad).count();
    assert_eq!(real(&s.emit_speech(&script, 2)), 5);
    assert_eq!(real(&s.emit_speech(&script, 3)), 5);
    let last = s.emit_speech(&script, 4);
    assert_eq!(real(&last), 2);
    assert_eq!(&last[2..], &[pad; 3]);
    assert_eq!(s.emit_speech(&script, 0), vec![pad; 5]);
    let joined: Vec<usize> = (0..8).flat_map(|t| emit_speech(&script, t, 5, pad)).filter(|&t| t != pad).collect();
    assert_eq!(joined, toks);
    assert_eq!(script.instruction.as_ref().unwrap().end_tick(5), 4);
}

#[test]
fn oracle_cases() {
    let mut w = scene((2, 2), (2, 2), (2, 3));
    let mut acts = Vec::new();
    for _ in 0..5 {
        let a = oracle_policy(&w, 0).unwrap();
        acts.push(a);
        w.apply(a);
    }
    assert_eq!(acts, [Action::Grip, Action::Right, Action::Release, Action::Noop, Action::Noop]);

    let done = scene((0, 0), (1, 1), (1, 1));
    for _ in 0..3 {
        assert_eq!(oracle_policy(&done, 0), Ok(Action::Noop));
    }
    // Tie-break prefers vertical moves.
    let w = scene((0, 0), (2, 2), (4, 4));
    assert_eq!(oracle_policy(&w, 0), Ok(Action::Down));
    let w = scene((2, 2), (0, 0), (4, 4));
    assert_eq!(oracle_policy(&w, 0), Ok(Action::Up));

    let mut walled = scene((0, 0), (3, 3), (1, 1));
    walled.walls = [(0, 1), (2, 1), (1, 0), (1, 2)].into_iter().collect();
    assert_eq!(oracle_policy(&walled, 0), Err(Unreachable));
}

#[test]
fn oracle_solves_every_manip_script() {
    let s = sim();
    for seed in 0..500 {
        let (world, script) = s.reset(TaskKind::Manip, seed).unwrap();
        let mut w = world.clone();
        let mut steps = 0;
        while !w.done(0) {
            let a = oracle_policy(&w, 0).unwrap();
            assert_eq!(w.apply(a), None);
            steps += 1;
            assert!(steps <= 4 * (5 + 5), "seed {seed} not solved in time");
        }
        let ep = s.gold(TaskKind::Manip, seed).unwrap();
        assert!(ep.final_state.done(0));
        assert_eq!(ep.done_tick, script.done_tick);
        assert!(ep.trace.records.iter().all(|r| r.flags.is_empty()));
    }
}

#[test]
fn expected_answers() {
    let s = sim();
    let w = &s.words;
    let mut classes = BTreeSet::new();
    for seed in 0..100 {
        let ep = s.gold(TaskKind::ContextVqa, seed).unwrap();
        let q = ep.script.query.as_ref().unwrap();
        let rec = &ep.trace.records[q.utterance.tick];
        assert_eq!(rec.text[0], q.answer[0]);
        let (world, script) = s.reset(TaskKind::ContextVqa, seed).unwrap();
        // Replay the gold actions up to the query and read the state.
        let mut state = world.clone();
        for r in &ep.trace.records[..q.utterance.tick] {
            for &a in &r.action {
                state.apply(w.action_of(a).unwrap());
            }
        }
        assert_eq!(s.expected_answer(&script, &state, q.utterance.tick), q.answer);
        assert_eq!(state.snapshot_hash(), rec.hash);
        classes.insert(w.name(q.answer[0]));
    }
    assert_eq!(classes.len(), 3);

    let held = WorldState { held: Some(0), objects: vec![Object { id: 1, color: Color::Red, cell: None }], ..scene((1, 1), (0, 0), (4, 4)) };
    let before = scene((1, 1), (0, 0), (4, 4));
    let (_, mut script) = s.reset(TaskKind::ContextVqa, 3).unwrap();
    let qt = script.query.as_ref().unwrap().utterance.tick;
    script.target = 0;
    assert_eq!(s.expected_answer(&script, &held, qt), vec![w.t_status(Status::InGripper)]);
    assert_eq!(s.expected_answer(&script, &before, qt), vec![w.t_status(Status::OnTable)]);

    for seed in 0..100 {
        let (world, script) = s.reset(TaskKind::Defective, seed).unwrap();
        let t = script.instruction.as_ref().unwrap().end_tick(5);
        if script.defect == Some(Defect::Visual) {
            assert_eq!(s.expected_answer(&script, &world, t), vec![w.t_reject(Defect::Visual)]);
        }
        let (world, script) = s.reset(TaskKind::Qa, seed).unwrap();
        let q = script.query.as_ref().unwrap();
        let k = w.name(q.utterance.tokens[1])[4..].parse::<usize>().unwrap();
        assert_eq!(s.expected_answer(&script, &world, q.utterance.tick), vec![w.t_val(VALUE_TABLE[k])]);
        let (world, script) = s.reset(TaskKind::BargeIn, seed).unwrap();
        let i = script.interrupt.as_ref().unwrap().tick;
        assert_eq!(s.expected_answer(&script, &world, i), vec![w.t_cancelled()]);
    }
}

#[test]
fn gold_episode_shapes() {
    let s = sim();
    let w = &s.words;
    for seed in 0..50 {
        for task in TaskKind::ALL {
            let ep = s.gold(task, seed).unwrap();
            let n = ep.trace.records.len();
            assert!(n < 40, "{task} seed {seed} ran {n} ticks");
            let noop = w.action(Action::Noop);
            let spoke: Vec<usize> = ep.trace.records.iter().filter(|r| r.text[0] != w.silence()).map(|r| r.tick).collect();
            let acted = ep.trace.records.iter().any(|r| r.action.iter().any(|&a| a != noop));
            match task {
                TaskKind::Manip | TaskKind::SilenceControl => assert!(spoke.is_empty()),
                TaskKind::Defective => assert!(!acted && spoke.len() == 1),
                TaskKind::Echo | TaskKind::Qa => assert!(!acted && spoke.len() == 1),
                _ => assert_eq!(spoke.len(), 1),
            }
            if task == TaskKind::BargeIn {
                let tc = ep.script.interrupt.as_ref().unwrap().tick;
                assert!(ep.trace.records[tc..].iter().all(|r| r.action.iter().all(|&a| a == noop)));
                assert_eq!(ep.trace.first_event(Event::Cancelled), Some(tc));
            }
            if ep.script.mode() == Mode::SpeechOnly {
                assert!(ep.trace.records.iter().all(|r| r.images.is_empty()));
            }
        }
    }
}

#[test]
fn dataset_masks_and_echo_targets() {
    let s = sim();
    let mix = TaskMix::uniform(&TaskKind::ALL);
    let ds = gen_dataset(&s, &mix, 60, 9).unwrap();
    assert_eq!(ds.counts().values().sum::<usize>(), 60);
    for e in &ds.episodes {
        let payload = e.tokens.iter().filter(|t| matches!(t.tag, ModalityTag::TextOut | ModalityTag::ActionOut)).count();
        assert_eq!(e.mask_bits(), payload);
    }
    let ep = encode_episode(&s, TaskKind::Echo, 4, 0).unwrap();
    let pad = s.words.speech_pad();
    let heard: Vec<usize> = ep.tokens.iter().filter(|t| t.tag == ModalityTag::SpeechIn && t.id != pad).map(|t| s.words.echo_index(t.id).unwrap()).collect();
    let said: Vec<usize> = ep
        .tokens
        .iter()
        .filter(|t| t.tag == ModalityTag::TextOut && t.id != s.words.silence() && t.id != s.words.tpad())
        .map(|t| s.words.name(t.id)[4..].parse().unwrap())
        .collect();
    assert!(!heard.is_empty());
    assert_eq!(heard, said);

    assert!(matches!(gen_dataset(&s, &TaskMix { weights: vec![(TaskKind::Qa, 0.0)] }, 3, 1), Err(SimError::ZeroMix)));
}

#[test]
fn dataset_regenerates_byte_identical() {
    let s = sim();
    let mix = TaskMix::new(vec![(TaskKind::Manip, 2.0), (TaskKind::Qa, 1.0), (TaskKind::BargeIn, 1.0)]).unwrap();
    let a = gen_dataset(&s, &mix, 30, 77).unwrap();
    let b = gen_dataset(&s, &mix, 30, 77).unwrap();
    assert_eq!(a.to_text(), b.to_text());
    assert_eq!(a.manifest(), b.manifest());
    assert_ne!(a.to_text(), gen_dataset(&s, &mix, 30, 78).unwrap().to_text());
    assert_eq!(Dataset::parse_episodes(&a.to_text()).unwrap(), a.episodes);
    assert!(a.manifest().contains("count.MANIP="));
}

#[test]
fn trace_lines_round_trip() {
    let s = sim();
    let ep = s.gold(TaskKind::SpeakWhileAct, 5).unwrap();
    let text = ep.trace.to_text();
    assert!(text.starts_with("episode task=SPEAK_WHILE_ACT seed=5 mode=default prompt="));
    let line = text.lines().nth(1).unwrap();
    for key in ["tick=0 ", "hash=", "speech=", "image=", "text=", "action=", "events=", "flags="] {
        assert!(line.contains(key), "{line}");
    }
    assert_eq!(text.lines().count(), ep.trace.records.len() + 1);
    let back = EpisodeTrace::parse(&text).unwrap();
    assert_eq!(back, ep.trace);
    let blocks: Vec<Block> = back.blocks();
    assert_eq!(blocks.len(), ep.trace.records.len());
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use samoe::codec::encode_block;
use samoe::eval::*;
use samoe::model::{Model, ModelConfig};
use samoe::sim::*;

fn sim() -> Sim {
    Sim::for_model(&ModelConfig::small()).unwrap()
}

/// Scripted agent with a post-hoc edit of its outputs.
struct Tweak<'a, F> {
    inner: OracleAgent<'a>,
    edit: F,
}

impl<F: FnMut(&Observation<'_>, &mut Vec<usize>, &mut Vec<usize>)> Agent for Tweak<'_, F> {
    fn respond(&mut self, obs: &Observation<'_>) -> std::result::Result<(Vec<usize>, Vec<usize>), String> {
        let (mut t, mut a) = self.inner.respond(obs)?;
        (self.edit)(obs, &mut t, &mut a);
        Ok((t, a))
    }
}

fn run_tweaked(s: &Sim, task: TaskKind, seed: u64, edit: impl FnMut(&Observation<'_>, &mut Vec<usize>, &mut Vec<usize>)) -> (EpisodeScript, EpisodeMetrics) {
    let (world, script) = s.reset(task, seed).unwrap();
    let mut agent = Tweak { inner: OracleAgent { sim: s }, edit };
    let ep = s.run(&world, &script, &mut agent).unwrap();
    (script, episode_metrics(s, &ep.trace).unwrap())
}

#[test]
fn scripted_agent_scores_perfectly() {
    let s = sim();
    let mut all = Vec::new();
    for task in TaskKind::ALL {
        for seed in 0..40 {
            let ep = s.gold(task, seed).unwrap();
            assert!(ep.trace.records.len() <= MAX_TICKS);
            let m = episode_metrics(&s, &ep.trace).unwrap();
            assert!(m.success, "{task} seed {seed}: {m:?}");
            all.push(m);
        }
    }
    let r = MetricReport::from_episodes("oracle", "0..39", all);
    for (name, value, bound, pass) in r.thresholds() {
        assert!(pass, "{name} {value} vs {bound}");
    }
    assert_eq!(r.metric("success.MANIP"), Some(1.0));
    assert_eq!(r.task(TaskKind::Qa).unwrap().turn_latency_p95, Some(0.0));
}

#[test]
fn replayed_traces_give_identical_metrics() {
    let s = sim();
    for task in TaskKind::ALL {
        let ep = s.gold(task, 9).unwrap();
        let live = episode_metrics(&s, &ep.trace).unwrap();
        let parsed = EpisodeTrace::parse(&ep.trace.to_text()).unwrap();
        assert_eq!(episode_metrics(&s, &parsed).unwrap(), live);
        let (world, script) = s.reset(task, 9).unwrap();
        let again = s.run(&world, &script, &mut ReplayAgent { trace: &parsed }).unwrap();
        assert_eq!(again.trace, ep.trace);
    }
}

#[test]
fn turn_taking_windows() {
    let s = sim();
    let w = s.words.clone();
    let (_, m) = run_tweaked(&s, TaskKind::SpeakWhileAct, 3, |_, _, _| {});
    assert_eq!(m.dialogue_turn, Some(Turn { success: true, latency: Some(0) }));

    let (script, _) = run_tweaked(&s, TaskKind::SpeakWhileAct, 3, |_, _, _| {});
    let end = script.query.as_ref().unwrap().utterance.end_tick(5);
    let answer = script.query.as_ref().unwrap().answer.clone();
    for (delay, ok) in [(1usize, true), (2, false)] {
        let (_, m) = run_tweaked(&s, TaskKind::SpeakWhileAct, 3, |obs, t, _| {
            if obs.tick >= end && obs.tick < end + delay {
                *t = vec![w.silence()];
            }
            if obs.tick == end + delay {
                *t = s.text_payload(&answer);
            }
        });
        assert_eq!(m.dialogue_turn.unwrap().success, ok, "delay {delay}");
        assert_eq!(m.dialogue_turn.unwrap().latency, Some(delay));
    }
    let (_, m) = run_tweaked(&s, TaskKind::Qa, 3, |_, t, _| *t = vec![w.silence()]);
    assert_eq!(m.dialogue_turn, Some(Turn { success: false, latency: None }));
    assert!(!m.success);

    let (_, m) = run_tweaked(&s, TaskKind::Manip, 3, |obs, _, a| {
        if obs.tick <= obs.script.instruction.as_ref().unwrap().end_tick(5) + 1 {
            *a = vec![w.action(Action::Noop); 2];
        }
    });
    assert!(!m.action_turn.unwrap().success);
}

#[test]
fn barge_in_rules() {
    let s = sim();
    let w = s.words.clone();
    let (script, m) = run_tweaked(&s, TaskKind::BargeIn, 4, |_, _, _| {});
    assert!(m.success);
    let end = script.interrupt.as_ref().unwrap().end_tick(5);

    let (_, m) = run_tweaked(&s, TaskKind::BargeIn, 4, |obs, t, _| {
        if obs.tick == end {
            *t = vec![w.silence()];
        }
        if obs.tick == end + 1 {
            *t = s.text_payload(&[w.t_cancelled()]);
        }
    });
    assert_eq!(m.barge_in, Some(Turn { success: true, latency: Some(1) }));

    let (_, m) = run_tweaked(&s, TaskKind::BargeIn, 4, |obs, _, a| {
        if obs.tick >= end {
            a[0] = w.action(Action::Up);
            a[1] = w.action(Action::Down);
        }
    });
    assert!(!m.barge_in.unwrap().success);

    let (_, m) = run_tweaked(&s, TaskKind::Manip, 4, |_, _, _| {});
    assert_eq!(m.barge_in, None);
}

#[test]
fn task_success_definitions() {
    let s = sim();
    let w = s.words.clone();
    for seed in 0..20 {
        let (script, m) = run_tweaked(&s, TaskKind::Defective, seed, |obs, _, a| {
            if obs.tick == obs.script.instruction.as_ref().unwrap().end_tick(5) {
                a[0] = w.action(Action::Left);
                a[1] = w.action(Action::Right);
            }
        });
        assert!(!m.success && m.rejected == Some(false), "{:?}", script.defect);
    }
    let wrong_dim = |seed| {
        run_tweaked(&s, TaskKind::Defective, seed, |_, t, _| {
            if let Some(d) = w.reject_kind(t[0]) {
                let other = Defect::ALL.into_iter().find(|&x| x != d).unwrap();
                t[0] = w.t_reject(other);
            }
        })
        .1
    };
    let m = wrong_dim(2);
    assert_eq!((m.rejected, m.reject_dimension, m.success), (Some(true), Some(false), false));

    let mut saw = 0;
    for seed in 0..30 {
        let (script, m) = run_tweaked(&s, TaskKind::ContextVqa, seed, |_, t, _| {
            if let Some(i) = Status::ALL.iter().position(|&x| w.t_status(x) == t[0]) {
                t[0] = w.t_status(Status::ALL[(i + 1) % 3]);
            }
        });
        assert!(!m.success);
        let truth = &script.query.as_ref().unwrap().answer;
        if truth[0] == w.t_status(Status::InGripper) {
            saw += 1;
        }
    }
    assert!(saw > 0);

    for seed in 0..30 {
        let (script, m) = run_tweaked(&s, TaskKind::Echo, seed, |_, t, _| {
            let words = t.iter().filter(|&&x| x != w.tpad() && x != w.silence()).count();
            if words > 1 {
                t[words - 1] = w.tpad();
            }
        });
        let n = script.query.as_ref().unwrap().answer.len();
        assert_eq!(m.success, n == 1, "partial transcript scored as success");
    }

    let (_, m) = run_tweaked(&s, TaskKind::SilenceControl, 1, |obs, t, _| {
        if obs.tick == 1 {
            *t = s.text_payload(&[w.t_echo(0)]);
        }
    });
    assert_eq!(m.silence_violations, Some(1));
    assert!(!m.success);
}

#[test]
fn model_agent_outputs_are_valid_blocks() {
    let s = sim();
    let model = Model::new_samoe(ModelConfig::small(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    for task in TaskKind::ALL {
        let (world, script) = s.reset(task, 2).unwrap();
        let mut agent = ModelAgent::new(&model);
        agent.temperature = 1.0;
        let ep = s.run(&world, &script, &mut agent).unwrap();
        assert!(ep.trace.records.len() <= MAX_TICKS);
        for b in ep.blocks() {
            encode_block(&b, script.mode(), &s.geo, s.words.layout()).unwrap();
        }
        episode_metrics(&s, &ep.trace).unwrap();
    }
}

#[test]
fn reports_and_comparisons() {
    let s = sim();
    let model = Model::new_samoe(ModelConfig::small(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let seeds = Suite::parse_seeds("1..100").unwrap();
    assert_eq!(seeds.len(), 100);
    let suite = Suite::new(vec![TaskKind::Qa], seeds);
    let (r, traces) = evaluate(&s, &model, "m", &suite, &EvalOptions::default()).unwrap();
    assert_eq!(traces.len(), 100);
    assert_eq!(r.task(TaskKind::Qa).unwrap().n, 100);
    assert_eq!(r.metrics["qa_accuracy"].den, 100);
    assert!(r.to_text().starts_with("report model=m seeds=1..100\n"));
    let par = evaluate(&s, &model, "m", &suite, &EvalOptions { jobs: 3, ..EvalOptions::default() }).unwrap();
    assert_eq!(par.0, r);

    let small = Suite::new(vec![TaskKind::Manip, TaskKind::Qa, TaskKind::ContextVqa, TaskKind::Defective], vec![1, 2, 3]);
    let cmp = compare_models(&s, &[("a".into(), &model), ("b".into(), &model)], &small, &EvalOptions::default()).unwrap();
    assert!(cmp.table(&COMPARISON_TASKS).starts_with("comparison seeds=1..3\n"));
    for line in cmp.table(&COMPARISON_TASKS).lines().skip(2) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cols[1], cols[2]);
    }
    assert_eq!(cmp.wins(0, 1, &COMPARISON_TASKS), 4);
    let csv = cmp.to_csv();
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    assert!(Suite::parse_tasks("QA,manip").unwrap() == vec![TaskKind::Qa, TaskKind::Manip]);
    assert!(Suite::parse_tasks("QA,dance").is_err());
}

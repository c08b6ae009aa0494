use crate::sim::{Action, EpisodeTrace, Sim, SimError, TaskKind, TickRecord, WorldState};

use super::Result;

/// Response timing relative to the end of an utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Turn {
    pub success: bool,
    /// Blocks after the utterance's last speech tick; `None` if the response never came or came early.
    pub latency: Option<usize>,
}

impl Turn {
    fn from_first(first: Option<usize>, end: usize) -> Self {
        let latency = first.and_then(|t| t.checked_sub(end));
        Self { success: latency.is_some_and(|l| l <= 1), latency }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeMetrics {
    pub task: TaskKind,
    pub seed: u64,
    pub ticks: usize,
    pub success: bool,
    pub dialogue_turn: Option<Turn>,
    pub action_turn: Option<Turn>,
    pub barge_in: Option<Turn>,
    pub silence_violations: Option<usize>,
    pub answer_correct: Option<bool>,
    /// `(matching, expected)` answer tokens.
    pub answer_tokens: Option<(usize, usize)>,
    pub manip_done: Option<bool>,
    pub rejected: Option<bool>,
    pub reject_dimension: Option<bool>,
}

/// States at the start of every tick, replayed from the scene and the recorded actions.
fn replay_states(sim: &Sim, world: &WorldState, records: &[TickRecord]) -> Result<Vec<WorldState>> {
    let mut state = world.clone();
    let mut out = Vec::with_capacity(records.len() + 1);
    for r in records {
        if state.snapshot_hash() != r.hash {
            return Err(SimError::Parse { what: "trace", detail: format!("state hash mismatch at tick {}", r.tick) }.into());
        }
        out.push(state.clone());
        for &a in &r.action {
            state.apply(sim.words.action_of(a).unwrap_or(Action::Noop));
        }
    }
    out.push(state);
    Ok(out)
}

/// Metrics are a pure function of the trace and the scripted scene it names.
pub fn episode_metrics(sim: &Sim, trace: &EpisodeTrace) -> Result<EpisodeMetrics> {
    let w = &sim.words;
    let s = sim.geo.speech;
    let (world, script) = sim.reset(trace.task, trace.seed)?;
    let rec = &trace.records;
    let states = replay_states(sim, &world, rec)?;
    let final_state = states.last().unwrap();
    let noop = w.action(Action::Noop);
    let speaks = |r: &TickRecord| r.text.first().is_some_and(|&t| t != w.silence());
    let moves = |r: &TickRecord| r.action.iter().any(|&a| a != noop);
    let first_text = rec.iter().find(|r| speaks(r)).map(|r| r.tick);
    let first_action = rec.iter().find(|r| moves(r)).map(|r| r.tick);
    let strip = |t: &[usize]| -> Vec<usize> { t.iter().copied().filter(|&x| x != w.tpad()).collect() };

    let mut m = EpisodeMetrics {
        task: trace.task,
        seed: trace.seed,
        ticks: rec.len(),
        success: false,
        dialogue_turn: None,
        action_turn: None,
        barge_in: None,
        silence_violations: None,
        answer_correct: None,
        answer_tokens: None,
        manip_done: None,
        rejected: None,
        reject_dimension: None,
    };

    if let Some(q) = &script.query {
        let end = q.utterance.end_tick(s);
        m.dialogue_turn = Some(Turn::from_first(first_text, end));
        let reply = rec.iter().find(|r| r.tick >= end && speaks(r));
        let (correct, tokens) = match reply {
            None => (false, (0, q.answer.len())),
            Some(r) => {
                let got = strip(&r.text);
                let mut accepted = Vec::new();
                for t in end..=r.tick {
                    let a = sim.expected_answer(&script, &states[t], end);
                    if !accepted.contains(&a) {
                        accepted.push(a);
                    }
                }
                let best = accepted
                    .iter()
                    .map(|a| a.iter().zip(&got).filter(|(x, y)| x == y).count())
                    .max()
                    .unwrap_or(0);
                (accepted.contains(&got), (best, accepted[0].len()))
            }
        };
        m.answer_correct = Some(correct);
        m.answer_tokens = Some(tokens);
    }
    if script.executable() && script.interrupt.is_none() {
        m.manip_done = Some(final_state.done(script.target));
    }
    match trace.task {
        TaskKind::Manip => {
            let end = script.instruction.as_ref().unwrap().end_tick(s);
            m.action_turn = Some(Turn::from_first(first_action, end));
        }
        TaskKind::BargeIn => {
            let end = script.interrupt.as_ref().unwrap().end_tick(s);
            let cancel = rec.iter().find(|r| r.tick >= end && r.text.contains(&w.t_cancelled())).map(|r| r.tick);
            let mut t = Turn::from_first(cancel, end);
            if let Some(c) = cancel {
                t.success &= rec[c..].iter().all(|r| !moves(r));
            }
            m.barge_in = Some(t);
        }
        TaskKind::SilenceControl => {
            m.silence_violations = Some(rec.iter().filter(|r| speaks(r)).count());
        }
        TaskKind::Defective => {
            let d = script.defect.unwrap();
            let rejects: Vec<_> = rec.iter().flat_map(|r| r.text.iter().filter_map(|&t| w.reject_kind(t))).collect();
            let still = !rec.iter().any(moves);
            m.rejected = Some(!rejects.is_empty() && still);
            m.reject_dimension = Some(rejects.first() == Some(&d) && still);
        }
        _ => {}
    }
    m.success = match trace.task {
        TaskKind::Echo | TaskKind::Qa | TaskKind::ContextVqa => m.answer_correct == Some(true),
        TaskKind::Manip => m.manip_done == Some(true),
        TaskKind::SpeakWhileAct => m.manip_done == Some(true) && m.answer_correct == Some(true),
        TaskKind::Defective => m.reject_dimension == Some(true),
        TaskKind::BargeIn => m.barge_in.is_some_and(|t| t.success),
        TaskKind::SilenceControl => m.silence_violations == Some(0),
    };
    Ok(m)
}

//! Closed-loop episodes and their traces.

use std::fmt::Write as _;

use super::script::{EpisodeScript, Sim, TaskKind};
use super::words::Action;
use super::world::{oracle_policy, WorldState};
use super::{Result, SimError};
use crate::codec::{Block, Mode};

pub const MAX_TICKS: usize = 60;

/// What an agent sees in one block. `world` is privileged and only the scripted agent reads it.
pub struct Observation<'a> {
    pub tick: usize,
    pub speech: &'a [usize],
    pub images: &'a [Vec<usize>],
    pub world: &'a WorldState,
    pub script: &'a EpisodeScript,
}

pub trait Agent {
    fn start(&mut self, _script: &EpisodeScript) -> std::result::Result<(), String> {
        Ok(())
    }

    /// Text and action payloads for the block.
    fn respond(&mut self, obs: &Observation<'_>) -> std::result::Result<(Vec<usize>, Vec<usize>), String>;
}

/// Emits the gold reply and the BFS policy's actions.
pub struct OracleAgent<'a> {
    pub sim: &'a Sim,
}

impl Agent for OracleAgent<'_> {
    fn respond(&mut self, obs: &Observation<'_>) -> std::result::Result<(Vec<usize>, Vec<usize>), String> {
        let sim = self.sim;
        let script = obs.script;
        let text = sim.text_payload(&sim.expected_answer(script, obs.world, obs.tick));
        let mut actions = sim.noop_chunk();
        if script.acting(obs.tick, sim.geo.speech) {
            let mut state = obs.world.clone();
            for slot in actions.iter_mut() {
                let a = oracle_policy(&state, script.target).unwrap_or(Action::Noop);
                state.apply(a);
                *slot = sim.words.action(a);
            }
        }
        Ok((text, actions))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Event {
    SpeechStarts,
    SpeechEnds,
    TextEmitted,
    ActionEmitted,
    TaskDone,
    Cancelled,
}

impl Event {
    pub const ALL: [Event; 6] = [
        Event::SpeechStarts,
        Event::SpeechEnds,
        Event::TextEmitted,
        Event::ActionEmitted,
        Event::TaskDone,
        Event::Cancelled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Event::SpeechStarts => "SPEECH_STARTS",
            Event::SpeechEnds => "SPEECH_ENDS",
            Event::TextEmitted => "TEXT_EMITTED",
            Event::ActionEmitted => "ACTION_EMITTED",
            Event::TaskDone => "TASK_DONE",
            Event::Cancelled => "CANCELLED",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TickRecord {
    pub tick: usize,
    /// Hash of the state observed at the start of the tick.
    pub hash: String,
    pub speech: Vec<usize>,
    pub images: Vec<Vec<usize>>,
    pub text: Vec<usize>,
    pub action: Vec<usize>,
    pub events: Vec<Event>,
    pub flags: Vec<&'static str>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeTrace {
    pub task: TaskKind,
    pub seed: u64,
    pub mode: Mode,
    pub prompt: Vec<usize>,
    pub records: Vec<TickRecord>,
}

fn ids(v: &[usize]) -> String {
    if v.is_empty() {
        return "-".into();
    }
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_ids(s: &str) -> Result<Vec<usize>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| t.parse().map_err(|_| SimError::Parse { what: "trace", detail: format!("bad token id `{t}`") }))
        .collect()
}

const FLAG_NAMES: [&str; 5] = ["BLOCKED", "NOTHING_TO_GRIP", "HAND_FULL", "NOTHING_HELD", "CELL_OCCUPIED"];

impl EpisodeTrace {
    pub fn to_text(&self) -> String {
        let mut out = format!("episode task={} seed={} mode={} prompt={}\n", self.task, self.seed, self.mode.name(), ids(&self.prompt));
        for r in &self.records {
            let images = if r.images.is_empty() { "-".to_string() } else { r.images.iter().map(|i| ids(i)).collect::<Vec<_>>().join("/") };
            let events = if r.events.is_empty() { "-".to_string() } else { r.events.iter().map(|e| e.name()).collect::<Vec<_>>().join("|") };
            let flags = if r.flags.is_empty() { "-".to_string() } else { r.flags.join("|") };
            let _ = writeln!(
                out,
                "tick={} hash={} speech={} image={} text={} action={} events={} flags={}",
                r.tick,
                r.hash,
                ids(&r.speech),
                images,
                ids(&r.text),
                ids(&r.action),
                events,
                flags
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |detail: String| SimError::Parse { what: "trace", detail };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines.next().ok_or_else(|| bad("empty trace".into()))?;
        let fields = key_values(head.strip_prefix("episode ").ok_or_else(|| bad("missing episode header".into()))?);
        let get = |k: &str| fields.iter().find(|(n, _)| *n == k).map(|(_, v)| *v).ok_or_else(|| bad(format!("missing field `{k}`")));
        let task: TaskKind = get("task")?.parse()?;
        let seed = get("seed")?.parse().map_err(|_| bad("bad seed".into()))?;
        let mode = match get("mode")? {
            "default" => Mode::Default,
            "speech-only" => Mode::SpeechOnly,
            m => return Err(bad(format!("unknown mode `{m}`"))),
        };
        let prompt = parse_ids(get("prompt")?)?;
        let mut records = Vec::new();
        for line in lines {
            let f = key_values(line);
            let get = |k: &str| f.iter().find(|(n, _)| *n == k).map(|(_, v)| *v).ok_or_else(|| bad(format!("missing field `{k}`")));
            let images = match get("image")? {
                "-" => Vec::new(),
                s => s.split('/').map(parse_ids).collect::<Result<_>>()?,
            };
            let events = match get("events")? {
                "-" => Vec::new(),
                s => s
                    .split('|')
                    .map(|e| Event::ALL.into_iter().find(|x| x.name() == e).ok_or_else(|| bad(format!("unknown event `{e}`"))))
                    .collect::<Result<_>>()?,
            };
            let flags = match get("flags")? {
                "-" => Vec::new(),
                s => s
                    .split('|')
                    .map(|e| FLAG_NAMES.into_iter().find(|x| *x == e).ok_or_else(|| bad(format!("unknown flag `{e}`"))))
                    .collect::<Result<_>>()?,
            };
            records.push(TickRecord {
                tick: get("tick")?.parse().map_err(|_| bad("bad tick".into()))?,
                hash: get("hash")?.to_string(),
                speech: parse_ids(get("speech")?)?,
                images,
                text: parse_ids(get("text")?)?,
                action: parse_ids(get("action")?)?,
                events,
                flags,
            });
        }
        Ok(Self { task, seed, mode, prompt, records })
    }

    /// Blocks in stream order.
    pub fn blocks(&self) -> Vec<Block> {
        self.records
            .iter()
            .map(|r| Block {
                tick: r.tick,
                speech: r.speech.clone(),
                images: r.images.clone(),
                text: r.text.clone(),
                action: r.action.clone(),
            })
            .collect()
    }

    pub fn first_event(&self, e: Event) -> Option<usize> {
        self.records.iter().find(|r| r.events.contains(&e)).map(|r| r.tick)
    }
}

fn key_values(line: &str) -> Vec<(&str, &str)> {
    line.split_whitespace().filter_map(|kv| kv.split_once('=')).collect()
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub script: EpisodeScript,
    pub trace: EpisodeTrace,
    pub final_state: WorldState,
    pub done_tick: Option<usize>,
}

impl Episode {
    pub fn blocks(&self) -> Vec<Block> {
        self.trace.blocks()
    }
}

impl Sim {
    /// Run `agent` in closed loop until the script's stop rule or [`MAX_TICKS`].
    pub fn run(&self, world: &WorldState, script: &EpisodeScript, agent: &mut dyn Agent) -> Result<Episode> {
        agent.start(script).map_err(|message| SimError::Agent { tick: 0, message })?;
        let s = self.geo.speech;
        let w = &self.words;
        let mut state = world.clone();
        let mut done_tick = None;
        let mut records = Vec::new();
        for tick in 0..MAX_TICKS {
            let speech = self.emit_speech(script, tick);
            let images = match script.mode() {
                Mode::Default => vec![self.observe(&state)],
                Mode::SpeechOnly => Vec::new(),
            };
            let obs = Observation { tick, speech: &speech, images: &images, world: &state, script };
            let (text, action) = agent.respond(&obs).map_err(|message| SimError::Agent { tick, message })?;
            let hash = state.snapshot_hash();

            let mut events = Vec::new();
            for u in script.utterances() {
                if u.tick == tick {
                    events.push(Event::SpeechStarts);
                }
                if u.end_tick(s) == tick {
                    events.push(Event::SpeechEnds);
                }
            }
            if text.first().is_some_and(|&t| t != w.silence()) {
                events.push(Event::TextEmitted);
            }
            if text.contains(&w.t_cancelled()) {
                events.push(Event::Cancelled);
            }
            let mut flags = Vec::new();
            let mut moved = false;
            for &id in &action {
                let a = w.action_of(id).unwrap_or(Action::Noop);
                moved |= a != Action::Noop;
                if let Some(f) = state.apply(a) {
                    flags.push(f.name());
                }
            }
            if moved {
                events.push(Event::ActionEmitted);
            }
            if done_tick.is_none() && !state.objects.is_empty() && script.executable() && state.done(script.target) {
                done_tick = Some(tick);
                events.push(Event::TaskDone);
            }
            records.push(TickRecord { tick, hash, speech, images, text, action, events, flags });
            if script.should_stop(tick, done_tick) {
                break;
            }
        }
        let trace = EpisodeTrace {
            task: script.task,
            seed: script.seed,
            mode: script.mode(),
            prompt: script.prompt.clone(),
            records,
        };
        Ok(Episode { script: script.clone(), trace, final_state: state, done_tick })
    }

    /// Scripted rollout of `(task, seed)`.
    pub fn gold(&self, task: TaskKind, seed: u64) -> Result<Episode> {
        let (world, script) = self.reset(task, seed)?;
        self.run(&world, &script, &mut OracleAgent { sim: self })
    }
}

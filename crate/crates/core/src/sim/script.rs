//! Episode scripts: what the user says and when, and what the right reply is.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::words::{Action, Color, Defect, Status, Words, CELL_SPAN, GRID, INTERRUPTS, N_ECHO, N_GIB, N_KEYS, N_OBJECT_IDS};
use super::world::{oracle_policy, Cell, Object, WorldState};
use super::{Result, SimError};
use crate::codec::Mode;
use crate::model::{BlockGeometry, ModelConfig, VocabLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Echo,
    Qa,
    Manip,
    SpeakWhileAct,
    ContextVqa,
    Defective,
    BargeIn,
    SilenceControl,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::Echo,
        TaskKind::Qa,
        TaskKind::Manip,
        TaskKind::SpeakWhileAct,
        TaskKind::ContextVqa,
        TaskKind::Defective,
        TaskKind::BargeIn,
        TaskKind::SilenceControl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Echo => "ECHO",
            TaskKind::Qa => "QA",
            TaskKind::Manip => "MANIP",
            TaskKind::SpeakWhileAct => "SPEAK_WHILE_ACT",
            TaskKind::ContextVqa => "CONTEXT_VQA",
            TaskKind::Defective => "DEFECTIVE",
            TaskKind::BargeIn => "BARGE_IN",
            TaskKind::SilenceControl => "SILENCE_CONTROL",
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            TaskKind::Echo | TaskKind::Qa => Mode::SpeechOnly,
            _ => Mode::Default,
        }
    }

    /// Index into the prompt words.
    pub fn prompt_index(self) -> usize {
        match self {
            TaskKind::Echo => 1,
            TaskKind::Qa => 2,
            _ => 0,
        }
    }

    /// Episodes that run until the object reaches the goal.
    pub fn waits_for_done(self) -> bool {
        matches!(self, TaskKind::Manip | TaskKind::SpeakWhileAct | TaskKind::SilenceControl)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == norm)
            .ok_or_else(|| SimError::UnknownTask(s.to_string()))
    }
}

/// Speech starting at `tick`, streamed `S` tokens per tick.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Utterance {
    pub tick: usize,
    pub tokens: Vec<usize>,
}

impl Utterance {
    /// Tick carrying the last token.
    pub fn end_tick(&self, s: usize) -> usize {
        self.tick + self.tokens.len().div_ceil(s).max(1) - 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Query {
    pub utterance: Utterance,
    /// Reply for tasks whose answer is fixed when the script is drawn.
    pub answer: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EpisodeScript {
    pub task: TaskKind,
    pub seed: u64,
    pub prompt: Vec<usize>,
    pub instruction: Option<Utterance>,
    pub query: Option<Query>,
    pub interrupt: Option<Utterance>,
    /// Speech not addressed to the agent.
    pub chatter: Option<Utterance>,
    pub defect: Option<Defect>,
    /// Object index the instruction refers to.
    pub target: usize,
    pub min_end: usize,
    /// Tick in which the scripted rollout completes the task.
    pub done_tick: Option<usize>,
}

impl EpisodeScript {
    pub fn mode(&self) -> Mode {
        self.task.mode()
    }

    pub fn utterances(&self) -> Vec<&Utterance> {
        let mut out: Vec<&Utterance> = [self.instruction.as_ref(), self.query.as_ref().map(|q| &q.utterance), self.interrupt.as_ref(), self.chatter.as_ref()]
            .into_iter()
            .flatten()
            .collect();
        out.sort_by_key(|u| u.tick);
        out
    }

    pub fn executable(&self) -> bool {
        self.instruction.is_some() && self.defect.is_none()
    }

    /// Whether the scripted agent moves during `tick`.
    pub fn acting(&self, tick: usize, s: usize) -> bool {
        let Some(instr) = &self.instruction else {
            return false;
        };
        self.defect.is_none() && tick >= instr.end_tick(s) && self.interrupt.as_ref().is_none_or(|i| tick < i.end_tick(s))
    }

    pub fn should_stop(&self, tick: usize, done_tick: Option<usize>) -> bool {
        if tick < self.min_end {
            return false;
        }
        !self.task.waits_for_done() || done_tick.is_some_and(|d| d < tick)
    }
}

/// splitmix64 finaliser.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream seed for `(seed, salt, index)`.
pub fn derive_seed(seed: u64, salt: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ mix64(salt)).wrapping_add(index))
}

/// Fixed key→value lookup table for QA.
pub const VALUE_TABLE: [usize; N_KEYS] = [3, 6, 0, 5, 1, 7, 2, 4];

const ATTEMPTS: usize = 1000;

/// The world's rules bound to a vocabulary and block geometry.
#[derive(Clone, Debug)]
pub struct Sim {
    pub words: Words,
    pub geo: BlockGeometry,
}

impl Sim {
    pub fn new(layout: VocabLayout, geo: BlockGeometry) -> Result<Self> {
        let words = Words::new(layout).map_err(SimError::Config)?;
        if geo.text < 5 || geo.action == 0 || geo.speech == 0 {
            return Err(SimError::Config(format!("block geometry {geo:?} is too small for the scripted tasks")));
        }
        if geo.n_img != 1 || geo.image != 4 {
            return Err(SimError::Config("the world renders exactly one 4-token image per block".into()));
        }
        Ok(Self { words, geo })
    }

    pub fn for_model(config: &ModelConfig) -> Result<Self> {
        Self::new(config.layout(), config.block)
    }

    pub fn observe(&self, state: &WorldState) -> Vec<usize> {
        super::world::observe_image(state, &self.words)
    }

    /// Draw a scene and a script. Deterministic in `(task, seed)`.
    pub fn reset(&self, task: TaskKind, seed: u64) -> Result<(WorldState, EpisodeScript)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7a5c, task as u64));
        for _ in 0..ATTEMPTS {
            if let Some(out) = self.try_reset(task, seed, &mut rng) {
                return Ok(out);
            }
        }
        Err(SimError::NoScene { task: task.name(), attempts: ATTEMPTS })
    }

    fn try_reset(&self, task: TaskKind, seed: u64, rng: &mut ChaCha8Rng) -> Option<(WorldState, EpisodeScript)> {
        let w = &self.words;
        let s = self.geo.speech;
        let lead = rng.gen_range(0..=2);
        let mut script = EpisodeScript {
            task,
            seed,
            prompt: vec![w.prompt(task.prompt_index())],
            instruction: None,
            query: None,
            interrupt: None,
            chatter: None,
            defect: None,
            target: 0,
            min_end: 0,
            done_tick: None,
        };
        match task {
            TaskKind::Echo => {
                let n = rng.gen_range(1..=5);
                let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..N_ECHO)).collect();
                let u = Utterance { tick: lead, tokens: idx.iter().map(|&i| w.w_echo(i)).collect() };
                script.min_end = u.end_tick(s) + 1;
                script.query = Some(Query { utterance: u, answer: idx.iter().map(|&i| w.t_echo(i)).collect() });
                return Some((empty_world(), script));
            }
            TaskKind::Qa => {
                let k = rng.gen_range(0..N_KEYS);
                let u = Utterance { tick: lead, tokens: vec![w.w_what(), w.w_key(k)] };
                script.min_end = u.end_tick(s) + 1;
                script.query = Some(Query { utterance: u, answer: vec![w.t_val(VALUE_TABLE[k])] });
                return Some((empty_world(), script));
            }
            _ => {}
        }

        let defect = (task == TaskKind::Defective).then(|| *Defect::ALL.choose(rng).unwrap());
        let walled = defect == Some(Defect::Motion) && rng.gen_bool(0.5);
        let world = random_scene(rng, walled);
        let obj = &world.objects[0];
        let (mut color, mut id, mut cell) = (obj.color, obj.id, (world.goal.0, world.goal.1));
        match defect {
            Some(Defect::Visual) => {
                let others: Vec<Color> = Color::ALL.into_iter().filter(|&c| c != obj.color).collect();
                color = *others.choose(rng).unwrap();
            }
            Some(Defect::Semantic) => {
                let others: Vec<usize> = (1..=N_OBJECT_IDS).filter(|&k| k != obj.id).collect();
                id = *others.choose(rng).unwrap();
            }
            Some(Defect::Motion) if !walled => {
                let other = rng.gen_range(0..CELL_SPAN);
                cell = if rng.gen_bool(0.5) { (GRID, other) } else { (other, GRID) };
            }
            _ => {}
        }
        let tokens = if defect == Some(Defect::OutOfContext) {
            (0..5).map(|_| w.w_gib(rng.gen_range(0..N_GIB))).collect()
        } else {
            vec![w.w_move(), w.w_color(color), w.w_obj(id), w.w_to(), w.w_cell(cell.0, cell.1)]
        };
        let instr = Utterance { tick: lead, tokens };
        let t_i = instr.end_tick(s);
        script.instruction = Some(instr);
        script.defect = defect;
        if let Some(d) = defect {
            debug_assert!(!self.instruction_matches(&world, script.instruction.as_ref().unwrap()) || d == Defect::Motion);
            script.min_end = t_i + 3;
            return Some((world, script));
        }

        let (done, states) = self.dry_run(&world, &script)?;
        script.done_tick = Some(done);
        let near = |rng: &mut ChaCha8Rng| -> Option<usize> {
            let hi = (t_i + 8).min(done.checked_sub(1)?);
            (t_i + 2 <= hi).then(|| rng.gen_range(t_i + 2..=hi))
        };
        match task {
            TaskKind::Manip => script.min_end = t_i + 1,
            TaskKind::SpeakWhileAct => {
                let q = near(rng)?;
                let k = rng.gen_range(0..N_KEYS);
                let u = Utterance { tick: q, tokens: vec![w.w_what(), w.w_key(k)] };
                script.min_end = u.end_tick(s) + 1;
                script.query = Some(Query { utterance: u, answer: vec![w.t_val(VALUE_TABLE[k])] });
            }
            TaskKind::BargeIn => {
                let q = near(rng)?;
                let u = Utterance { tick: q, tokens: vec![w.w_interrupt(rng.gen_range(0..INTERRUPTS.len()))] };
                script.min_end = u.end_tick(s) + 2;
                script.interrupt = Some(u);
            }
            TaskKind::SilenceControl => {
                let q = near(rng)?;
                let n = rng.gen_range(1..=3);
                let u = Utterance { tick: q, tokens: (0..n).map(|_| w.w_echo(rng.gen_range(0..N_ECHO))).collect() };
                script.min_end = t_i + 1;
                script.chatter = Some(u);
            }
            TaskKind::ContextVqa => {
                let hi = (t_i + 30).min(done + 2);
                let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); 3];
                for q in t_i + 2..=hi {
                    by_class[states[q.min(states.len() - 1)] as usize].push(q);
                }
                if by_class.iter().any(Vec::is_empty) {
                    return None;
                }
                let class = rng.gen_range(0..3);
                let q = *by_class[class].choose(rng).unwrap();
                let u = Utterance { tick: q, tokens: vec![w.w_where(), w.w_obj(world.objects[0].id)] };
                script.min_end = u.end_tick(s) + 1;
                script.query = Some(Query { utterance: u, answer: vec![w.t_status(Status::ALL[class])] });
            }
            _ => unreachable!(),
        }
        Some((world, script))
    }

    fn instruction_matches(&self, world: &WorldState, u: &Utterance) -> bool {
        let w = &self.words;
        let o = &world.objects[0];
        u.tokens == [w.w_move(), w.w_color(o.color), w.w_obj(o.id), w.w_to(), w.w_cell(world.goal.0, world.goal.1)]
    }

    /// Scripted rollout: completion tick and the object status at the start of every tick.
    fn dry_run(&self, world: &WorldState, script: &EpisodeScript) -> Option<(usize, Vec<Status>)> {
        let mut state = world.clone();
        let mut states = Vec::new();
        for tick in 0..super::rollout::MAX_TICKS {
            states.push(state.status(script.target));
            if script.acting(tick, self.geo.speech) {
                for _ in 0..self.geo.action {
                    let a = oracle_policy(&state, script.target).ok()?;
                    state.apply(a);
                }
            }
            if state.done(script.target) {
                let done = tick;
                for _ in 0..=32 {
                    states.push(Status::AtGoal);
                }
                return Some((done, states));
            }
        }
        None
    }

    /// Speech tokens of one block, padded to `S`.
    pub fn emit_speech(&self, script: &EpisodeScript, tick: usize) -> Vec<usize> {
        emit_speech(script, tick, self.geo.speech, self.words.speech_pad())
    }

    /// Reply due in block `tick` given the state observed at its start. Empty means silence.
    pub fn expected_answer(&self, script: &EpisodeScript, state: &WorldState, tick: usize) -> Vec<usize> {
        let s = self.geo.speech;
        let w = &self.words;
        if let (Some(d), Some(instr)) = (script.defect, &script.instruction) {
            if instr.end_tick(s) == tick {
                return vec![w.t_reject(d)];
            }
        }
        if let Some(i) = &script.interrupt {
            if i.end_tick(s) == tick {
                return vec![w.t_cancelled()];
            }
        }
        if let Some(q) = &script.query {
            if q.utterance.end_tick(s) == tick {
                if script.task == TaskKind::ContextVqa {
                    return vec![w.t_status(state.status(script.target))];
                }
                return q.answer.clone();
            }
        }
        Vec::new()
    }

    /// Text payload of a block: the reply padded to `T`, or a lone silence.
    pub fn text_payload(&self, answer: &[usize]) -> Vec<usize> {
        if answer.is_empty() {
            return vec![self.words.silence()];
        }
        let mut out = answer.to_vec();
        out.resize(self.geo.text.max(answer.len()), self.words.tpad());
        out
    }

    pub fn noop_chunk(&self) -> Vec<usize> {
        vec![self.words.action(Action::Noop); self.geo.action]
    }
}

/// Stream the script's utterances `s` tokens per tick.
pub fn emit_speech(script: &EpisodeScript, tick: usize, s: usize, pad: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(s);
    for u in script.utterances() {
        if tick < u.tick {
            continue;
        }
        let from = (tick - u.tick) * s;
        if from < u.tokens.len() {
            out.extend_from_slice(&u.tokens[from..(from + s).min(u.tokens.len())]);
            break;
        }
    }
    out.resize(s, pad);
    out
}

fn empty_world() -> WorldState {
    WorldState {
        width: GRID,
        height: GRID,
        objects: Vec::new(),
        gripper: (0, 0),
        held: None,
        walls: BTreeSet::new(),
        goal: (0, 0),
    }
}

fn random_cell(rng: &mut ChaCha8Rng) -> Cell {
    (rng.gen_range(0..GRID), rng.gen_range(0..GRID))
}

fn random_scene(rng: &mut ChaCha8Rng, walled: bool) -> WorldState {
    let goal = random_cell(rng);
    let mut walls = BTreeSet::new();
    if walled {
        let (r, c) = (goal.0 as i64, goal.1 as i64);
        for (nr, nc) in [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)] {
            if nr >= 0 && nc >= 0 && (nr as usize) < GRID && (nc as usize) < GRID {
                walls.insert((nr as usize, nc as usize));
            }
        }
    }
    let free = |c: &Cell| *c != goal && !walls.contains(c);
    let cells: Vec<Cell> = (0..GRID).flat_map(|r| (0..GRID).map(move |c| (r, c))).filter(free).collect();
    let gripper = *cells.choose(rng).unwrap();
    let cell = *cells.choose(rng).unwrap();
    let color = *Color::ALL.choose(rng).unwrap();
    let id = rng.gen_range(1..=N_OBJECT_IDS);
    WorldState {
        width: GRID,
        height: GRID,
        objects: vec![Object { id, color, cell: Some(cell) }],
        gripper,
        held: None,
        walls,
        goal,
    }
}

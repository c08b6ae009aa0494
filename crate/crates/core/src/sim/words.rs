//! Symbolic vocabularies of the micro-world laid onto the model's id ranges.

use crate::model::vocab::{Modality, VocabLayout, VocabSizes};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Blue,
    Green,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Blue, Color::Green];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "RED",
            Color::Blue => "BLUE",
            Color::Green => "GREEN",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Noop,
    Up,
    Down,
    Left,
    Right,
    Grip,
    Release,
}

impl Action {
    pub const ALL: [Action; 7] = [
        Action::Noop,
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Grip,
        Action::Release,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Action::Noop => "NOOP",
            Action::Up => "UP",
            Action::Down => "DOWN",
            Action::Left => "LEFT",
            Action::Right => "RIGHT",
            Action::Grip => "GRIP",
            Action::Release => "RELEASE",
        }
    }
}

/// Where an object is relative to the task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Status {
    OnTable,
    InGripper,
    AtGoal,
}

impl Status {
    pub const ALL: [Status; 3] = [Status::OnTable, Status::InGripper, Status::AtGoal];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Defect {
    Visual,
    Semantic,
    Motion,
    OutOfContext,
}

impl Defect {
    pub const ALL: [Defect; 4] = [Defect::Visual, Defect::Semantic, Defect::Motion, Defect::OutOfContext];

    pub fn name(self) -> &'static str {
        match self {
            Defect::Visual => "VISUAL",
            Defect::Semantic => "SEMANTIC",
            Defect::Motion => "MOTION",
            Defect::OutOfContext => "OOC",
        }
    }
}

pub const INTERRUPTS: [&str; 10] = [
    "STOP-NOW",
    "HOLD-ON",
    "PAUSE-HERE",
    "WAIT-A-SECOND",
    "FREEZE",
    "STOP-DOING",
    "HOLD-IT",
    "NOT-YET",
    "PAUSE-ACTION",
    "DO-NOT-MOVE",
];

pub const N_OBJECT_IDS: usize = 3;
/// Cell words cover one row and column past the 5×5 grid so out-of-bounds targets can be named.
pub const CELL_SPAN: usize = 6;
pub const N_KEYS: usize = 8;
pub const N_VALUES: usize = 8;
pub const N_ECHO: usize = 10;
pub const N_GIB: usize = 8;
pub const GRID: usize = 5;
/// Displacement codes span −4..=4 on each axis.
pub const N_DISP: usize = 81;

mod sp {
    pub const PAD: usize = 0;
    pub const MOVE: usize = 1;
    pub const TO: usize = 2;
    pub const WHERE: usize = 3;
    pub const WHAT: usize = 4;
    pub const COLOR: usize = 5;
    pub const OBJ: usize = 8;
    pub const CELL: usize = 11;
    pub const KEY: usize = CELL + super::CELL_SPAN * super::CELL_SPAN;
    pub const INTERRUPT: usize = KEY + super::N_KEYS;
    pub const ECHO: usize = INTERRUPT + 10;
    pub const GIB: usize = ECHO + super::N_ECHO;
    pub const END: usize = GIB + super::N_GIB;
}

mod tx {
    pub const SILENCE: usize = 0;
    pub const TPAD: usize = 1;
    pub const STATUS: usize = 2;
    pub const CANCELLED: usize = 5;
    pub const REJECT: usize = 6;
    pub const VAL: usize = 10;
    pub const ECHO: usize = VAL + super::N_VALUES;
    pub const END: usize = ECHO + super::N_ECHO;
}

mod im {
    pub const GRIPPER: usize = 0;
    pub const OBJECT: usize = 25;
    pub const OBJ_NONE: usize = OBJECT + 27;
    pub const OBJ_DISP: usize = OBJ_NONE + 1;
    pub const OBJ_DISP_NONE: usize = OBJ_DISP + super::N_DISP;
    pub const GOAL_DISP: usize = OBJ_DISP_NONE + 1;
    pub const GOAL_NONE: usize = GOAL_DISP + super::N_DISP;
    pub const GOAL_BLOCKED: usize = GOAL_NONE + 1;
    pub const END: usize = GOAL_BLOCKED + 1;
}

pub const PROMPTS: [&str; 3] = ["P-DUPLEX", "P-ASR", "P-QA"];

/// Vocabulary sizes the world needs.
pub fn required_sizes() -> VocabSizes {
    VocabSizes {
        prompt: PROMPTS.len(),
        speech: sp::END,
        image: im::END,
        text: tx::END,
        action: Action::ALL.len(),
    }
}

/// Maps world concepts to global token ids.
#[derive(Clone, Debug)]
pub struct Words {
    layout: VocabLayout,
    speech0: usize,
    text0: usize,
    image0: usize,
    action0: usize,
    prompt0: usize,
}

impl Words {
    pub fn new(layout: VocabLayout) -> Result<Self, String> {
        let need = required_sizes();
        let have = layout.sizes();
        if have.prompt < need.prompt
            || have.speech < need.speech
            || have.image < need.image
            || have.text < need.text
            || have.action < need.action
        {
            return Err(format!("vocabulary {have:?} is smaller than the world needs ({need:?})"));
        }
        Ok(Self {
            speech0: layout.payload(Modality::Speech).start,
            text0: layout.payload(Modality::Text).start,
            image0: layout.payload(Modality::Image).start,
            action0: layout.payload(Modality::Action).start,
            prompt0: layout.payload(Modality::Prompt).start,
            layout,
        })
    }

    pub fn layout(&self) -> &VocabLayout {
        &self.layout
    }

    pub fn speech_pad(&self) -> usize {
        self.speech0 + sp::PAD
    }
    pub fn w_move(&self) -> usize {
        self.speech0 + sp::MOVE
    }
    pub fn w_to(&self) -> usize {
        self.speech0 + sp::TO
    }
    pub fn w_where(&self) -> usize {
        self.speech0 + sp::WHERE
    }
    pub fn w_what(&self) -> usize {
        self.speech0 + sp::WHAT
    }
    pub fn w_color(&self, c: Color) -> usize {
        self.speech0 + sp::COLOR + c as usize
    }
    /// `k` in `1..=3`.
    pub fn w_obj(&self, k: usize) -> usize {
        debug_assert!((1..=N_OBJECT_IDS).contains(&k));
        self.speech0 + sp::OBJ + k - 1
    }
    pub fn w_cell(&self, r: usize, c: usize) -> usize {
        debug_assert!(r < CELL_SPAN && c < CELL_SPAN);
        self.speech0 + sp::CELL + r * CELL_SPAN + c
    }
    pub fn w_key(&self, k: usize) -> usize {
        self.speech0 + sp::KEY + k
    }
    pub fn w_interrupt(&self, i: usize) -> usize {
        self.speech0 + sp::INTERRUPT + i
    }
    pub fn w_echo(&self, i: usize) -> usize {
        self.speech0 + sp::ECHO + i
    }
    pub fn w_gib(&self, i: usize) -> usize {
        self.speech0 + sp::GIB + i
    }
    pub fn is_interrupt(&self, id: usize) -> bool {
        (self.speech0 + sp::INTERRUPT..self.speech0 + sp::ECHO).contains(&id)
    }
    pub fn echo_index(&self, id: usize) -> Option<usize> {
        (self.speech0 + sp::ECHO..self.speech0 + sp::GIB)
            .contains(&id)
            .then(|| id - self.speech0 - sp::ECHO)
    }

    pub fn silence(&self) -> usize {
        self.text0 + tx::SILENCE
    }
    pub fn tpad(&self) -> usize {
        self.text0 + tx::TPAD
    }
    pub fn t_status(&self, s: Status) -> usize {
        self.text0 + tx::STATUS + s as usize
    }
    pub fn t_cancelled(&self) -> usize {
        self.text0 + tx::CANCELLED
    }
    pub fn t_reject(&self, d: Defect) -> usize {
        self.text0 + tx::REJECT + d as usize
    }
    pub fn t_val(&self, v: usize) -> usize {
        self.text0 + tx::VAL + v
    }
    pub fn t_echo(&self, i: usize) -> usize {
        self.text0 + tx::ECHO + i
    }
    pub fn reject_kind(&self, id: usize) -> Option<Defect> {
        Defect::ALL.into_iter().find(|&d| self.t_reject(d) == id)
    }

    pub fn prompt(&self, i: usize) -> usize {
        self.prompt0 + i
    }

    pub fn action(&self, a: Action) -> usize {
        self.action0 + a as usize
    }
    pub fn action_of(&self, id: usize) -> Option<Action> {
        id.checked_sub(self.action0).and_then(|i| Action::ALL.get(i).copied())
    }

    pub fn img_gripper(&self, r: usize, c: usize) -> usize {
        self.image0 + im::GRIPPER + r * GRID + c
    }
    pub fn img_object(&self, s: Status, color: Color, id: usize) -> usize {
        self.image0 + im::OBJECT + (s as usize * 3 + color as usize) * N_OBJECT_IDS + id - 1
    }
    pub fn img_object_none(&self) -> usize {
        self.image0 + im::OBJ_NONE
    }
    pub fn img_obj_disp(&self, dr: i32, dc: i32) -> usize {
        self.image0 + im::OBJ_DISP + disp_code(dr, dc)
    }
    pub fn img_obj_disp_none(&self) -> usize {
        self.image0 + im::OBJ_DISP_NONE
    }
    pub fn img_goal_disp(&self, dr: i32, dc: i32) -> usize {
        self.image0 + im::GOAL_DISP + disp_code(dr, dc)
    }
    pub fn img_goal_none(&self) -> usize {
        self.image0 + im::GOAL_NONE
    }
    pub fn img_goal_blocked(&self) -> usize {
        self.image0 + im::GOAL_BLOCKED
    }

    /// Human-readable token name.
    pub fn name(&self, id: usize) -> String {
        let l = &self.layout;
        if let Some((m, open)) = l.boundary_kind(id) {
            let c = m.letter().to_ascii_lowercase();
            return if open { format!("<bo{c}>") } else { format!("<eo{c}>") };
        }
        let Some(m) = l.modality_of(id) else {
            return format!("#{id}");
        };
        let i = id - l.payload(m).start;
        match m {
            Modality::Prompt => PROMPTS.get(i).map_or(format!("P?{i}"), |s| s.to_string()),
            Modality::Speech => speech_name(i),
            Modality::Text => text_name(i),
            Modality::Action => Action::ALL.get(i).map_or(format!("A?{i}"), |a| a.name().to_string()),
            Modality::Image => image_name(i),
        }
    }
}

fn disp_code(dr: i32, dc: i32) -> usize {
    debug_assert!(dr.abs() <= 4 && dc.abs() <= 4);
    ((dr + 4) * 9 + (dc + 4)) as usize
}

fn disp_name(code: usize) -> String {
    format!("{:+}{:+}", code as i32 / 9 - 4, code as i32 % 9 - 4)
}

fn speech_name(i: usize) -> String {
    match i {
        sp::PAD => "_".into(),
        sp::MOVE => "MOVE".into(),
        sp::TO => "TO".into(),
        sp::WHERE => "WHERE".into(),
        sp::WHAT => "WHAT".into(),
        i if i < sp::OBJ => Color::ALL[i - sp::COLOR].name().into(),
        i if i < sp::CELL => format!("OBJ-{}", i - sp::OBJ + 1),
        i if i < sp::KEY => format!("CELL-{}-{}", (i - sp::CELL) / CELL_SPAN, (i - sp::CELL) % CELL_SPAN),
        i if i < sp::INTERRUPT => format!("KEY-{}", i - sp::KEY),
        i if i < sp::ECHO => INTERRUPTS[i - sp::INTERRUPT].into(),
        i if i < sp::GIB => format!("W-{}", i - sp::ECHO),
        i if i < sp::END => format!("GIB-{}", i - sp::GIB),
        i => format!("S?{i}"),
    }
}

fn text_name(i: usize) -> String {
    match i {
        tx::SILENCE => "<silence>".into(),
        tx::TPAD => "_".into(),
        i if i < tx::CANCELLED => ["ON-TABLE", "IN-GRIPPER", "AT-GOAL"][i - tx::STATUS].into(),
        tx::CANCELLED => "CANCELLED".into(),
        i if i < tx::VAL => format!("REJECT-{}", Defect::ALL[i - tx::REJECT].name()),
        i if i < tx::ECHO => format!("VAL-{}", i - tx::VAL),
        i if i < tx::END => format!("T-W-{}", i - tx::ECHO),
        i => format!("T?{i}"),
    }
}

fn image_name(i: usize) -> String {
    match i {
        i if i < im::OBJECT => format!("grip@{},{}", i / GRID, i % GRID),
        i if i < im::OBJ_NONE => {
            let j = i - im::OBJECT;
            let s = ["table", "held", "goal"][j / 9];
            format!("obj{}:{}:{}", j % 3 + 1, Color::ALL[(j / 3) % 3].name(), s)
        }
        im::OBJ_NONE => "obj:none".into(),
        i if i < im::OBJ_DISP_NONE => format!("to-obj{}", disp_name(i - im::OBJ_DISP)),
        im::OBJ_DISP_NONE => "to-obj:none".into(),
        i if i < im::GOAL_NONE => format!("to-goal{}", disp_name(i - im::GOAL_DISP)),
        im::GOAL_NONE => "to-goal:none".into(),
        im::GOAL_BLOCKED => "to-goal:blocked".into(),
        i => format!("I?{i}"),
    }
}

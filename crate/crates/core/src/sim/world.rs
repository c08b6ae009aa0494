//! Grid world dynamics, image encoding and the scripted policy.

use std::collections::{BTreeSet, VecDeque};

use sha2::{Digest, Sha256};

use super::words::{Action, Color, Status, Words, GRID};

pub type Cell = (usize, usize);

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Object {
    pub id: usize,
    pub color: Color,
    /// `None` while held.
    pub cell: Option<Cell>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct WorldState {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<Object>,
    pub gripper: Cell,
    /// Index into `objects`.
    pub held: Option<usize>,
    pub walls: BTreeSet<Cell>,
    pub goal: Cell,
}

/// Why a step did nothing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Illegal {
    Blocked,
    NothingToGrip,
    HandFull,
    NothingHeld,
    CellOccupied,
}

impl Illegal {
    pub fn name(self) -> &'static str {
        match self {
            Illegal::Blocked => "BLOCKED",
            Illegal::NothingToGrip => "NOTHING_TO_GRIP",
            Illegal::HandFull => "HAND_FULL",
            Illegal::NothingHeld => "NOTHING_HELD",
            Illegal::CellOccupied => "CELL_OCCUPIED",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Unreachable;

impl std::fmt::Display for Unreachable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("goal unreachable")
    }
}

impl std::error::Error for Unreachable {}

impl WorldState {
    pub fn in_bounds(&self, r: i64, c: i64) -> bool {
        r >= 0 && c >= 0 && (r as usize) < self.height && (c as usize) < self.width
    }

    pub fn object_at(&self, cell: Cell) -> Option<usize> {
        self.objects.iter().position(|o| o.cell == Some(cell))
    }

    pub fn status(&self, obj: usize) -> Status {
        if self.held == Some(obj) {
            Status::InGripper
        } else if self.objects[obj].cell == Some(self.goal) {
            Status::AtGoal
        } else {
            Status::OnTable
        }
    }

    pub fn done(&self, obj: usize) -> bool {
        self.status(obj) == Status::AtGoal
    }

    /// Physical invariants: cells in bounds, at most one object per cell, held object has no cell.
    pub fn check(&self) -> Result<(), String> {
        if self.gripper.0 >= self.height || self.gripper.1 >= self.width {
            return Err(format!("gripper out of bounds at {:?}", self.gripper));
        }
        let mut seen = BTreeSet::new();
        for (i, o) in self.objects.iter().enumerate() {
            match (o.cell, self.held == Some(i)) {
                (Some(_), true) => return Err(format!("held object {i} has a cell")),
                (None, false) => return Err(format!("object {i} has no cell and is not held")),
                (Some(c), false) => {
                    if c.0 >= self.height || c.1 >= self.width {
                        return Err(format!("object {i} out of bounds"));
                    }
                    if !seen.insert(c) {
                        return Err(format!("two objects share {c:?}"));
                    }
                }
                (None, true) => {}
            }
        }
        Ok(())
    }

    pub fn step(&self, action: Action) -> (WorldState, Option<Illegal>) {
        let mut next = self.clone();
        let flag = next.apply(action);
        (next, flag)
    }

    /// In-place [`WorldState::step`].
    pub fn apply(&mut self, action: Action) -> Option<Illegal> {
        let (r, c) = (self.gripper.0 as i64, self.gripper.1 as i64);
        let target = match action {
            Action::Noop => return None,
            Action::Up => (r - 1, c),
            Action::Down => (r + 1, c),
            Action::Left => (r, c - 1),
            Action::Right => (r, c + 1),
            Action::Grip => {
                if self.held.is_some() {
                    return Some(Illegal::HandFull);
                }
                let Some(i) = self.object_at(self.gripper) else {
                    return Some(Illegal::NothingToGrip);
                };
                self.objects[i].cell = None;
                self.held = Some(i);
                return None;
            }
            Action::Release => {
                let Some(i) = self.held else {
                    return Some(Illegal::NothingHeld);
                };
                if self.object_at(self.gripper).is_some() {
                    return Some(Illegal::CellOccupied);
                }
                self.objects[i].cell = Some(self.gripper);
                self.held = None;
                return None;
            }
        };
        if !self.in_bounds(target.0, target.1) {
            return Some(Illegal::Blocked);
        }
        let cell = (target.0 as usize, target.1 as usize);
        if self.walls.contains(&cell) {
            return Some(Illegal::Blocked);
        }
        self.gripper = cell;
        None
    }

    /// Short content hash for traces.
    pub fn snapshot_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{self:?}").as_bytes());
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn reachable(&self, from: Cell, to: Cell) -> bool {
        self.distances(to)[from.0 * self.width + from.1].is_some()
    }

    /// BFS distances to `target` over wall-free cells.
    fn distances(&self, target: Cell) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.width * self.height];
        if self.walls.contains(&target) {
            return dist;
        }
        let mut queue = VecDeque::from([target]);
        dist[target.0 * self.width + target.1] = Some(0);
        while let Some((r, c)) = queue.pop_front() {
            let d = dist[r * self.width + c].unwrap_or(0);
            for (nr, nc) in neighbours(r as i64, c as i64) {
                if !self.in_bounds(nr, nc) {
                    continue;
                }
                let n = (nr as usize, nc as usize);
                let slot = &mut dist[n.0 * self.width + n.1];
                if slot.is_none() && !self.walls.contains(&n) {
                    *slot = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    fn move_towards(&self, target: Cell) -> Result<Action, Unreachable> {
        let dist = self.distances(target);
        let here = dist[self.gripper.0 * self.width + self.gripper.1].ok_or(Unreachable)?;
        if here == 0 {
            return Ok(Action::Noop);
        }
        let (r, c) = (self.gripper.0 as i64, self.gripper.1 as i64);
        for (a, (nr, nc)) in MOVES.into_iter().zip(neighbours(r, c)) {
            if self.in_bounds(nr, nc) && dist[nr as usize * self.width + nc as usize] == Some(here - 1) {
                return Ok(a);
            }
        }
        Err(Unreachable)
    }
}

const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

fn neighbours(r: i64, c: i64) -> [(i64, i64); 4] {
    [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
}

/// Next action that brings object `obj` to the goal cell.
pub fn oracle_policy(state: &WorldState, obj: usize) -> Result<Action, Unreachable> {
    if state.done(obj) {
        return Ok(Action::Noop);
    }
    if state.held == Some(obj) {
        if state.gripper == state.goal {
            return Ok(Action::Release);
        }
        return state.move_towards(state.goal);
    }
    let Some(cell) = state.objects[obj].cell else {
        return Err(Unreachable);
    };
    if !state.reachable(cell, state.goal) {
        return Err(Unreachable);
    }
    if state.held.is_some() {
        return Err(Unreachable);
    }
    if state.gripper == cell {
        return Ok(Action::Grip);
    }
    state.move_towards(cell)
}

/// Four image tokens: gripper cell, object status, gripper→object and gripper→goal displacement.
pub fn observe_image(state: &WorldState, words: &Words) -> Vec<usize> {
    let (gr, gc) = state.gripper;
    let mut out = vec![words.img_gripper(gr.min(GRID - 1), gc.min(GRID - 1))];
    let disp = |cell: Cell| (cell.0 as i32 - gr as i32, cell.1 as i32 - gc as i32);
    match state.objects.first() {
        None => {
            out.push(words.img_object_none());
            out.push(words.img_obj_disp_none());
        }
        Some(o) => {
            out.push(words.img_object(state.status(0), o.color, o.id));
            match o.cell {
                Some(cell) => {
                    let (dr, dc) = disp(cell);
                    out.push(words.img_obj_disp(dr, dc));
                }
                None => out.push(words.img_obj_disp_none()),
            }
        }
    }
    if state.walls.is_empty() || state.reachable(state.gripper, state.goal) {
        let (dr, dc) = disp(state.goal);
        out.push(words.img_goal_disp(dr, dc));
    } else {
        out.push(words.img_goal_blocked());
    }
    out
}

/// Number of oracle steps to finish, or `Unreachable`.
pub fn oracle_steps(state: &WorldState, obj: usize, cap: usize) -> Result<usize, Unreachable> {
    let mut s = state.clone();
    for n in 0..=cap {
        if s.done(obj) {
            return Ok(n);
        }
        let a = oracle_policy(&s, obj)?;
        if s.apply(a).is_some() {
            return Err(Unreachable);
        }
    }
    Err(Unreachable)
}

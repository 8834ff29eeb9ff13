//! Single-room navigation grid with a hidden instruction-to-goal mapping.
//!
//! The agent starts at a fixed cell facing north and may turn left, turn right
//! or step forward. Each instruction id maps to one of ten goal cells through
//! an [`InstructionMapping`] the agent never observes directly.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{DailError, Result};
use crate::rng;

/// Number of goal cells in every layout.
pub const NUM_GOALS: usize = 10;
pub const NUM_ACTIONS: usize = 3;
pub const NUM_ORIENTATIONS: usize = 4;

pub type Cell = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    N,
    E,
    S,
    W,
}

impl Orientation {
    pub const ALL: [Orientation; 4] = [Orientation::N, Orientation::E, Orientation::S, Orientation::W];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    fn left(self) -> Self {
        Self::ALL[(self.index() + 3) % 4]
    }

    fn right(self) -> Self {
        Self::ALL[(self.index() + 1) % 4]
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Orientation::N => (0, -1),
            Orientation::E => (1, 0),
            Orientation::S => (0, 1),
            Orientation::W => (-1, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    TurnLeft,
    TurnRight,
    Forward,
}

impl Action {
    /// Tie-break order used everywhere: TurnLeft < TurnRight < Forward.
    pub const ALL: [Action; NUM_ACTIONS] = [Action::TurnLeft, Action::TurnRight, Action::Forward];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or(DailError::Index {
            what: "action",
            index: i,
            len: NUM_ACTIONS,
        })
    }
}

/// Room geometry. Serialized as a JSON object with keys
/// `width`, `height`, `goal_cells`, `start_cell`, `max_step`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub width: usize,
    pub height: usize,
    pub goal_cells: Vec<Cell>,
    pub start_cell: Cell,
    #[serde(default = "default_max_step")]
    pub max_step: usize,
}

fn default_max_step() -> usize {
    12
}

impl Default for EnvConfig {
    /// 9x9 open room, start in the centre. The goal layout is our own choice:
    /// four cells at distance 3 along the axes, four diagonal cells two steps
    /// out and two far corners.
    fn default() -> Self {
        EnvConfig {
            width: 9,
            height: 9,
            goal_cells: vec![
                (4, 1),
                (7, 4),
                (4, 7),
                (1, 4),
                (2, 2),
                (6, 2),
                (2, 6),
                (6, 6),
                (7, 1),
                (1, 7),
            ],
            start_cell: (4, 4),
            max_step: 12,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(DailError::invalid("grid must be at least 1x1"));
        }
        if self.max_step < 1 {
            return Err(DailError::invalid("max_step must be >= 1"));
        }
        if self.goal_cells.len() != NUM_GOALS {
            return Err(DailError::invalid(format!(
                "expected {NUM_GOALS} goal cells, got {}",
                self.goal_cells.len()
            )));
        }
        let inside = |c: Cell| c.0 < self.width && c.1 < self.height;
        if !inside(self.start_cell) {
            return Err(DailError::invalid("start_cell outside the grid"));
        }
        for (i, &g) in self.goal_cells.iter().enumerate() {
            if !inside(g) {
                return Err(DailError::invalid(format!("goal {i} {g:?} outside the grid")));
            }
            if g == self.start_cell {
                return Err(DailError::invalid(format!("goal {i} equals start_cell")));
            }
            if self.goal_cells[..i].contains(&g) {
                return Err(DailError::invalid(format!("goal {i} {g:?} is duplicated")));
            }
        }
        let world = Gridworld::build_unchecked(self.clone());
        let start = world.start_state_index();
        for (i, table) in world.distances.iter().enumerate() {
            match table[start] {
                Some(d) if d < self.max_step => {}
                _ => {
                    return Err(DailError::invalid(format!(
                        "goal {i} is not reachable from the start within max_step - 1 moves"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    /// Length of the one-hot observation vector.
    pub fn obs_dim(&self) -> usize {
        self.num_cells() * NUM_ORIENTATIONS
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DailError::io(path, e))?;
        let cfg: EnvConfig = serde_json::from_str(&text).map_err(|e| DailError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Hidden map from instruction ids to goal indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionMapping {
    pub table: Vec<usize>,
    pub seed: u64,
}

impl InstructionMapping {
    pub fn num_instructions(&self) -> usize {
        self.table.len()
    }

    pub fn goal_of(&self, instruction_id: usize) -> Result<usize> {
        self.table
            .get(instruction_id)
            .copied()
            .ok_or(DailError::UnknownInstruction {
                id: instruction_id,
                count: self.table.len(),
            })
    }
}

/// Draws each instruction's goal i.i.d. uniformly over the ten goals.
pub fn make_mapping(num_instructions: usize, seed: u64) -> Result<InstructionMapping> {
    if num_instructions == 0 {
        return Err(DailError::invalid("num_instructions must be >= 1"));
    }
    let mut rng = rng::seeded(seed);
    let table = (0..num_instructions)
        .map(|_| rng.random_range(0..NUM_GOALS))
        .collect();
    Ok(InstructionMapping { table, seed })
}

/// Full-state observation: agent cell and heading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Observation {
    pub x: usize,
    pub y: usize,
    pub orientation: Orientation,
}

impl From<[usize; 3]> for Observation {
    fn from(v: [usize; 3]) -> Self {
        Observation {
            x: v[0],
            y: v[1],
            orientation: Orientation::from_index(v[2] % 4).unwrap_or(Orientation::N),
        }
    }
}

impl From<Observation> for [usize; 3] {
    fn from(o: Observation) -> Self {
        [o.x, o.y, o.orientation.index()]
    }
}

impl Observation {
    /// Position of the single nonzero entry in the one-hot encoding.
    pub fn index(&self, width: usize) -> usize {
        (self.y * width + self.x) * NUM_ORIENTATIONS + self.orientation.index()
    }

    pub fn one_hot(&self, cfg: &EnvConfig) -> Vec<f64> {
        let mut v = vec![0.0; cfg.obs_dim()];
        v[self.index(cfg.width)] = 1.0;
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeState {
    pub agent_pos: Cell,
    pub orientation: Orientation,
    pub step_count: usize,
    pub goal_index: usize,
    pub instruction_id: usize,
    pub done: bool,
}

impl EpisodeState {
    pub fn observation(&self) -> Observation {
        Observation {
            x: self.agent_pos.0,
            y: self.agent_pos.1,
            orientation: self.orientation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EpisodeState,
    pub reward: f64,
    pub done: bool,
}

/// Environment with precomputed shortest-path tables for every goal.
#[derive(Debug, Clone)]
pub struct Gridworld {
    config: EnvConfig,
    /// `distances[g][state]`: minimal number of actions from `state` to goal
    /// `g`, where state = cell * 4 + orientation.
    distances: Vec<Vec<Option<usize>>>,
}

impl Gridworld {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::build_unchecked(config))
    }

    fn build_unchecked(config: EnvConfig) -> Self {
        let distances = (0..config.goal_cells.len())
            .map(|g| bfs_to_goal(&config, config.goal_cells[g]))
            .collect();
        Gridworld { config, distances }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    fn start_state_index(&self) -> usize {
        state_index(&self.config, self.config.start_cell, Orientation::N)
    }

    pub fn reset(&self, mapping: &InstructionMapping, instruction_id: usize) -> Result<EpisodeState> {
        let goal_index = mapping.goal_of(instruction_id)?;
        Ok(EpisodeState {
            agent_pos: self.config.start_cell,
            orientation: Orientation::N,
            step_count: 0,
            goal_index,
            instruction_id,
            done: false,
        })
    }

    pub fn step(&self, state: &EpisodeState, action: Action) -> Result<StepOutcome> {
        if state.done {
            return Err(DailError::EpisodeFinished);
        }
        let mut next = state.clone();
        match action {
            Action::TurnLeft => next.orientation = state.orientation.left(),
            Action::TurnRight => next.orientation = state.orientation.right(),
            Action::Forward => next.agent_pos = forward(&self.config, state.agent_pos, state.orientation),
        }
        next.step_count += 1;
        let success = next.agent_pos == self.config.goal_cells[state.goal_index];
        let reward = if success {
            1.0 - 0.9 * (next.step_count as f64 / self.config.max_step as f64)
        } else {
            0.0
        };
        next.done = success || next.step_count >= self.config.max_step;
        let done = next.done;
        Ok(StepOutcome {
            state: next,
            reward,
            done,
        })
    }

    /// Minimal number of actions from `state` to its goal cell.
    pub fn distance_to_goal(&self, state: &EpisodeState) -> Option<usize> {
        let idx = state_index(&self.config, state.agent_pos, state.orientation);
        self.distances[state.goal_index][idx]
    }

    /// First action of a shortest action sequence to the goal, preferring
    /// TurnLeft, then TurnRight, then Forward among equally short options.
    pub fn expert_action(&self, state: &EpisodeState) -> Result<Action> {
        if state.done {
            return Err(DailError::EpisodeFinished);
        }
        let table = &self.distances[state.goal_index];
        let here = state_index(&self.config, state.agent_pos, state.orientation);
        let d = match table[here] {
            Some(d) if d > 0 && d <= self.config.max_step - state.step_count => d,
            _ => return Err(DailError::NoPath),
        };
        for action in Action::ALL {
            let (pos, ori) = transition(&self.config, state.agent_pos, state.orientation, action);
            if table[state_index(&self.config, pos, ori)] == Some(d - 1) {
                return Ok(action);
            }
        }
        Err(DailError::NoPath)
    }
}

fn state_index(cfg: &EnvConfig, pos: Cell, ori: Orientation) -> usize {
    (pos.1 * cfg.width + pos.0) * NUM_ORIENTATIONS + ori.index()
}

fn forward(cfg: &EnvConfig, pos: Cell, ori: Orientation) -> Cell {
    let (dx, dy) = ori.delta();
    let nx = pos.0 as isize + dx;
    let ny = pos.1 as isize + dy;
    if nx < 0 || ny < 0 || nx >= cfg.width as isize || ny >= cfg.height as isize {
        pos
    } else {
        (nx as usize, ny as usize)
    }
}

fn transition(cfg: &EnvConfig, pos: Cell, ori: Orientation, action: Action) -> (Cell, Orientation) {
    match action {
        Action::TurnLeft => (pos, ori.left()),
        Action::TurnRight => (pos, ori.right()),
        Action::Forward => (forward(cfg, pos, ori), ori),
    }
}

/// Reverse BFS over (cell, orientation) states. Every orientation on the
/// goal cell is a zero-distance state.
fn bfs_to_goal(cfg: &EnvConfig, goal: Cell) -> Vec<Option<usize>> {
    let n = cfg.num_cells() * NUM_ORIENTATIONS;
    // predecessor lists of the forward transition graph
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            for ori in Orientation::ALL {
                let from = state_index(cfg, (x, y), ori);
                for action in Action::ALL {
                    let (p, o) = transition(cfg, (x, y), ori, action);
                    preds[state_index(cfg, p, o)].push(from);
                }
            }
        }
    }
    let mut dist = vec![None; n];
    let mut queue = VecDeque::new();
    for ori in Orientation::ALL {
        let s = state_index(cfg, goal, ori);
        dist[s] = Some(0);
        queue.push_back(s);
    }
    while let Some(s) = queue.pop_front() {
        let d = dist[s].unwrap_or(0);
        for &p in &preds[s] {
            if dist[p].is_none() {
                dist[p] = Some(d + 1);
                queue.push_back(p);
            }
        }
    }
    dist
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> Gridworld {
        Gridworld::new(EnvConfig::default()).unwrap()
    }

    fn state_at(pos: Cell, ori: Orientation, goal_index: usize) -> EpisodeState {
        EpisodeState {
            agent_pos: pos,
            orientation: ori,
            step_count: 0,
            goal_index,
            instruction_id: 0,
            done: false,
        }
    }

    #[test]
    fn default_config_is_valid() {
        EnvConfig::default().validate().unwrap();
    }

    #[test]
    fn config_rejects_bad_layouts() {
        let mut cfg = EnvConfig::default();
        cfg.goal_cells[3] = cfg.start_cell;
        assert!(cfg.validate().is_err());

        let mut cfg = EnvConfig::default();
        cfg.goal_cells[1] = cfg.goal_cells[0];
        assert!(cfg.validate().is_err());

        let mut cfg = EnvConfig::default();
        cfg.goal_cells[0] = (9, 0);
        assert!(cfg.validate().is_err());

        // corner goals need 8 moves; a 6-step budget cannot reach them
        let mut cfg = EnvConfig::default();
        cfg.max_step = 6;
        assert!(cfg.validate().is_err());

        let mut cfg = EnvConfig::default();
        cfg.max_step = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let text = r#"{"width":9,"height":9,"goal_cells":[],"start_cell":[4,4],"max_step":12,"extra":1}"#;
        assert!(serde_json::from_str::<EnvConfig>(text).is_err());
        let text = serde_json::to_string(&EnvConfig::default()).unwrap();
        let back: EnvConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, EnvConfig::default());
    }

    #[test]
    fn mapping_sizes_and_determinism() {
        assert!(make_mapping(0, 1).is_err());
        let m = make_mapping(1, 99).unwrap();
        assert_eq!(m.num_instructions(), 1);
        assert!(m.table[0] < NUM_GOALS);
        assert_eq!(make_mapping(512, 7).unwrap(), make_mapping(512, 7).unwrap());
    }

    #[test]
    fn mapping_histogram_is_near_uniform() {
        let m = make_mapping(512, 7).unwrap();
        let mut counts = [0usize; NUM_GOALS];
        for &g in &m.table {
            counts[g] += 1;
        }
        // multinomial(512, 1/10): mean 51.2, sd sqrt(512 * 0.1 * 0.9)
        let mean = 51.2;
        let sd = (512.0f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - mean).powi(2) / mean).sum();
        // 99.9th percentile of chi-square with 9 degrees of freedom
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }

    #[test]
    fn reset_places_agent_at_start() {
        let w = world();
        let m = make_mapping(8, 3).unwrap();
        let s = w.reset(&m, 0).unwrap();
        assert_eq!(s.agent_pos, (4, 4));
        assert_eq!(s.orientation, Orientation::N);
        assert_eq!(s.step_count, 0);
        assert!(!s.done);
        let s3 = w.reset(&m, 3).unwrap();
        assert_eq!(s3.goal_index, m.table[3]);
        assert!(matches!(
            w.reset(&m, 8),
            Err(DailError::UnknownInstruction { id: 8, count: 8 })
        ));
    }

    #[test]
    fn reward_follows_step_count() {
        let w = world();
        // goal 0 is (4,1): three forwards from the start
        let mut s = state_at((4, 4), Orientation::N, 0);
        s.step_count = 1;
        for _ in 0..2 {
            let out = w.step(&s, Action::Forward).unwrap();
            assert_eq!(out.reward, 0.0);
            s = out.state;
        }
        let out = w.step(&s, Action::Forward).unwrap();
        assert!(out.done);
        assert!((out.reward - 0.7).abs() < 1e-12);

        let mut s = state_at((4, 2), Orientation::N, 0);
        s.step_count = 11;
        let out = w.step(&s, Action::Forward).unwrap();
        assert!(out.done);
        assert!((out.reward - 0.1).abs() < 1e-12);
    }

    #[test]
    fn forward_into_wall_is_a_counted_noop() {
        let w = world();
        let s = state_at((4, 0), Orientation::N, 0);
        let out = w.step(&s, Action::Forward).unwrap();
        assert_eq!(out.state.agent_pos, (4, 0));
        assert_eq!(out.state.step_count, 1);
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn timeout_ends_episode_and_blocks_further_steps() {
        let w = world();
        let m = make_mapping(1, 0).unwrap();
        let mut s = w.reset(&m, 0).unwrap();
        for i in 0..12 {
            let out = w.step(&s, Action::TurnLeft).unwrap();
            assert_eq!(out.done, i == 11);
            s = out.state;
        }
        assert!(matches!(w.step(&s, Action::Forward), Err(DailError::EpisodeFinished)));
    }

    #[test]
    fn expert_worked_examples() {
        let w = world();
        // goal 0 at (4,1)
        let s = state_at((4, 2), Orientation::N, 0);
        assert_eq!(w.expert_action(&s).unwrap(), Action::Forward);
        let s = state_at((4, 0), Orientation::N, 0);
        assert_eq!(w.expert_action(&s).unwrap(), Action::TurnLeft);
    }

    /// Forward BFS over action sequences, independent of the reverse tables.
    fn brute_force_distance(w: &Gridworld, start: &EpisodeState) -> usize {
        let mut frontier = vec![start.clone()];
        for depth in 1..=w.config().max_step {
            let mut next = Vec::new();
            for s in &frontier {
                for a in Action::ALL {
                    let out = w.step(s, a).unwrap();
                    if out.reward > 0.0 {
                        return depth;
                    }
                    if !out.done {
                        next.push(out.state);
                    }
                }
            }
            next.sort_by_key(|s| (s.agent_pos, s.orientation.index()));
            next.dedup_by_key(|s| (s.agent_pos, s.orientation.index()));
            frontier = next;
        }
        usize::MAX
    }

    #[test]
    fn expert_rollouts_are_optimal_for_every_goal() {
        let w = world();
        let mapping = InstructionMapping {
            table: (0..NUM_GOALS).collect(),
            seed: 0,
        };
        for id in 0..NUM_GOALS {
            let start = w.reset(&mapping, id).unwrap();
            let optimal = brute_force_distance(&w, &start);
            assert_eq!(w.distance_to_goal(&start), Some(optimal));
            let mut s = start;
            let mut steps = 0;
            loop {
                let out = w.step(&s, w.expert_action(&s).unwrap()).unwrap();
                steps += 1;
                s = out.state;
                if out.done {
                    assert!(out.reward > 0.0, "goal {id} not reached");
                    break;
                }
            }
            assert_eq!(steps, optimal, "goal {id}");
        }
    }

    #[test]
    fn observation_is_one_hot() {
        let cfg = EnvConfig::default();
        let o = Observation {
            x: 3,
            y: 5,
            orientation: Orientation::W,
        };
        let v = o.one_hot(&cfg);
        assert_eq!(v.len(), 9 * 9 * 4);
        assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 1);
        assert_eq!(v[o.index(cfg.width)], 1.0);
    }
}

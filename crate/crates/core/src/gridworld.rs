//! Deterministic 4-connected grid environment.
//!
//! The grid is the data source for every experiment: it supplies rollouts at
//! graded skill levels, a ground-truth reward, and an optimal-value oracle
//! computed by value iteration.
//!
//! Coordinates are `(x, y)` with `x` growing to the right and `y` growing
//! downwards, so `Action::Up` decrements `y`. Cells outside `0..width` /
//! `0..height` behave as walls.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::EpisodeId;

/// Name of the shared benchmark map.
pub const DEFAULT_MAP_NAME: &str = "default-8x8";

const DEFAULT_MAP: &str = "\
name=default-8x8 step_penalty=-0.01 goal_reward=1 lava_reward=-1 discount=0.95 seed=0
########
#S.....#
#..L...#
#......#
#...L..#
#.L....#
#.....G#
########
";

/// Ties between Q-values closer than this are broken by action order.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("map parse error on line {line}: {reason}")]
    MapParse { line: usize, reason: String },
    #[error("unknown map fixture `{0}`")]
    UnknownFixture(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[i32; 2]", into = "[i32; 2]")]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }

    pub fn manhattan(self, other: Cell) -> u32 {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }

    pub fn offset(self, action: Action) -> Cell {
        let (dx, dy) = action.delta();
        Cell::new(self.x + dx, self.y + dy)
    }
}

impl From<[i32; 2]> for Cell {
    fn from(v: [i32; 2]) -> Self {
        Cell::new(v[0], v[1])
    }
}

impl From<Cell> for [i32; 2] {
    fn from(c: Cell) -> Self {
        [c.x, c.y]
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Movement actions. The declaration order is the greedy tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
        }
    }
}

impl FromStr for Action {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "up" => Ok(Action::Up),
            "down" => Ok(Action::Down),
            "left" => Ok(Action::Left),
            "right" => Ok(Action::Right),
            other => Err(EnvError::InvalidState(format!("unknown action `{other}`"))),
        }
    }
}

/// What a cell contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tile {
    Floor,
    Wall,
    Goal,
    Lava,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    Goal,
    Lava,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub name: String,
    pub width: i32,
    pub height: i32,
    pub walls: BTreeSet<Cell>,
    pub goal: Cell,
    pub lava: BTreeSet<Cell>,
    pub start: Cell,
    pub step_penalty: f64,
    pub goal_reward: f64,
    pub lava_reward: f64,
    pub max_steps: u32,
    pub discount: f64,
    pub seed: u64,
}

impl GridSpec {
    /// An empty grid with default rewards. Boundaries are implicit walls.
    pub fn empty(width: i32, height: i32, start: Cell, goal: Cell) -> Result<Self, EnvError> {
        let spec = GridSpec {
            name: format!("empty-{width}x{height}"),
            width,
            height,
            walls: BTreeSet::new(),
            goal,
            lava: BTreeSet::new(),
            start,
            step_penalty: -0.01,
            goal_reward: 1.0,
            lava_reward: -1.0,
            max_steps: (4 * width * height) as u32,
            discount: 0.95,
            seed: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The shared 8x8 benchmark map.
    pub fn default_8x8() -> Self {
        GridSpec::parse_map(DEFAULT_MAP).expect("built-in map is valid")
    }

    /// Looks up a named fixture, falling back to a map file path.
    pub fn fixture(name: &str) -> Result<Self, EnvError> {
        if name == DEFAULT_MAP_NAME {
            return Ok(Self::default_8x8());
        }
        let path = Path::new(name);
        if path.exists() {
            return Self::load_map(path);
        }
        Err(EnvError::UnknownFixture(name.to_string()))
    }

    pub fn load_map(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_map(&text)
    }

    /// Parses the plain-text map format: one header line of `key=value`
    /// parameters followed by the grid rows.
    pub fn parse_map(text: &str) -> Result<Self, EnvError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(EnvError::MapParse {
            line: 1,
            reason: "missing header line".into(),
        })?;
        let mut params = BTreeMap::new();
        for tok in header.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| EnvError::MapParse {
                line: 1,
                reason: format!("expected key=value, found `{tok}`"),
            })?;
            params.insert(k.to_string(), v.to_string());
        }

        let mut walls = BTreeSet::new();
        let mut lava = BTreeSet::new();
        let mut goal = None;
        let mut start = None;
        let mut width = None;
        let mut height = 0;
        for (lineno, row) in lines {
            let row = row.trim_end();
            let w = row.chars().count() as i32;
            match width {
                None => width = Some(w),
                Some(prev) if prev != w => {
                    return Err(EnvError::MapParse {
                        line: lineno + 1,
                        reason: format!("row width {w} differs from {prev}"),
                    })
                }
                _ => {}
            }
            for (x, ch) in row.chars().enumerate() {
                let cell = Cell::new(x as i32, height);
                match ch {
                    '#' => {
                        walls.insert(cell);
                    }
                    'L' => {
                        lava.insert(cell);
                    }
                    'G' => {
                        if goal.replace(cell).is_some() {
                            return Err(EnvError::MapParse {
                                line: lineno + 1,
                                reason: "more than one goal".into(),
                            });
                        }
                    }
                    'S' => {
                        if start.replace(cell).is_some() {
                            return Err(EnvError::MapParse {
                                line: lineno + 1,
                                reason: "more than one start".into(),
                            });
                        }
                    }
                    '.' => {}
                    other => {
                        return Err(EnvError::MapParse {
                            line: lineno + 1,
                            reason: format!("unexpected character `{other}`"),
                        })
                    }
                }
            }
            height += 1;
        }
        let width = width.ok_or(EnvError::MapParse {
            line: 2,
            reason: "no grid rows".into(),
        })?;
        let missing = |what: &str| EnvError::MapParse {
            line: 0,
            reason: format!("map has no {what}"),
        };
        let real = |key: &str, default: f64| -> Result<f64, EnvError> {
            params.get(key).map_or(Ok(default), |v| {
                v.parse().map_err(|_| EnvError::MapParse {
                    line: 1,
                    reason: format!("bad value for {key}: `{v}`"),
                })
            })
        };
        let int = |key: &str, default: u64| -> Result<u64, EnvError> {
            params.get(key).map_or(Ok(default), |v| {
                v.parse().map_err(|_| EnvError::MapParse {
                    line: 1,
                    reason: format!("bad value for {key}: `{v}`"),
                })
            })
        };
        let spec = GridSpec {
            name: params
                .get("name")
                .cloned()
                .unwrap_or_else(|| format!("map-{width}x{height}")),
            width,
            height,
            walls,
            goal: goal.ok_or_else(|| missing("goal"))?,
            lava,
            start: start.ok_or_else(|| missing("start"))?,
            step_penalty: real("step_penalty", -0.01)?,
            goal_reward: real("goal_reward", 1.0)?,
            lava_reward: real("lava_reward", -1.0)?,
            max_steps: int("max_steps", (4 * width * height) as u64)? as u32,
            discount: real("discount", 0.95)?,
            seed: int("seed", 0)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Renders the spec back into the map file format.
    pub fn to_map_string(&self) -> String {
        let mut out = format!(
            "name={} step_penalty={} goal_reward={} lava_reward={} discount={} max_steps={} seed={}\n",
            self.name,
            self.step_penalty,
            self.goal_reward,
            self.lava_reward,
            self.discount,
            self.max_steps,
            self.seed
        );
        for y in 0..self.height {
            for x in 0..self.width {
                let c = Cell::new(x, y);
                let ch = if c == self.start {
                    'S'
                } else {
                    match self.tile(c) {
                        Tile::Wall => '#',
                        Tile::Goal => 'G',
                        Tile::Lava => 'L',
                        Tile::Floor => '.',
                    }
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidSpec(m));
        if self.width < 3 || self.height < 3 {
            return bad(format!("grid {}x{} smaller than 3x3", self.width, self.height));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad(format!("discount {} outside (0,1)", self.discount));
        }
        for (what, c) in [("start", self.start), ("goal", self.goal)] {
            if !self.in_bounds(c) {
                return bad(format!("{what} {c} out of bounds"));
            }
            if self.walls.contains(&c) {
                return bad(format!("{what} {c} is a wall"));
            }
        }
        if self.lava.contains(&self.goal) {
            return bad("goal is lava".into());
        }
        if self.lava.contains(&self.start) || self.start == self.goal {
            return bad("start must be a floor cell".into());
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        Ok(())
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && c.x < self.width && c.y < self.height
    }

    pub fn tile(&self, c: Cell) -> Tile {
        if !self.in_bounds(c) || self.walls.contains(&c) {
            Tile::Wall
        } else if c == self.goal {
            Tile::Goal
        } else if self.lava.contains(&c) {
            Tile::Lava
        } else {
            Tile::Floor
        }
    }

    pub fn is_terminal(&self, c: Cell) -> bool {
        matches!(self.tile(c), Tile::Goal | Tile::Lava)
    }

    pub fn n_cells(&self) -> usize {
        (self.width * self.height) as usize
    }

    /// Row-major index of an in-bounds cell.
    pub fn cell_index(&self, c: Cell) -> usize {
        debug_assert!(self.in_bounds(c));
        (c.y * self.width + c.x) as usize
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new(index as i32 % self.width, index as i32 / self.width)
    }

    /// All in-bounds cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.n_cells()).map(|i| self.cell_at(i))
    }

    pub fn floor_cells(&self) -> Vec<Cell> {
        self.cells().filter(|&c| self.tile(c) == Tile::Floor).collect()
    }

    /// Stable hash of the static layout, carried in every observation.
    pub fn layout_hash(&self) -> u64 {
        // FNV-1a over the rendered map rows; independent of the std hasher seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_map_string().lines().skip(1).flat_map(|l| l.bytes()) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }

    pub fn initial_observation(&self) -> Observation {
        Observation {
            cell: self.start,
            layout: self.layout_hash(),
        }
    }

    /// Reward for entering `next` from any cell.
    pub fn reward_for(&self, next: Cell) -> f64 {
        match self.tile(next) {
            Tile::Goal => self.step_penalty + self.goal_reward,
            Tile::Lava => self.step_penalty + self.lava_reward,
            _ => self.step_penalty,
        }
    }

    /// Largest absolute single-step ground-truth reward.
    pub fn max_abs_step_reward(&self) -> f64 {
        [
            self.step_penalty,
            self.step_penalty + self.goal_reward,
            self.step_penalty + self.lava_reward,
        ]
        .into_iter()
        .map(f64::abs)
        .fold(0.0, f64::max)
    }

    /// Cell reached by `action`; walls and the grid edge block movement.
    pub fn move_target(&self, from: Cell, action: Action) -> Cell {
        let next = from.offset(action);
        if self.tile(next) == Tile::Wall {
            from
        } else {
            next
        }
    }
}

impl Hash for GridSpec {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.layout_hash().hash(state);
    }
}

/// Fully observable state: agent cell plus a hash of the static layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub cell: Cell,
    pub layout: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub terminal: Option<Termination>,
}

/// Applies one action. Every step pays the step penalty; entering the goal or
/// lava adds the corresponding reward and terminates.
pub fn step(spec: &GridSpec, state: &Observation, action: Action) -> Result<StepOutcome, EnvError> {
    match spec.tile(state.cell) {
        Tile::Wall => {
            return Err(EnvError::InvalidState(format!(
                "agent cell {} is a wall",
                state.cell
            )))
        }
        Tile::Goal | Tile::Lava => {
            return Err(EnvError::InvalidState(format!(
                "agent cell {} is terminal",
                state.cell
            )))
        }
        Tile::Floor => {}
    }
    let next = spec.move_target(state.cell, action);
    let terminal = match spec.tile(next) {
        Tile::Goal => Some(Termination::Goal),
        Tile::Lava => Some(Termination::Lava),
        _ => None,
    };
    Ok(StepOutcome {
        observation: Observation {
            cell: next,
            layout: state.layout,
        },
        reward: spec.reward_for(next),
        terminal,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub id: EpisodeId,
    pub states: Vec<Observation>,
    pub actions: Vec<Action>,
    pub gt_rewards: Vec<f64>,
    pub total_return: f64,
    pub terminated: Termination,
}

impl EpisodeRecord {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Cells entered by each transition, i.e. the reward-bearing states.
    pub fn entered_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.states.iter().skip(1).map(|o| o.cell)
    }

    /// Checks bookkeeping and, when a spec is given, the dynamics.
    pub fn check(&self, spec: Option<&GridSpec>) -> Result<(), String> {
        if self.states.len() != self.actions.len() + 1 {
            return Err(format!(
                "{} states for {} actions",
                self.states.len(),
                self.actions.len()
            ));
        }
        if self.gt_rewards.len() != self.actions.len() {
            return Err(format!(
                "{} rewards for {} actions",
                self.gt_rewards.len(),
                self.actions.len()
            ));
        }
        let sum: f64 = self.gt_rewards.iter().sum();
        if sum != self.total_return {
            return Err(format!(
                "total_return {} != reward sum {}",
                self.total_return, sum
            ));
        }
        if let Some(spec) = spec {
            for (t, &a) in self.actions.iter().enumerate() {
                let out = step(spec, &self.states[t], a).map_err(|e| e.to_string())?;
                if out.observation != self.states[t + 1] || out.reward != self.gt_rewards[t] {
                    return Err(format!("transition {t} inconsistent with dynamics"));
                }
            }
        }
        Ok(())
    }
}

/// Visited observations (including the start), rewards, and the termination.
pub type Replay = (Vec<Observation>, Vec<f64>, Option<Termination>);

/// Replays an action sequence from `start`, stopping early at a terminal cell.
/// Returns the visited observations (including `start`), the rewards and the
/// termination, if any was reached.
pub fn replay(
    spec: &GridSpec,
    start: Observation,
    actions: &[Action],
) -> Result<Replay, EnvError> {
    let mut states = vec![start];
    let mut rewards = Vec::with_capacity(actions.len());
    let mut cur = start;
    for &a in actions {
        let out = step(spec, &cur, a)?;
        states.push(out.observation);
        rewards.push(out.reward);
        cur = out.observation;
        if let Some(t) = out.terminal {
            return Ok((states, rewards, Some(t)));
        }
    }
    Ok((states, rewards, None))
}

/// Builds an episode record from an action sequence starting at the spec's
/// start cell. The episode ends at the first terminal cell, or as a timeout.
pub fn episode_from_actions(
    spec: &GridSpec,
    id: EpisodeId,
    actions: &[Action],
) -> Result<EpisodeRecord, EnvError> {
    let (states, gt_rewards, term) = replay(spec, spec.initial_observation(), actions)?;
    let n = gt_rewards.len();
    Ok(EpisodeRecord {
        id,
        actions: actions[..n].to_vec(),
        total_return: gt_rewards.iter().sum(),
        states,
        gt_rewards,
        terminated: term.unwrap_or(Termination::Timeout),
    })
}

/// Optimal state and action values.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    width: i32,
    pub v: Vec<f64>,
    pub q: Vec<[f64; 4]>,
    pub residual: f64,
    pub iterations: usize,
}

impl ValueTable {
    fn idx(&self, c: Cell) -> usize {
        (c.y * self.width + c.x) as usize
    }

    pub fn value(&self, c: Cell) -> f64 {
        self.v[self.idx(c)]
    }

    pub fn q_values(&self, c: Cell) -> [f64; 4] {
        self.q[self.idx(c)]
    }

    /// Greedy action with ties broken in `Action::ALL` order.
    pub fn greedy(&self, c: Cell) -> Action {
        greedy_action(&self.q_values(c))
    }
}

pub fn greedy_action(q: &[f64; 4]) -> Action {
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Action::ALL
        .into_iter()
        .find(|a| q[a.index()] >= best - TIE_EPS)
        .expect("at least one action")
}

/// Value iteration with an arbitrary per-cell entry reward. Goal and lava are
/// absorbing with zero continuation value.
pub fn value_iteration_with<F>(spec: &GridSpec, reward: F, tol: f64) -> ValueTable
where
    F: Fn(Cell) -> f64,
{
    let n = spec.n_cells();
    let gamma = spec.discount;
    let active: Vec<Cell> = spec
        .cells()
        .filter(|&c| spec.tile(c) == Tile::Floor)
        .collect();
    let entry: Vec<f64> = spec.cells().map(&reward).collect();
    let mut v = vec![0.0; n];
    let mut q = vec![[0.0; 4]; n];
    let mut iterations = 0;
    let backup = |v: &[f64], c: Cell| -> [f64; 4] {
        let mut out = [0.0; 4];
        for a in Action::ALL {
            let next = spec.move_target(c, a);
            let ni = spec.cell_index(next);
            let cont = if spec.is_terminal(next) { 0.0 } else { v[ni] };
            out[a.index()] = entry[ni] + gamma * cont;
        }
        out
    };
    loop {
        iterations += 1;
        let mut residual: f64 = 0.0;
        for &c in &active {
            let i = spec.cell_index(c);
            let qs = backup(&v, c);
            let best = qs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            residual = residual.max((best - v[i]).abs());
            v[i] = best;
        }
        if residual < tol || iterations > 100_000 {
            break;
        }
    }
    // Q from the converged V, with the Bellman residual measured against it.
    let mut final_residual: f64 = 0.0;
    for &c in &active {
        let i = spec.cell_index(c);
        q[i] = backup(&v, c);
        let best = q[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        final_residual = final_residual.max((best - v[i]).abs());
    }
    ValueTable {
        width: spec.width,
        v,
        q,
        residual: final_residual,
        iterations,
    }
}

/// Optimal values under the ground-truth reward.
pub fn value_iteration(spec: &GridSpec, tol: f64) -> ValueTable {
    value_iteration_with(spec, |c| spec.reward_for(c), tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    Optimal,
    Epsilon { epsilon: f64 },
    Boltzmann { beta: f64 },
}

impl PolicyKind {
    pub fn policy_id(&self) -> u64 {
        match self {
            PolicyKind::Optimal => 0,
            PolicyKind::Epsilon { .. } => 1,
            PolicyKind::Boltzmann { .. } => 2,
        }
    }

    /// Skill grade on a 0..=1000 scale; the optimal policy is 1000.
    pub fn skill_level(&self) -> u64 {
        let grade = match *self {
            PolicyKind::Optimal => 1.0,
            PolicyKind::Epsilon { epsilon } => 1.0 - epsilon.clamp(0.0, 1.0),
            PolicyKind::Boltzmann { beta } if beta.is_infinite() => 1.0,
            PolicyKind::Boltzmann { beta } => beta.max(0.0) / (1.0 + beta.max(0.0)),
        };
        (grade * 1000.0).round() as u64
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, q: &[f64; 4], rng: &mut R) -> Action {
        match *self {
            PolicyKind::Optimal => greedy_action(q),
            PolicyKind::Epsilon { epsilon } => {
                if epsilon > 0.0 && rng.random::<f64>() < epsilon {
                    Action::ALL[rng.random_range(0..4)]
                } else {
                    greedy_action(q)
                }
            }
            PolicyKind::Boltzmann { beta } => {
                let p = crate::rationality::boltzmann_prob(q, beta);
                Action::ALL[sample_index(&p, rng)]
            }
        }
    }
}

/// Samples an index from a probability vector.
pub fn sample_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Rolls out `n` episodes numbered from zero.
pub fn rollout_policy(
    spec: &GridSpec,
    values: &ValueTable,
    kind: PolicyKind,
    n: usize,
    seed: u64,
) -> Vec<EpisodeRecord> {
    rollout_policy_from(spec, values, kind, n, seed, 0)
}

/// Rolls out `n` episodes with episode numbers starting at `first_episode`.
/// Episode `i` uses its own RNG stream, so results do not depend on `n`.
pub fn rollout_policy_from(
    spec: &GridSpec,
    values: &ValueTable,
    kind: PolicyKind,
    n: usize,
    seed: u64,
    first_episode: u64,
) -> Vec<EpisodeRecord> {
    (0..n as u64)
        .map(|i| {
            let num = first_episode + i;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(num);
            let id = EpisodeId {
                env_name: spec.name.clone(),
                source_kind: "policy-rollout".into(),
                policy_id: kind.policy_id(),
                skill_level: kind.skill_level(),
                episode_num: num,
            };
            run_episode(spec, id, |c, rng| kind.sample_action(&values.q_values(c), rng), &mut rng)
        })
        .collect()
}

/// Policies of the default episode pool, spanning near-random to near-optimal.
pub const SKILL_LADDER: [PolicyKind; 7] = [
    PolicyKind::Boltzmann { beta: 0.5 },
    PolicyKind::Boltzmann { beta: 1.0 },
    PolicyKind::Boltzmann { beta: 2.0 },
    PolicyKind::Boltzmann { beta: 5.0 },
    PolicyKind::Boltzmann { beta: 10.0 },
    PolicyKind::Boltzmann { beta: 20.0 },
    PolicyKind::Epsilon { epsilon: 1.0 },
];

/// `per_level` rollouts of each [`SKILL_LADDER`] policy, numbered
/// consecutively. Level `i` is seeded with `seed + i`.
pub fn skill_ladder(spec: &GridSpec, values: &ValueTable, per_level: usize, seed: u64) -> Vec<EpisodeRecord> {
    let mut out = Vec::with_capacity(per_level * SKILL_LADDER.len());
    for (i, kind) in SKILL_LADDER.iter().enumerate() {
        let first = out.len() as u64;
        out.extend(rollout_policy_from(spec, values, *kind, per_level, seed + i as u64, first));
    }
    out
}

/// Runs one episode with an arbitrary action chooser.
pub fn run_episode<R, F>(spec: &GridSpec, id: EpisodeId, mut choose: F, rng: &mut R) -> EpisodeRecord
where
    R: Rng,
    F: FnMut(Cell, &mut R) -> Action,
{
    let mut cur = spec.initial_observation();
    let mut states = vec![cur];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut terminated = Termination::Timeout;
    for _ in 0..spec.max_steps {
        let a = choose(cur.cell, rng);
        let out = step(spec, &cur, a).expect("rollout stays on valid cells");
        actions.push(a);
        rewards.push(out.reward);
        states.push(out.observation);
        cur = out.observation;
        if let Some(t) = out.terminal {
            terminated = t;
            break;
        }
    }
    EpisodeRecord {
        id,
        total_return: rewards.iter().sum(),
        states,
        actions,
        gt_rewards: rewards,
        terminated,
    }
}

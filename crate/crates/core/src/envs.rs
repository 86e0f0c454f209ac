//! Gridworld constructions, observation embeddings and perturbation budgets.
//!
//! States of a gridworld are its non-obstacle cells in row-major order. Moving
//! into a wall, an obstacle, or along a restricted direction leaves the agent in
//! place. Rewards are paid on entering a cell; terminal cells absorb with zero
//! reward afterwards.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::MdpSpec;

pub const NUM_ACTIONS: usize = 4;
/// Discount used by all shipped gridworlds.
pub const GRID_GAMMA: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Up = 0,
    Right = 1,
    Down = 2,
    Left = 3,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::Up, Action::Right, Action::Down, Action::Left];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    fn delta(self) -> (i64, i64) {
        match self {
            Action::Up => (-1, 0),
            Action::Right => (0, 1),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Right => "right",
            Action::Down => "down",
            Action::Left => "left",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

pub const fn cell(row: usize, col: usize) -> Cell {
    Cell { row, col }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReward {
    pub cell: Cell,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoveRestriction {
    pub cell: Cell,
    pub allowed: Vec<Action>,
}

/// Static description of a gridworld.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridworldLayout {
    pub width: usize,
    pub height: usize,
    pub obstacles: BTreeSet<Cell>,
    pub reward_cells: Vec<CellReward>,
    pub terminal_cells: BTreeSet<Cell>,
    #[serde(default)]
    pub movement_restrictions: Vec<MoveRestriction>,
    pub start_cell: Cell,
    /// Decision state highlighted in renders.
    #[serde(default)]
    pub green_cell: Option<Cell>,
    #[serde(default)]
    pub yellow_cell: Option<Cell>,
}

impl GridworldLayout {
    fn in_bounds(&self, c: Cell) -> bool {
        c.row < self.height && c.col < self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("empty grid".into()));
        }
        if !self.in_bounds(self.start_cell) || self.obstacles.contains(&self.start_cell) {
            return Err(Error::Validation("start cell must be an in-bounds free cell".into()));
        }
        let cells = self
            .reward_cells
            .iter()
            .map(|r| r.cell)
            .chain(self.terminal_cells.iter().copied())
            .chain(self.movement_restrictions.iter().map(|m| m.cell))
            .chain(self.obstacles.iter().copied());
        for c in cells {
            if !self.in_bounds(c) {
                return Err(Error::Validation(format!("cell {c:?} out of bounds")));
            }
        }
        for c in self.reward_cells.iter().map(|r| r.cell).chain(self.terminal_cells.iter().copied()) {
            if self.obstacles.contains(&c) {
                return Err(Error::Validation(format!("cell {c:?} is both special and an obstacle")));
            }
        }
        Ok(())
    }

    /// Free cells in row-major order; index = state id.
    pub fn state_cells(&self) -> Vec<Cell> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| cell(r, c)))
            .filter(|c| !self.obstacles.contains(c))
            .collect()
    }

    fn reward_at(&self, c: Cell) -> f64 {
        self.reward_cells
            .iter()
            .find(|r| r.cell == c)
            .map_or(0.0, |r| r.reward)
    }

    fn allowed(&self, c: Cell, a: Action) -> bool {
        self.movement_restrictions
            .iter()
            .find(|m| m.cell == c)
            .map_or(true, |m| m.allowed.contains(&a))
    }

    /// Destination of a deterministic move.
    pub fn step(&self, c: Cell, a: Action) -> Cell {
        if self.terminal_cells.contains(&c) || !self.allowed(c, a) {
            return c;
        }
        let (dr, dc) = a.delta();
        let (r, col) = (c.row as i64 + dr, c.col as i64 + dc);
        if r < 0 || col < 0 {
            return c;
        }
        let dest = cell(r as usize, col as usize);
        if !self.in_bounds(dest) || self.obstacles.contains(&dest) {
            return c;
        }
        dest
    }

    pub fn to_mdp(&self, gamma: f64) -> Result<MdpSpec> {
        self.validate()?;
        let cells = self.state_cells();
        let index: BTreeMap<Cell, usize> = cells.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        let ns = cells.len();
        let mut transition = Vec::with_capacity(ns);
        let mut reward = Vec::with_capacity(ns);
        for &c in &cells {
            let mut rows = Vec::with_capacity(NUM_ACTIONS);
            let mut rews = Vec::with_capacity(NUM_ACTIONS);
            for a in Action::ALL {
                let dest = self.step(c, a);
                let mut row = vec![0.0; ns];
                row[index[&dest]] = 1.0;
                rows.push(row);
                rews.push(if dest != c { self.reward_at(dest) } else { 0.0 });
            }
            transition.push(rows);
            reward.push(rews);
        }
        let mut initial = vec![0.0; ns];
        initial[index[&self.start_cell]] = 1.0;
        let terminal = cells.iter().map(|c| self.terminal_cells.contains(c)).collect();
        MdpSpec::new(transition, reward, gamma, initial, terminal)
    }

    /// ASCII render: `#` obstacle, `G` green, `R` red (+), `X` grey (-),
    /// `Y` yellow, `.` empty.
    pub fn render_ascii(&self) -> String {
        let mut out = String::new();
        for r in 0..self.height {
            for c in 0..self.width {
                let here = cell(r, c);
                let reward = self.reward_at(here);
                let ch = if self.obstacles.contains(&here) {
                    '#'
                } else if self.yellow_cell == Some(here) {
                    'Y'
                } else if self.green_cell == Some(here) {
                    'G'
                } else if self.terminal_cells.contains(&here) && reward > 0.0 {
                    'R'
                } else if self.terminal_cells.contains(&here) && reward < 0.0 {
                    'X'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("layout serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let layout: GridworldLayout = toml::from_str(text).map_err(|e| Error::Parse {
            path: "<layout>".into(),
            message: e.to_string(),
        })?;
        layout.validate()?;
        Ok(layout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    OneHot,
    Coordinate,
    CoordinatePlusNoiseChannel,
}

impl std::str::FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_hot" => Ok(EmbeddingKind::OneHot),
            "coordinate" => Ok(EmbeddingKind::Coordinate),
            "coordinate_plus_noise_channel" => Ok(EmbeddingKind::CoordinatePlusNoiseChannel),
            other => Err(Error::Config(format!("unknown embedding kind `{other}`"))),
        }
    }
}

/// Injective map from states into `[0,1]^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationEmbedding {
    pub kind: EmbeddingKind,
    points: Vec<Vec<f64>>,
}

impl ObservationEmbedding {
    pub fn one_hot(num_states: usize) -> Self {
        let points = (0..num_states)
            .map(|s| {
                let mut v = vec![0.0; num_states];
                v[s] = 1.0;
                v
            })
            .collect();
        ObservationEmbedding {
            kind: EmbeddingKind::OneHot,
            points,
        }
    }

    /// Cell centers `((col + 0.5) / width, (row + 0.5) / height)`.
    pub fn coordinate(cells: &[Cell], width: usize, height: usize) -> Self {
        let points = cells
            .iter()
            .map(|c| {
                vec![
                    (c.col as f64 + 0.5) / width as f64,
                    (c.row as f64 + 0.5) / height as f64,
                ]
            })
            .collect();
        ObservationEmbedding {
            kind: EmbeddingKind::Coordinate,
            points,
        }
    }

    /// Coordinates plus a constant, task-irrelevant third channel.
    pub fn coordinate_plus_noise_channel(cells: &[Cell], width: usize, height: usize) -> Self {
        let mut e = Self::coordinate(cells, width, height);
        for p in &mut e.points {
            p.push(0.5);
        }
        e.kind = EmbeddingKind::CoordinatePlusNoiseChannel;
        e
    }

    pub fn for_layout(kind: EmbeddingKind, layout: &GridworldLayout) -> Self {
        let cells = layout.state_cells();
        match kind {
            EmbeddingKind::OneHot => Self::one_hot(cells.len()),
            EmbeddingKind::Coordinate => Self::coordinate(&cells, layout.width, layout.height),
            EmbeddingKind::CoordinatePlusNoiseChannel => {
                Self::coordinate_plus_noise_channel(&cells, layout.width, layout.height)
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn num_states(&self) -> usize {
        self.points.len()
    }

    pub fn encode(&self, state: usize) -> &[f64] {
        &self.points[state]
    }

    /// Nearest embedded state in Euclidean distance, ties to the lowest index.
    pub fn decode_nearest(&self, obs: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (s, p) in self.points.iter().enumerate() {
            let d: f64 = p.iter().zip(obs).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, s);
            }
        }
        best.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L2,
    #[serde(rename = "linf", alias = "l_inf")]
    LInf,
}

impl Norm {
    pub fn length(self, v: &[f64]) -> f64 {
        match self {
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::LInf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        self.length(&diff)
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2" | "l2" => Ok(Norm::L2),
            "inf" | "linf" => Ok(Norm::LInf),
            other => Err(Error::Config(format!("unknown norm `{other}` (use l2 or linf)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    ContinuousBall,
    DiscreteSet,
}

/// Noise level and its geometry. In discrete mode `discrete_neighbors[s]` is
/// the finite set `B(s)` of states whose observations the adversary may show.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    pub epsilon: f64,
    pub norm: Norm,
    pub mode: BudgetMode,
    #[serde(default)]
    pub discrete_neighbors: Vec<Vec<usize>>,
}

impl PerturbationBudget {
    pub fn continuous(epsilon: f64, norm: Norm) -> Result<Self> {
        if !(epsilon >= 0.0) {
            return Err(Error::Validation(format!("epsilon must be >= 0, got {epsilon}")));
        }
        Ok(PerturbationBudget {
            epsilon,
            norm,
            mode: BudgetMode::ContinuousBall,
            discrete_neighbors: Vec::new(),
        })
    }

    pub fn is_discrete(&self) -> bool {
        self.mode == BudgetMode::DiscreteSet
    }

    pub fn neighbors(&self, s: usize) -> &[usize] {
        &self.discrete_neighbors[s]
    }
}

/// `B(s) = { s' : ‖encode(s') - encode(s)‖ ≤ ε }`, always containing `s`.
pub fn discrete_budget_from_radius(
    embedding: &ObservationEmbedding,
    epsilon: f64,
    norm: Norm,
) -> Result<PerturbationBudget> {
    if !(epsilon >= 0.0) {
        return Err(Error::Validation(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let n = embedding.num_states();
    let neighbors = (0..n)
        .map(|s| {
            (0..n)
                .filter(|&t| t == s || norm.distance(embedding.encode(s), embedding.encode(t)) <= epsilon)
                .collect()
        })
        .collect();
    Ok(PerturbationBudget {
        epsilon,
        norm,
        mode: BudgetMode::DiscreteSet,
        discrete_neighbors: neighbors,
    })
}

/// A gridworld with its MDP and default embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct GridWorld {
    pub layout: GridworldLayout,
    pub mdp: MdpSpec,
    pub embedding: ObservationEmbedding,
    pub cells: Vec<Cell>,
}

impl GridWorld {
    pub fn from_layout(layout: GridworldLayout, kind: EmbeddingKind) -> Result<Self> {
        let mdp = layout.to_mdp(GRID_GAMMA)?;
        let embedding = ObservationEmbedding::for_layout(kind, &layout);
        let cells = layout.state_cells();
        Ok(GridWorld {
            layout,
            mdp,
            embedding,
            cells,
        })
    }

    pub fn state_of(&self, c: Cell) -> Option<usize> {
        self.cells.iter().position(|x| *x == c)
    }

    /// State index of the green decision cell.
    pub fn green_state(&self) -> Option<usize> {
        self.layout.green_cell.and_then(|c| self.state_of(c))
    }

    pub fn with_embedding(mut self, kind: EmbeddingKind) -> Self {
        self.embedding = ObservationEmbedding::for_layout(kind, &self.layout);
        self
    }
}

fn restrict(cells: impl IntoIterator<Item = Cell>, allowed: &[Action]) -> Vec<MoveRestriction> {
    cells
        .into_iter()
        .map(|c| MoveRestriction {
            cell: c,
            allowed: allowed.to_vec(),
        })
        .collect()
}

/// Counterexample world for full-timed untargeted attacks.
///
/// ```text
/// ..#.
/// .G.R
/// .#X.
/// ....
/// ```
/// The agent starts top-left. Columns 0-1 only allow `right`/`down`. From the
/// green cell the only effective move is `right`; the cell after it is adjacent
/// to both red (+1) and grey (-1), so the best and the worst policy agree at
/// green.
pub fn build_fig3_gridworld() -> Result<GridWorld> {
    let left: Vec<Cell> = (0..4).flat_map(|r| (0..2).map(move |c| cell(r, c))).collect();
    let layout = GridworldLayout {
        width: 4,
        height: 4,
        obstacles: [cell(0, 2), cell(2, 1)].into_iter().collect(),
        reward_cells: vec![
            CellReward { cell: cell(1, 3), reward: 1.0 },
            CellReward { cell: cell(2, 2), reward: -1.0 },
        ],
        terminal_cells: [cell(1, 3), cell(2, 2)].into_iter().collect(),
        movement_restrictions: restrict(
            left.into_iter().filter(|c| *c != cell(2, 1)),
            &[Action::Right, Action::Down],
        ),
        start_cell: cell(0, 0),
        green_cell: Some(cell(1, 1)),
        yellow_cell: None,
    };
    GridWorld::from_layout(layout, EmbeddingKind::Coordinate)
}

/// Which pair of actions the strategically-timed adversary can choose between
/// at the green cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fig4Case {
    RightDown,
    UpDown,
    LeftDown,
}

impl Fig4Case {
    pub const ALL: [Fig4Case; 3] = [Fig4Case::RightDown, Fig4Case::UpDown, Fig4Case::LeftDown];

    pub fn option_set(self) -> [Action; 2] {
        match self {
            Fig4Case::RightDown => [Action::Right, Action::Down],
            Fig4Case::UpDown => [Action::Up, Action::Down],
            Fig4Case::LeftDown => [Action::Left, Action::Down],
        }
    }
}

/// Counterexample world for strategically-timed attacks, default case.
pub fn build_fig4_gridworld() -> Result<GridWorld> {
    build_fig4_variant(Fig4Case::RightDown)
}

/// One world per option-set case. `RightDown` has the grey (-1) terminal;
/// the other two move the -1 terminal to a yellow cell.
pub fn build_fig4_variant(case: Fig4Case) -> Result<GridWorld> {
    let layout = fig4_layout(case);
    GridWorld::from_layout(layout, EmbeddingKind::Coordinate)
}

/// ```text
/// right/down     up/down        left/down
/// ##.X           ##Y.           ##..
/// ..GR           ...G           ..GY
/// ....           ..R.           ..R.
/// ....           ....           ....
/// ```
/// In each world the victim's move at green and the untargeted attack's move
/// there form the case's option set. Strategically-timed attacks never lead
/// from green into the -1 cell; the optimal attacker does.
fn fig4_layout(case: Fig4Case) -> GridworldLayout {
    let (green, red, bad, start) = match case {
        Fig4Case::RightDown => (cell(1, 2), cell(1, 3), cell(0, 3), cell(3, 0)),
        Fig4Case::UpDown => (cell(1, 3), cell(2, 2), cell(0, 2), cell(0, 3)),
        Fig4Case::LeftDown => (cell(1, 2), cell(2, 2), cell(1, 3), cell(0, 3)),
    };
    GridworldLayout {
        width: 4,
        height: 4,
        obstacles: [cell(0, 0), cell(0, 1)].into_iter().collect(),
        reward_cells: vec![
            CellReward { cell: red, reward: 1.0 },
            CellReward { cell: bad, reward: -1.0 },
        ],
        terminal_cells: [red, bad].into_iter().collect(),
        movement_restrictions: Vec::new(),
        start_cell: start,
        green_cell: Some(green),
        yellow_cell: (case != Fig4Case::RightDown).then_some(bad),
    }
}

fn reachable_terminal(layout: &GridworldLayout) -> bool {
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([layout.start_cell]);
    seen.insert(layout.start_cell);
    while let Some(c) = queue.pop_front() {
        if layout.terminal_cells.contains(&c) {
            return true;
        }
        for a in Action::ALL {
            let next = layout.step(c, a);
            if seen.insert(next) {
                queue.push_back(next);
            }
        }
    }
    false
}

const RANDOM_GRID_ATTEMPTS: usize = 100;

/// Random obstacles plus one +1 and one -1 terminal. Layouts whose start
/// cannot reach a terminal are resampled.
pub fn build_random_gridworld(
    width: usize,
    height: usize,
    obstacle_density: f64,
    seed: u64,
) -> Result<GridWorld> {
    if width == 0 || height == 0 || width * height > 400 {
        return Err(Error::Validation(format!("grid {width}x{height} outside 1..=400 cells")));
    }
    if !(0.0..=0.4).contains(&obstacle_density) {
        return Err(Error::Validation(format!("obstacle density {obstacle_density} outside [0, 0.4]")));
    }
    if width * height < 3 {
        return Err(Error::Validation("need at least 3 cells".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..RANDOM_GRID_ATTEMPTS {
        let all: Vec<Cell> = (0..height)
            .flat_map(|r| (0..width).map(move |c| cell(r, c)))
            .collect();
        let obstacles: BTreeSet<Cell> = all
            .iter()
            .copied()
            .filter(|_| obstacle_density > 0.0 && rng.gen::<f64>() < obstacle_density)
            .collect();
        let mut free: Vec<Cell> = all.into_iter().filter(|c| !obstacles.contains(c)).collect();
        if free.len() < 3 {
            continue;
        }
        free.shuffle(&mut rng);
        let (red, grey, start) = (free[0], free[1], free[2]);
        let layout = GridworldLayout {
            width,
            height,
            obstacles,
            reward_cells: vec![
                CellReward { cell: red, reward: 1.0 },
                CellReward { cell: grey, reward: -1.0 },
            ],
            terminal_cells: [red, grey].into_iter().collect(),
            movement_restrictions: Vec::new(),
            start_cell: start,
            green_cell: None,
            yellow_cell: None,
        };
        if reachable_terminal(&layout) {
            return GridWorld::from_layout(layout, EmbeddingKind::Coordinate);
        }
    }
    Err(Error::Validation(format!(
        "no layout with a reachable terminal after {RANDOM_GRID_ATTEMPTS} attempts (seed {seed})"
    )))
}

/// Build one of the shipped worlds by name.
pub fn build_named(name: &str) -> Result<GridWorld> {
    match name {
        "fig3" => build_fig3_gridworld(),
        "fig4" | "fig4_right_down" => build_fig4_variant(Fig4Case::RightDown),
        "fig4_up_down" => build_fig4_variant(Fig4Case::UpDown),
        "fig4_left_down" => build_fig4_variant(Fig4Case::LeftDown),
        other => Err(Error::Config(format!(
            "unknown environment `{other}` (expected fig3, fig4, fig4_up_down, fig4_left_down)"
        ))),
    }
}

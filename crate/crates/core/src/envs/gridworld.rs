//! Discrete gridworld with walls, a gold cell and a bomb cell.
//!
//! States are the open cells in row-major order. The agent moves one cell in
//! one of eight compass directions; moving into a wall or off the map leaves
//! it in place. Each non-terminating move costs `step_reward`; entering the
//! gold or bomb cell ends the episode and pays the terminal reward instead.
//! Observations are all cells, walls included, so an attacker may show the
//! agent positions it could never occupy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::metric::StateMetric;
use crate::purifier::ObservationSpace;

/// `(column, row)`, row 0 at the top.
pub type Cell = (usize, usize);

/// The shipped 10x10 map.
pub const DEFAULT_GRIDWORLD: &str = include_str!("../../fixtures/gridworld10.toml");

pub const ACTION_NAMES: [&str; 8] = [
    "up",
    "up-left",
    "left",
    "down-left",
    "down",
    "down-right",
    "right",
    "up-right",
];

const OFFSETS: [(isize, isize); 8] = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    pub walls: Vec<Cell>,
    pub gold: Cell,
    pub bomb: Cell,
    /// Start cells; all open non-terminal cells when absent.
    #[serde(default)]
    pub starts: Option<Vec<Cell>>,
    #[serde(default = "defaults::step_reward")]
    pub step_reward: f64,
    #[serde(default = "defaults::gold_reward")]
    pub gold_reward: f64,
    #[serde(default = "defaults::bomb_reward")]
    pub bomb_reward: f64,
    #[serde(default = "defaults::horizon")]
    pub horizon: usize,
    /// Probability that a move fails and the agent stays put.
    #[serde(default)]
    pub slip: f64,
    #[serde(default = "defaults::discount")]
    pub discount: f64,
}

mod defaults {
    pub fn step_reward() -> f64 {
        -1.0
    }
    pub fn gold_reward() -> f64 {
        200.0
    }
    pub fn bomb_reward() -> f64 {
        -50.0
    }
    pub fn horizon() -> usize {
        100
    }
    pub fn discount() -> f64 {
        0.95
    }
}

/// On-disk form: either explicit fields or an ASCII `map`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridworldFile {
    map: Option<String>,
    width: Option<usize>,
    height: Option<usize>,
    walls: Option<Vec<Cell>>,
    gold: Option<Cell>,
    bomb: Option<Cell>,
    starts: Option<Vec<Cell>>,
    step_reward: Option<f64>,
    gold_reward: Option<f64>,
    bomb_reward: Option<f64>,
    horizon: Option<usize>,
    slip: Option<f64>,
    discount: Option<f64>,
}

impl GridworldSpec {
    /// Parses an ASCII map: `#` wall, `G` gold, `B` bomb, `.` open, `S` open
    /// start cell. When any `S` is present only those cells are starts.
    pub fn from_ascii(map: &str) -> Result<Self> {
        let rows: Vec<&str> = map.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if rows.is_empty() {
            return Err(Error::InvalidArgument("empty gridworld map".into()));
        }
        let width = rows[0].chars().count();
        let mut walls = Vec::new();
        let mut starts = Vec::new();
        let (mut gold, mut bomb) = (None, None);
        for (row, line) in rows.iter().enumerate() {
            if line.chars().count() != width {
                return Err(Error::InvalidArgument(format!(
                    "map row {row} has width {}, expected {width}",
                    line.chars().count()
                )));
            }
            for (col, ch) in line.chars().enumerate() {
                match ch {
                    '#' => walls.push((col, row)),
                    '.' => {}
                    'S' => starts.push((col, row)),
                    'G' if gold.is_none() => gold = Some((col, row)),
                    'B' if bomb.is_none() => bomb = Some((col, row)),
                    'G' | 'B' => {
                        return Err(Error::InvalidArgument(format!("map has more than one `{ch}`")));
                    }
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "unexpected map character `{other}` at row {row}, column {col}"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            width,
            height: rows.len(),
            walls,
            gold: gold.ok_or_else(|| Error::InvalidArgument("map has no gold cell".into()))?,
            bomb: bomb.ok_or_else(|| Error::InvalidArgument("map has no bomb cell".into()))?,
            starts: (!starts.is_empty()).then_some(starts),
            step_reward: defaults::step_reward(),
            gold_reward: defaults::gold_reward(),
            bomb_reward: defaults::bomb_reward(),
            horizon: defaults::horizon(),
            slip: 0.0,
            discount: defaults::discount(),
        })
    }

    /// Parses a TOML spec with either an ASCII `map` or explicit fields.
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: GridworldFile = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("gridworld spec: {e}")))?;
        let mut spec = match &file.map {
            Some(map) => {
                if file.width.is_some() || file.height.is_some() || file.walls.is_some() {
                    return Err(Error::InvalidArgument(
                        "gridworld spec: give either `map` or width/height/walls, not both".into(),
                    ));
                }
                let mut spec = Self::from_ascii(map)?;
                if let Some(g) = file.gold {
                    spec.gold = g;
                }
                if let Some(b) = file.bomb {
                    spec.bomb = b;
                }
                spec
            }
            None => {
                let missing = |f: &str| Error::InvalidArgument(format!("gridworld spec: missing `{f}`"));
                Self {
                    width: file.width.ok_or_else(|| missing("width"))?,
                    height: file.height.ok_or_else(|| missing("height"))?,
                    walls: file.walls.clone().unwrap_or_default(),
                    gold: file.gold.ok_or_else(|| missing("gold"))?,
                    bomb: file.bomb.ok_or_else(|| missing("bomb"))?,
                    starts: None,
                    step_reward: defaults::step_reward(),
                    gold_reward: defaults::gold_reward(),
                    bomb_reward: defaults::bomb_reward(),
                    horizon: defaults::horizon(),
                    slip: 0.0,
                    discount: defaults::discount(),
                }
            }
        };
        if file.starts.is_some() {
            spec.starts = file.starts;
        }
        spec.step_reward = file.step_reward.unwrap_or(spec.step_reward);
        spec.gold_reward = file.gold_reward.unwrap_or(spec.gold_reward);
        spec.bomb_reward = file.bomb_reward.unwrap_or(spec.bomb_reward);
        spec.horizon = file.horizon.unwrap_or(spec.horizon);
        spec.slip = file.slip.unwrap_or(spec.slip);
        spec.discount = file.discount.unwrap_or(spec.discount);
        Ok(spec)
    }

    pub fn to_ascii(&self) -> String {
        let mut grid = vec![vec!['.'; self.width]; self.height];
        for &(c, r) in &self.walls {
            grid[r][c] = '#';
        }
        if let Some(starts) = &self.starts {
            for &(c, r) in starts {
                grid[r][c] = 'S';
            }
        }
        grid[self.gold.1][self.gold.0] = 'G';
        grid[self.bomb.1][self.bomb.0] = 'B';
        grid.into_iter().map(|row| row.into_iter().collect::<String>() + "\n").collect()
    }

    fn in_bounds(&self, (c, r): Cell) -> bool {
        c < self.width && r < self.height
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("gridworld: {msg}")));
        if self.width == 0 || self.height == 0 {
            return bad("width and height must be positive".into());
        }
        for (name, cell) in [("gold", self.gold), ("bomb", self.bomb)] {
            if !self.in_bounds(cell) {
                return bad(format!("{name} {cell:?} is off the map"));
            }
            if self.walls.contains(&cell) {
                return bad(format!("{name} {cell:?} is a wall"));
            }
        }
        if self.gold == self.bomb {
            return bad("gold and bomb share a cell".into());
        }
        if let Some(w) = self.walls.iter().find(|&&w| !self.in_bounds(w)) {
            return bad(format!("wall {w:?} is off the map"));
        }
        if !(0.0..1.0).contains(&self.slip) {
            return bad(format!("slip {} not in [0, 1)", self.slip));
        }
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        Ok(())
    }
}

/// A built gridworld: the MDP plus the cell geometry.
#[derive(Debug, Clone)]
pub struct Gridworld {
    pub spec: GridworldSpec,
    pub mdp: TabularMdp,
    /// Every cell, walls included, under the Chebyshev metric.
    pub observations: ObservationSpace,
    cells: Vec<Cell>,
    state_of_cell: Vec<Option<usize>>,
}

impl Gridworld {
    pub fn num_cells(&self) -> usize {
        self.spec.width * self.spec.height
    }

    pub fn cell_of_state(&self, s: usize) -> Cell {
        self.cells[s]
    }

    pub fn state_at(&self, cell: Cell) -> Option<usize> {
        if self.spec.in_bounds(cell) {
            self.state_of_cell[cell.1 * self.spec.width + cell.0]
        } else {
            None
        }
    }

    /// Observation index of a cell.
    pub fn observation_at(&self, (c, r): Cell) -> usize {
        r * self.spec.width + c
    }

    pub fn cell_of_observation(&self, o: usize) -> Cell {
        (o % self.spec.width, o / self.spec.width)
    }

    /// Chebyshev metric on the open cells.
    pub fn state_metric(&self) -> StateMetric {
        StateMetric::chebyshev(self.mdp.coordinates().expect("gridworld states have coordinates").to_vec())
            .expect("cell coordinates are finite")
    }

    pub fn gold_state(&self) -> usize {
        self.state_at(self.spec.gold).expect("gold is open")
    }

    pub fn bomb_state(&self) -> usize {
        self.state_at(self.spec.bomb).expect("bomb is open")
    }
}

pub fn build_gridworld(spec: &GridworldSpec) -> Result<Gridworld> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut wall = vec![false; w * h];
    for &(c, r) in &spec.walls {
        wall[r * w + c] = true;
    }
    let mut cells = Vec::new();
    let mut state_of_cell = vec![None; w * h];
    for r in 0..h {
        for c in 0..w {
            if !wall[r * w + c] {
                state_of_cell[r * w + c] = Some(cells.len());
                cells.push((c, r));
            }
        }
    }
    let ns = cells.len();
    let na = OFFSETS.len();
    let gold = state_of_cell[spec.gold.1 * w + spec.gold.0].expect("validated");
    let bomb = state_of_cell[spec.bomb.1 * w + spec.bomb.0].expect("validated");
    let is_terminal = |s: usize| s == gold || s == bomb;
    let entry_reward = |next: usize| {
        if next == gold {
            spec.gold_reward
        } else if next == bomb {
            spec.bomb_reward
        } else {
            spec.step_reward
        }
    };

    let mut transition = vec![0.0; ns * na * ns];
    let mut reward = vec![0.0; ns * na];
    for (s, &(c, r)) in cells.iter().enumerate() {
        for (a, &(dc, dr)) in OFFSETS.iter().enumerate() {
            let base = (s * na + a) * ns;
            if is_terminal(s) {
                transition[base + s] = 1.0;
                continue;
            }
            let target = c
                .checked_add_signed(dc)
                .zip(r.checked_add_signed(dr))
                .filter(|&cell| spec.in_bounds(cell))
                .and_then(|(tc, tr)| state_of_cell[tr * w + tc])
                .unwrap_or(s);
            transition[base + target] += 1.0 - spec.slip;
            transition[base + s] += spec.slip;
            reward[s * na + a] = (1.0 - spec.slip) * entry_reward(target) + spec.slip * entry_reward(s);
        }
    }

    let starts: Vec<usize> = match &spec.starts {
        Some(list) => list
            .iter()
            .map(|&cell| {
                spec.in_bounds(cell)
                    .then(|| state_of_cell[cell.1 * w + cell.0])
                    .flatten()
                    .filter(|&s| !is_terminal(s))
                    .ok_or_else(|| Error::InvalidArgument(format!("gridworld: start {cell:?} is not an open non-terminal cell")))
            })
            .collect::<Result<_>>()?,
        None => (0..ns).filter(|&s| !is_terminal(s)).collect(),
    };
    if starts.is_empty() {
        return Err(Error::InvalidArgument("gridworld: no open start cell".into()));
    }

    let coords: Vec<Vec<f64>> = cells.iter().map(|&(c, r)| vec![c as f64, r as f64]).collect();
    let mdp = TabularMdp::from_flat(ns, na, transition, reward, spec.discount)?
        .with_initial_states(starts)?
        .with_terminal_states(vec![gold.min(bomb), gold.max(bomb)])?
        .with_coordinates(coords)?;

    let all_cells: Vec<Vec<f64>> = (0..w * h).map(|i| vec![(i % w) as f64, (i / w) as f64]).collect();
    let state_obs = cells.iter().map(|&(c, r)| r * w + c).collect();
    let observations = ObservationSpace::new(StateMetric::chebyshev(all_cells)?, state_obs)?;
    Ok(Gridworld {
        spec: spec.clone(),
        mdp,
        observations,
        cells,
        state_of_cell,
    })
}

/// The shipped 10x10 fixture.
pub fn default_gridworld() -> Gridworld {
    let spec = GridworldSpec::from_toml(DEFAULT_GRIDWORLD).expect("shipped gridworld parses");
    build_gridworld(&spec).expect("shipped gridworld builds")
}

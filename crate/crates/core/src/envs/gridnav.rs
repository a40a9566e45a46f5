//! Grid navigation with raycast sensors.
//!
//! Map files are plain text, one character per cell:
//!
//! | char | meaning |
//! |------|---------|
//! | `.`  | ground |
//! | `L`  | lava (kills) |
//! | `W`  | water (kills) |
//! | `#`  | wall (blocks movement and rays) |
//! | `G`  | ground, member of the goal pool |
//! | `S`  | ground, member of the start pool |
//! | `K`  | hazard candidate: each episode exactly one `K` cell is lava, the rest ground |
//!
//! Cells outside the map behave as walls. Goal cells are split alternately,
//! in reading order, into a training pool and a held-out evaluation pool.
//!
//! Actions are `(east, north)` in `[-1, 1]²`. A vector shorter than 0.25 means
//! stay; otherwise the agent moves one cell in the nearest of the eight
//! compass directions, unless the target is a wall.

use std::collections::VecDeque;
use std::f64::consts::FRAC_PI_4;
use std::path::PathBuf;

use rand::Rng as _;

use super::{Env, EnvSpec, Transition};
use crate::budget::{FeatureSpec, MaskedObservation, QueryMask};
use crate::error::{Error, Result};
use crate::rng;

/// Ray ranges in cells.
pub const RAY_RANGES: [usize; 6] = [1, 5, 10, 25, 50, 100];
/// Cost of one raycast at each range, in microseconds of compute.
pub const RAY_COSTS: [f64; 6] = [2.58, 4.27, 5.14, 5.37, 5.49, 7.9];
/// Compass directions E, NE, N, NW, W, SW, S, SE.
pub const RAY_DIRS: [&str; 8] = ["e", "ne", "n", "nw", "w", "sw", "s", "se"];

/// `(dx, dy)` in grid coordinates (row index grows southward).
const STEPS: [(i32, i32); 8] = [(1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1)];

const FREE_FEATURES: usize = 3;
const HAZARD_REWARD: f64 = -10.0;
const GOAL_REWARD: f64 = 10.0;
const PROGRESS_REWARD: f64 = 1.0;
const STAY_RADIUS: f64 = 0.25;
const EXPERT_SPEED: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Ground,
    Lava,
    Water,
    Wall,
}

impl Cell {
    fn kind_code(self) -> f64 {
        match self {
            Cell::Ground => 0.0,
            Cell::Wall => 1.0 / 3.0,
            Cell::Water => 2.0 / 3.0,
            Cell::Lava => 1.0,
        }
    }

    fn deadly(self) -> bool {
        matches!(self, Cell::Lava | Cell::Water)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<Cell>,
    pub goals: Vec<(usize, usize)>,
    pub starts: Vec<(usize, usize)>,
    pub keys: Vec<(usize, usize)>,
}

impl GridMap {
    /// Parses a map; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let perr = |line: usize, msg: String| Error::Parse {
            path: PathBuf::from(origin),
            line,
            msg,
        };
        let width = lines.first().map_or(0, |l| l.chars().count());
        if width == 0 {
            return Err(perr(1, "empty map".into()));
        }
        let mut m = GridMap {
            width,
            height: lines.len(),
            cells: Vec::with_capacity(width * lines.len()),
            goals: Vec::new(),
            starts: Vec::new(),
            keys: Vec::new(),
        };
        for (y, line) in lines.iter().enumerate() {
            if line.chars().count() != width {
                return Err(perr(y + 1, format!("row has {} cells, expected {width}", line.chars().count())));
            }
            for (x, ch) in line.chars().enumerate() {
                let cell = match ch {
                    '.' => Cell::Ground,
                    'L' => Cell::Lava,
                    'W' => Cell::Water,
                    '#' => Cell::Wall,
                    'G' => {
                        m.goals.push((x, y));
                        Cell::Ground
                    }
                    'S' => {
                        m.starts.push((x, y));
                        Cell::Ground
                    }
                    'K' => {
                        m.keys.push((x, y));
                        Cell::Ground
                    }
                    other => return Err(perr(y + 1, format!("unknown cell character {other:?}"))),
                };
                m.cells.push(cell);
            }
        }
        if m.starts.is_empty() {
            return Err(perr(1, "map has no start cells".into()));
        }
        if m.goals.len() < 2 {
            return Err(perr(1, "map needs at least two goal cells (training and evaluation pools)".into()));
        }
        if m.keys.len() == 1 {
            return Err(perr(1, "a single hazard candidate would always be lava; use L".into()));
        }
        Ok(m)
    }

    pub fn cell(&self, x: i32, y: i32) -> Cell {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            Cell::Wall
        } else {
            self.cells[y as usize * self.width + x as usize]
        }
    }

    /// Goal cells in the training (`eval = false`) or evaluation pool.
    pub fn goal_pool(&self, eval: bool) -> Vec<(usize, usize)> {
        self.goals
            .iter()
            .enumerate()
            .filter(|(i, _)| (i % 2 == 1) == eval)
            .map(|(_, &g)| g)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridNavConfig {
    pub id: String,
    pub map: GridMap,
    pub horizon: usize,
}

impl GridNavConfig {
    pub fn default_map() -> Self {
        GridNavConfig {
            id: "gridnav".into(),
            map: GridMap::parse(include_str!("../../maps/default.txt"), "maps/default.txt").expect("bundled map"),
            horizon: 50,
        }
    }

    pub fn keyed_map() -> Self {
        GridNavConfig {
            id: "gridnav-keyed".into(),
            map: GridMap::parse(include_str!("../../maps/keyed.txt"), "maps/keyed.txt").expect("bundled map"),
            horizon: 40,
        }
    }
}

fn feature_spec() -> FeatureSpec {
    let mut names = vec!["position".to_string(), "heading".to_string(), "goal_delta".to_string()];
    let mut costs = vec![0.0; FREE_FEATURES];
    let mut widths = vec![2; FREE_FEATURES];
    for d in RAY_DIRS {
        for (r, c) in RAY_RANGES.iter().zip(RAY_COSTS) {
            names.push(format!("ray_{d}_{r}"));
            costs.push(c);
            widths.push(2);
        }
    }
    FeatureSpec::new(names, costs, widths).expect("valid spec")
}

#[derive(Debug, Clone)]
pub struct GridNav {
    cfg: GridNavConfig,
    spec: EnvSpec,
    eval_pool: bool,
    terrain: Vec<Cell>,
    pos: (i32, i32),
    heading: usize,
    goal: (i32, i32),
    best: f64,
    t: usize,
    done: bool,
    success: bool,
    dist: Vec<u32>,
    traces: u64,
}

impl GridNav {
    pub fn new(cfg: GridNavConfig) -> Result<Self> {
        let features = feature_spec();
        let spec = EnvSpec {
            id: cfg.id.clone(),
            state_dim: 5,
            action_dim: 2,
            action_low: vec![-1.0; 2],
            action_high: vec![1.0; 2],
            value_scales: vec![0.1; features.obs_dim()],
            features,
            horizon: cfg.horizon,
            termination: format!(
                "goal reached (+{GOAL_REWARD}), lava or water entered ({HAZARD_REWARD}), or {} steps",
                cfg.horizon
            ),
            return_scale: 10.0,
        };
        let n = cfg.map.cells.len();
        let mut env = GridNav {
            terrain: cfg.map.cells.clone(),
            cfg,
            spec,
            eval_pool: false,
            pos: (0, 0),
            heading: 0,
            goal: (0, 0),
            best: 0.0,
            t: 0,
            done: true,
            success: false,
            dist: vec![u32::MAX; n],
            traces: 0,
        };
        env.reset_state(0);
        Ok(env)
    }

    pub fn map(&self) -> &GridMap {
        &self.cfg.map
    }

    pub fn position(&self) -> (i32, i32) {
        self.pos
    }

    pub fn goal(&self) -> (i32, i32) {
        self.goal
    }

    pub fn best_distance(&self) -> f64 {
        self.best
    }

    /// Terrain of the current episode (hazard candidates resolved).
    pub fn terrain(&self, x: i32, y: i32) -> Cell {
        let m = &self.cfg.map;
        if x < 0 || y < 0 || x as usize >= m.width || y as usize >= m.height {
            Cell::Wall
        } else {
            self.terrain[y as usize * m.width + x as usize]
        }
    }

    /// Index of the hazard candidate that is lava this episode.
    pub fn lava_key(&self) -> Option<usize> {
        self.cfg
            .map
            .keys
            .iter()
            .position(|&(x, y)| self.terrain(x as i32, y as i32) == Cell::Lava)
    }

    fn goal_distance(&self) -> f64 {
        let dx = (self.goal.0 - self.pos.0) as f64;
        let dy = (self.goal.1 - self.pos.1) as f64;
        (dx * dx + dy * dy).sqrt()
    }

    /// Marches a ray from the agent; `(distance / range, kind)` of the first
    /// blocking cell, or `(1, 0)` when nothing is within range.
    pub fn trace(&self, dir: usize, range: usize) -> (f64, f64) {
        let (dx, dy) = STEPS[dir];
        for k in 1..=range as i32 {
            let c = self.terrain(self.pos.0 + k * dx, self.pos.1 + k * dy);
            if c != Cell::Ground {
                return (k as f64 / range as f64, c.kind_code());
            }
        }
        (1.0, 0.0)
    }

    fn passable(&self, x: i32, y: i32) -> bool {
        !matches!(self.terrain(x, y), Cell::Wall | Cell::Lava | Cell::Water)
    }

    /// Breadth-first distances to the goal over safe cells.
    fn compute_distances(&mut self) {
        let w = self.cfg.map.width;
        self.dist.iter_mut().for_each(|d| *d = u32::MAX);
        let idx = |x: i32, y: i32| y as usize * w + x as usize;
        let mut q = VecDeque::new();
        self.dist[idx(self.goal.0, self.goal.1)] = 0;
        q.push_back(self.goal);
        while let Some((x, y)) = q.pop_front() {
            let d = self.dist[idx(x, y)];
            for &(dx, dy) in &STEPS {
                let (nx, ny) = (x + dx, y + dy);
                if self.passable(nx, ny) && self.dist[idx(nx, ny)] == u32::MAX {
                    self.dist[idx(nx, ny)] = d + 1;
                    q.push_back((nx, ny));
                }
            }
        }
    }

    fn distance_at(&self, x: i32, y: i32) -> u32 {
        if self.passable(x, y) {
            self.dist[y as usize * self.cfg.map.width + x as usize]
        } else {
            u32::MAX
        }
    }

    /// Direction index for an `(east, north)` action, or `None` to stay.
    pub fn action_direction(a: &[f64]) -> Option<usize> {
        let (ax, ay) = (a[0], a[1]);
        if (ax * ax + ay * ay).sqrt() < STAY_RADIUS {
            return None;
        }
        let k = (ay.atan2(ax) / FRAC_PI_4).round() as i32;
        Some(k.rem_euclid(8) as usize)
    }

    fn direction_action(dir: usize) -> Vec<f64> {
        let th = dir as f64 * FRAC_PI_4;
        vec![EXPERT_SPEED * th.cos(), EXPERT_SPEED * th.sin()]
    }
}

impl Env for GridNav {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset_state(&mut self, seed: u64) {
        let mut r = rng::stream(seed, &[rng::tag::EPISODE]);
        let map = &self.cfg.map;
        self.terrain.clone_from(&map.cells);
        if !map.keys.is_empty() {
            let (kx, ky) = map.keys[r.random_range(0..map.keys.len())];
            self.terrain[ky * map.width + kx] = Cell::Lava;
        }
        let pool = map.goal_pool(self.eval_pool);
        let (gx, gy) = pool[r.random_range(0..pool.len())];
        let (sx, sy) = map.starts[r.random_range(0..map.starts.len())];
        self.goal = (gx as i32, gy as i32);
        self.pos = (sx as i32, sy as i32);
        self.heading = r.random_range(0..8);
        self.best = self.goal_distance();
        self.t = 0;
        self.done = false;
        self.success = false;
        self.compute_distances();
    }

    fn observe(&mut self, mask: &QueryMask) -> MaskedObservation {
        let m = self.cfg.map.width as f64;
        let h = self.cfg.map.height as f64;
        let mut values = vec![0.0; self.spec.obs_dim()];
        if mask.get(0) {
            values[0] = self.pos.0 as f64 / (m - 1.0);
            values[1] = self.pos.1 as f64 / (h - 1.0);
        }
        if mask.get(1) {
            let th = self.heading as f64 * FRAC_PI_4;
            values[2] = th.cos();
            values[3] = th.sin();
        }
        if mask.get(2) {
            values[4] = (self.goal.0 - self.pos.0) as f64 / m;
            values[5] = -(self.goal.1 - self.pos.1) as f64 / h;
        }
        for dir in 0..8 {
            for (ri, &range) in RAY_RANGES.iter().enumerate() {
                let f = FREE_FEATURES + dir * RAY_RANGES.len() + ri;
                if mask.get(f) {
                    self.traces += 1;
                    let (d, k) = self.trace(dir, range);
                    values[2 * f] = d;
                    values[2 * f + 1] = k;
                }
            }
        }
        MaskedObservation {
            values,
            mask: mask.clone(),
        }
    }

    fn advance(&mut self, action: &[f64]) -> Result<Transition> {
        if self.done {
            return Err(Error::Env(format!("{}: step after the episode ended", self.spec.id)));
        }
        if action.len() != 2 {
            return Err(Error::Env(format!("{}: action of length {}, expected 2", self.spec.id, action.len())));
        }
        let a = self.spec.clip_action(action);
        if let Some(dir) = GridNav::action_direction(&a) {
            self.heading = dir;
            let (dx, dy) = STEPS[dir];
            let (nx, ny) = (self.pos.0 + dx, self.pos.1 + dy);
            if self.terrain(nx, ny) != Cell::Wall {
                self.pos = (nx, ny);
            }
        }
        self.t += 1;
        let mut reward = 0.0;
        if self.terrain(self.pos.0, self.pos.1).deadly() {
            reward = HAZARD_REWARD;
            self.done = true;
        } else if self.pos == self.goal {
            reward = GOAL_REWARD;
            self.done = true;
            self.success = true;
        } else {
            let d = self.goal_distance();
            if d < self.best {
                self.best = d;
                reward = PROGRESS_REWARD;
            }
        }
        if self.t >= self.cfg.horizon {
            self.done = true;
        }
        Ok(Transition {
            reward,
            done: self.done,
        })
    }

    fn expert_action(&self) -> Vec<f64> {
        let here = self.distance_at(self.pos.0, self.pos.1);
        let mut best: Option<(u32, usize)> = None;
        for (dir, &(dx, dy)) in STEPS.iter().enumerate() {
            let d = self.distance_at(self.pos.0 + dx, self.pos.1 + dy);
            if d < here && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, dir));
            }
        }
        match best {
            Some((_, dir)) => GridNav::direction_action(dir),
            None => vec![0.0, 0.0],
        }
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn t(&self) -> usize {
        self.t
    }

    fn success(&self) -> Option<bool> {
        Some(self.success)
    }

    fn set_eval_pool(&mut self, eval: bool) {
        self.eval_pool = eval;
    }

    fn ray_traces(&self) -> u64 {
        self.traces
    }

    fn boxed_clone(&self) -> Box<dyn Env> {
        Box::new(self.clone())
    }
}

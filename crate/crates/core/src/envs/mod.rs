//! Non-stationary gridworlds driven as a single continuing stream.

mod switching;
mod two_colors;

pub use switching::{generate_mdp, GridMdp, SwitchingMdps, SwitchingSchedule};
pub use two_colors::{ObjectId, TwoColors, TwoColorsState, GRID, OBS_DIM};

use thiserror::Error;

pub const NUM_ACTIONS: usize = 4;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("action {action} outside [0, {n})")]
    InvalidAction { action: usize, n: usize },
    #[error("grid {width}x{height} is too small: {reason}")]
    GridTooSmall { width: usize, height: usize, reason: &'static str },
    #[error("invalid environment setting: {0}")]
    Config(String),
}

/// One step of experience.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// 0 when the value of `next_obs` must not be bootstrapped into this step.
    pub continuation: f64,
}

/// Grid moves shared by both environments. `y` grows downwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Move {
    Up,
    Down,
    Left,
    Right,
}

impl Move {
    pub fn from_index(action: usize) -> Result<Self, EnvError> {
        match action {
            0 => Ok(Move::Up),
            1 => Ok(Move::Down),
            2 => Ok(Move::Left),
            3 => Ok(Move::Right),
            _ => Err(EnvError::InvalidAction { action, n: NUM_ACTIONS }),
        }
    }

    /// Target cell, or `None` if it leaves the grid.
    pub fn apply(self, (x, y): (usize, usize), width: usize, height: usize) -> Option<(usize, usize)> {
        match self {
            Move::Up => y.checked_sub(1).map(|y| (x, y)),
            Move::Down => (y + 1 < height).then_some((x, y + 1)),
            Move::Left => x.checked_sub(1).map(|x| (x, y)),
            Move::Right => (x + 1 < width).then_some((x + 1, y)),
        }
    }
}

/// Interface the learners and the runner use to drive an environment.
pub trait Environment: Send {
    fn obs_dim(&self) -> usize;
    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }
    fn observe(&self) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<Transition, EnvError>;
    /// Number of task switches so far.
    fn task_index(&self) -> u64;
    /// Flat index of the agent's cell, for state-visitation statistics.
    fn agent_cell(&self) -> usize;
    fn num_cells(&self) -> usize;
}

pub(crate) fn one_hot_into(out: &mut [f64], idx: usize) {
    out[idx] = 1.0;
}

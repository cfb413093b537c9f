use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{one_hot_into, EnvError, Environment, Move, Transition};

pub const GRID: usize = 5;
pub const OBS_DIM: usize = 6 * GRID;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectId {
    A,
    B,
}

impl ObjectId {
    fn other(self) -> Self {
        match self {
            ObjectId::A => ObjectId::B,
            ObjectId::B => ObjectId::A,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoColorsState {
    pub agent_pos: (usize, usize),
    pub obj_a_pos: (usize, usize),
    pub obj_b_pos: (usize, usize),
    pub rewarding_object: ObjectId,
    pub steps_since_switch: u64,
    pub switch_period: u64,
}

/// 5x5 gridworld with two objects; which one pays +1 flips every `switch_period` steps.
#[derive(Clone, Debug)]
pub struct TwoColors {
    state: TwoColorsState,
    switches: u64,
    rng: ChaCha8Rng,
}

impl TwoColors {
    pub fn new(switch_period: u64, seed: u64) -> Result<Self, EnvError> {
        if switch_period == 0 {
            return Err(EnvError::Config("switch period must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [agent, a, b] = distinct_cells(&mut rng);
        let state = TwoColorsState {
            agent_pos: agent,
            obj_a_pos: a,
            obj_b_pos: b,
            rewarding_object: ObjectId::A,
            steps_since_switch: 0,
            switch_period,
        };
        Ok(Self { state, switches: 0, rng })
    }

    /// Starts from an explicit state; respawns draw from `seed`.
    pub fn from_state(state: TwoColorsState, seed: u64) -> Self {
        Self { state, switches: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn state(&self) -> &TwoColorsState {
        &self.state
    }

    pub fn observe_state(state: &TwoColorsState) -> Vec<f64> {
        let mut obs = vec![0.0; OBS_DIM];
        for (k, &(x, y)) in [state.agent_pos, state.obj_a_pos, state.obj_b_pos].iter().enumerate() {
            one_hot_into(&mut obs[2 * k * GRID..(2 * k + 1) * GRID], x);
            one_hot_into(&mut obs[(2 * k + 1) * GRID..(2 * k + 2) * GRID], y);
        }
        obs
    }

    fn position_of(&self, obj: ObjectId) -> (usize, usize) {
        match obj {
            ObjectId::A => self.state.obj_a_pos,
            ObjectId::B => self.state.obj_b_pos,
        }
    }
}

fn distinct_cells(rng: &mut ChaCha8Rng) -> [(usize, usize); 3] {
    let picked = sample(rng, GRID * GRID, 3);
    let cell = |i: usize| (i % GRID, i / GRID);
    [cell(picked.index(0)), cell(picked.index(1)), cell(picked.index(2))]
}

impl Environment for TwoColors {
    fn obs_dim(&self) -> usize {
        OBS_DIM
    }

    fn observe(&self) -> Vec<f64> {
        Self::observe_state(&self.state)
    }

    fn step(&mut self, action: usize) -> Result<Transition, EnvError> {
        let mv = Move::from_index(action)?;
        let obs = self.observe();
        if let Some(pos) = mv.apply(self.state.agent_pos, GRID, GRID) {
            self.state.agent_pos = pos;
        }

        let good = self.state.rewarding_object;
        let (reward, continuation) = if self.state.agent_pos == self.position_of(good) {
            (1.0, 0.0)
        } else if self.state.agent_pos == self.position_of(good.other()) {
            (-1.0, 0.0)
        } else {
            (0.0, 1.0)
        };
        if continuation == 0.0 {
            let [agent, a, b] = distinct_cells(&mut self.rng);
            self.state.agent_pos = agent;
            self.state.obj_a_pos = a;
            self.state.obj_b_pos = b;
        }

        self.state.steps_since_switch += 1;
        if self.state.steps_since_switch == self.state.switch_period {
            self.state.rewarding_object = good.other();
            self.state.steps_since_switch = 0;
            self.switches += 1;
        }

        Ok(Transition { obs, action, reward, next_obs: self.observe(), continuation })
    }

    fn task_index(&self) -> u64 {
        self.switches
    }

    fn agent_cell(&self) -> usize {
        let (x, y) = self.state.agent_pos;
        y * GRID + x
    }

    fn num_cells(&self) -> usize {
        GRID * GRID
    }
}

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{one_hot_into, EnvError, Environment, Move, Transition, NUM_ACTIONS};

pub const MAX_WALLS: usize = 15;

/// Randomly generated gridworld with dense per-(state, action) rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMdp {
    pub width: usize,
    pub height: usize,
    /// `walls[cell]` is true when the cell is blocked.
    pub walls: Vec<bool>,
    /// Indexed by `cell * NUM_ACTIONS + action`.
    pub rewards: Vec<f64>,
    pub start_cell: usize,
    pub goal_cell: usize,
}

impl GridMdp {
    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn wall_count(&self) -> usize {
        self.walls.iter().filter(|w| **w).count()
    }

    pub fn reward(&self, cell: usize, action: usize) -> f64 {
        self.rewards[cell * NUM_ACTIONS + action]
    }

    pub fn cell(&self, (x, y): (usize, usize)) -> usize {
        y * self.width + x
    }

    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell % self.width, cell / self.width)
    }
}

/// Reward entry: 50% zero, 20% +1, 20% -1, 10% uniform on [-1, 1].
fn sample_reward<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen();
    if u < 0.5 {
        0.0
    } else if u < 0.7 {
        1.0
    } else if u < 0.9 {
        -1.0
    } else {
        rng.gen_range(-1.0..=1.0)
    }
}

/// Draws one MDP. Walls are placed one at a time on cells not already taken by
/// the start, the goal or an earlier wall; collisions are skipped, so at most
/// [`MAX_WALLS`] walls result.
pub fn generate_mdp<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize) -> Result<GridMdp, EnvError> {
    let cells = width * height;
    if cells <= MAX_WALLS + 2 {
        return Err(EnvError::GridTooSmall { width, height, reason: "need more than 17 cells for walls, start and goal" });
    }
    let rewards = (0..cells * NUM_ACTIONS).map(|_| sample_reward(rng)).collect();
    let start_cell = rng.gen_range(0..cells);
    let goal_cell = loop {
        let c = rng.gen_range(0..cells);
        if c != start_cell {
            break c;
        }
    };
    let mut walls = vec![false; cells];
    for _ in 0..MAX_WALLS {
        let c = rng.gen_range(0..cells);
        if c != start_cell && c != goal_cell && !walls[c] {
            walls[c] = true;
        }
    }
    Ok(GridMdp { width, height, walls, rewards, start_cell, goal_cell })
}

/// Which MDP of the pregenerated set is active, switching every `period` steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwitchingSchedule {
    pub period: u64,
    pub n_mdps: usize,
    pub seed: u64,
}

/// Sequence of gridworlds resampled uniformly with replacement at every period boundary.
#[derive(Clone, Debug)]
pub struct SwitchingMdps {
    schedule: SwitchingSchedule,
    mdps: Vec<GridMdp>,
    schedule_rng: ChaCha8Rng,
    current: usize,
    agent: usize,
    steps: u64,
    switches: u64,
    history: Vec<usize>,
}

impl SwitchingMdps {
    pub fn new(schedule: SwitchingSchedule, width: usize, height: usize) -> Result<Self, EnvError> {
        if schedule.period == 0 || schedule.n_mdps == 0 {
            return Err(EnvError::Config("period and number of MDPs must be positive".into()));
        }
        let mut gen_rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        let mdps = (0..schedule.n_mdps)
            .map(|_| generate_mdp(&mut gen_rng, width, height))
            .collect::<Result<Vec<_>, _>>()?;
        let mut schedule_rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0x5157_4348_4d44_5053);
        let current = schedule_rng.gen_range(0..mdps.len());
        let agent = mdps[current].start_cell;
        Ok(Self { schedule, mdps, schedule_rng, current, agent, steps: 0, switches: 0, history: vec![current] })
    }

    pub fn current_mdp(&self) -> &GridMdp {
        &self.mdps[self.current]
    }

    pub fn current_index(&self) -> usize {
        self.current
    }

    pub fn mdps(&self) -> &[GridMdp] {
        &self.mdps
    }

    /// Indices of the MDPs used so far, one per task.
    pub fn history(&self) -> &[usize] {
        &self.history
    }

    pub fn agent_pos(&self) -> (usize, usize) {
        self.current_mdp().coords(self.agent)
    }

    /// Moves the agent to `cell` (for tests and scripted probes).
    pub fn place_agent(&mut self, cell: usize) {
        assert!(!self.current_mdp().walls[cell], "cannot place the agent in a wall");
        self.agent = cell;
    }

    fn switch_task(&mut self) {
        self.current = self.schedule_rng.gen_range(0..self.mdps.len());
        self.history.push(self.current);
        self.switches += 1;
        if self.mdps[self.current].walls[self.agent] {
            self.agent = self.mdps[self.current].start_cell;
        }
    }
}

impl Environment for SwitchingMdps {
    fn obs_dim(&self) -> usize {
        let m = self.current_mdp();
        m.width + m.height
    }

    fn observe(&self) -> Vec<f64> {
        let m = self.current_mdp();
        let (x, y) = m.coords(self.agent);
        let mut obs = vec![0.0; m.width + m.height];
        one_hot_into(&mut obs[..m.width], x);
        one_hot_into(&mut obs[m.width..], y);
        obs
    }

    fn step(&mut self, action: usize) -> Result<Transition, EnvError> {
        let mv = Move::from_index(action)?;
        let obs = self.observe();
        let mdp = &self.mdps[self.current];
        let reward = mdp.reward(self.agent, action);
        if let Some(target) = mv.apply(mdp.coords(self.agent), mdp.width, mdp.height) {
            let c = mdp.cell(target);
            if !mdp.walls[c] {
                self.agent = c;
            }
        }
        self.steps += 1;
        if self.steps % self.schedule.period == 0 {
            self.switch_task();
        }
        Ok(Transition { obs, action, reward, next_obs: self.observe(), continuation: 1.0 })
    }

    fn task_index(&self) -> u64 {
        self.switches
    }

    fn agent_cell(&self) -> usize {
        self.agent
    }

    fn num_cells(&self) -> usize {
        self.current_mdp().num_cells()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_entry_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 4];
        let mut n = 0;
        while n < 100_000 {
            let m = generate_mdp(&mut rng, 10, 10).unwrap();
            for &r in &m.rewards {
                let k = if r == 0.0 {
                    0
                } else if r == 1.0 {
                    1
                } else if r == -1.0 {
                    2
                } else {
                    3
                };
                counts[k] += 1;
                assert!((-1.0..=1.0).contains(&r));
            }
            n += m.rewards.len();
        }
        let f = |k: usize| counts[k] as f64 / n as f64;
        assert!((0.49..=0.51).contains(&f(0)), "zeros {}", f(0));
        assert!((f(1) - 0.2).abs() <= 0.01);
        assert!((f(2) - 0.2).abs() <= 0.01);
        assert!((f(3) - 0.1).abs() <= 0.01);
    }

    #[test]
    fn walls_avoid_start_and_goal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let m = generate_mdp(&mut rng, 10, 10).unwrap();
            assert!(m.wall_count() <= MAX_WALLS);
            assert!(!m.walls[m.start_cell] && !m.walls[m.goal_cell]);
            assert_ne!(m.start_cell, m.goal_cell);
        }
    }

    #[test]
    fn too_small_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(generate_mdp(&mut rng, 4, 4), Err(EnvError::GridTooSmall { .. })));
        assert!(generate_mdp(&mut rng, 6, 3).is_ok());
    }

    #[test]
    fn same_seed_same_mdp() {
        let a = generate_mdp(&mut ChaCha8Rng::seed_from_u64(5), 10, 10).unwrap();
        let b = generate_mdp(&mut ChaCha8Rng::seed_from_u64(5), 10, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wall_blocks_movement_but_pays_reward() {
        let sched = SwitchingSchedule { period: 1000, n_mdps: 1, seed: 3 };
        let mut env = SwitchingMdps::new(sched, 10, 10).unwrap();
        let m = env.current_mdp().clone();
        // find a free cell with a wall to its right
        let cell = (0..m.num_cells())
            .find(|&c| {
                let (x, y) = m.coords(c);
                !m.walls[c] && x + 1 < m.width && m.walls[m.cell((x + 1, y))]
            })
            .expect("some wall has a free left neighbour");
        env.place_agent(cell);
        let t = env.step(3).unwrap();
        assert_eq!(env.agent_cell(), cell);
        assert_eq!(t.reward, m.reward(cell, 3));
        assert_eq!(t.continuation, 1.0);
        assert_eq!(t.obs.len(), 20);
    }

    #[test]
    fn single_mdp_never_changes() {
        let sched = SwitchingSchedule { period: 10, n_mdps: 1, seed: 4 };
        let mut env = SwitchingMdps::new(sched, 10, 10).unwrap();
        let first = env.current_mdp().clone();
        for t in 0..55 {
            env.step(t % 4).unwrap();
        }
        assert_eq!(env.task_index(), 5);
        assert_eq!(env.current_mdp(), &first);
    }

    #[test]
    fn schedule_reproducible() {
        let run = || {
            let sched = SwitchingSchedule { period: 100, n_mdps: 4, seed: 9 };
            let mut env = SwitchingMdps::new(sched, 10, 10).unwrap();
            let mut rewards = Vec::new();
            for t in 0..1000 {
                rewards.push(env.step((t * 7 + 3) % 4).unwrap().reward);
            }
            (env.history().to_vec(), rewards)
        };
        let (h1, r1) = run();
        let (h2, r2) = run();
        assert_eq!(h1, h2);
        assert_eq!(r1, r2);
        assert_eq!(h1.len(), 11);
    }
}

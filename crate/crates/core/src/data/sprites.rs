//! A small pick-and-place sprites world rendered to RGB frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::image::Frame;
use crate::motion::{sample_grid, TrajectorySet};

use super::{EpisodeMeta, EpisodeRecord};

pub const STEP_SCALE: f64 = 0.05;
pub const PICKUP_RADIUS: f64 = 0.08;
pub const ACTION_DIM: usize = 2;
pub const ENV_NAME: &str = "sprites";

const AGENT_RADIUS: f64 = 0.06;
const OBJECT_RADIUS: f64 = 0.05;
const GOAL_RADIUS: f64 = 0.07;
const BACKGROUND: [u8; 3] = [24, 24, 32];
const GOAL_COLOR: [u8; 3] = [60, 200, 80];
const AGENT_COLOR: [u8; 3] = [70, 120, 250];
const OBJECT_COLORS: [[u8; 3]; 4] = [[230, 80, 60], [240, 200, 60], [200, 90, 220], [80, 220, 220]];

#[derive(Clone, Debug, PartialEq)]
pub struct SpritesState {
    pub agent: [f64; 2],
    pub objects: Vec<[f64; 2]>,
    pub goal: [f64; 2],
    pub carried: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: SpritesState,
    pub reward: f64,
    pub frame: Frame,
    /// Whether the action had to be clamped into `[-1, 1]^2`.
    pub clamped: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn clamp_unit(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

impl SpritesState {
    pub fn new(agent: [f64; 2], objects: Vec<[f64; 2]>, goal: [f64; 2]) -> Self {
        let carried = vec![false; objects.len()];
        let mut s = Self { agent: clamp_unit(agent), objects: objects.into_iter().map(clamp_unit).collect(), goal: clamp_unit(goal), carried };
        s.pick_up();
        s
    }

    pub fn random<R: Rng>(num_objects: usize, rng: &mut R) -> Self {
        let mut p = || [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        let agent = p();
        let goal = p();
        let objects = (0..num_objects).map(|_| p()).collect();
        Self::new(agent, objects, goal)
    }

    fn pick_up(&mut self) {
        for (o, c) in self.objects.iter().zip(self.carried.iter_mut()) {
            if dist(*o, self.agent) <= PICKUP_RADIUS {
                *c = true;
            }
        }
    }

    /// Negative distance from the object nearest the goal to the goal.
    pub fn reward(&self) -> f64 {
        if self.objects.is_empty() {
            return 0.0;
        }
        -self.objects.iter().map(|&o| dist(o, self.goal)).fold(f64::INFINITY, f64::min)
    }

    pub fn render(&self, size: usize) -> Frame {
        let mut f = Frame::filled(size, size, BACKGROUND);
        draw_disc(&mut f, self.goal, GOAL_RADIUS, GOAL_COLOR);
        for (i, &o) in self.objects.iter().enumerate() {
            draw_disc(&mut f, o, OBJECT_RADIUS, OBJECT_COLORS[i % OBJECT_COLORS.len()]);
        }
        draw_disc(&mut f, self.agent, AGENT_RADIUS, AGENT_COLOR);
        f
    }
}

/// Antialiased disc with coverage `clamp(r - d + 1/2, 0, 1)` in pixel units.
fn draw_disc(f: &mut Frame, centre: [f64; 2], radius: f64, color: [u8; 3]) {
    let s = f.width as f64;
    let (cx, cy, r) = (centre[0] * s, centre[1] * s, radius * s);
    let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + r + 1.0).ceil() as usize).min(f.height);
    let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + r + 1.0).ceil() as usize).min(f.width);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy);
            let cov = (r - d + 0.5).clamp(0.0, 1.0);
            if cov > 0.0 {
                let old = f.pixel(y, x);
                let mut px = [0u8; 3];
                for c in 0..3 {
                    px[c] = (old[c] as f64 * (1.0 - cov) + color[c] as f64 * cov).round() as u8;
                }
                f.set_pixel(y, x, px);
            }
        }
    }
}

/// Moves the agent by `0.05 * action` (clamped to the unit square); carried
/// objects move with it and objects within reach are picked up.
pub fn sprites_step(state: &SpritesState, action: [f64; 2], size: usize) -> StepOutcome {
    let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
    let clamped = a != action;
    let mut s = state.clone();
    let old = s.agent;
    s.agent = clamp_unit([old[0] + STEP_SCALE * a[0], old[1] + STEP_SCALE * a[1]]);
    let delta = [s.agent[0] - old[0], s.agent[1] - old[1]];
    for (o, &c) in s.objects.iter_mut().zip(&s.carried) {
        if c {
            *o = clamp_unit([o[0] + delta[0], o[1] + delta[1]]);
        }
    }
    s.pick_up();
    let reward = s.reward();
    let frame = s.render(size);
    StepOutcome { state: s, reward, frame, clamped }
}

/// Noisy scripted policy: head for the nearest free object, then for the goal.
pub fn scripted_action<R: Rng>(s: &SpritesState, noise: f64, rng: &mut R) -> [f64; 2] {
    let target = if s.carried.iter().any(|&c| c) {
        s.goal
    } else {
        s.objects.iter().copied().min_by(|a, b| dist(*a, s.agent).total_cmp(&dist(*b, s.agent))).unwrap_or(s.goal)
    };
    let n = Normal::new(0.0, noise.max(1e-12)).expect("valid noise");
    let mut a = [0.0; 2];
    for k in 0..2 {
        a[k] = ((target[k] - s.agent[k]) / STEP_SCALE + n.sample(rng)).clamp(-1.0, 1.0);
    }
    a
}

/// Grid-seeded tracks that follow whichever sprite covers each query point
/// in the first frame (static for background points), confidence 1.
pub fn ground_truth_tracks(states: &[SpritesState], size: usize, grid: usize) -> Result<TrajectorySet> {
    let first = states.first().ok_or_else(|| Error::invalid("no states to track"))?;
    let queries = sample_grid(size, size, grid)?;
    let s = size as f64;
    let t = states.len();
    let mut points = Vec::with_capacity(queries.len() * t * 2);
    for &(qx, qy) in &queries {
        let u = [qx / s, qy / s];
        let owner: Option<Box<dyn Fn(&SpritesState) -> [f64; 2]>> = if dist(u, first.agent) <= AGENT_RADIUS {
            Some(Box::new(|st: &SpritesState| st.agent))
        } else if let Some(i) = (0..first.objects.len()).rev().find(|&i| dist(u, first.objects[i]) <= OBJECT_RADIUS) {
            Some(Box::new(move |st: &SpritesState| st.objects[i]))
        } else {
            None
        };
        for st in states {
            let (x, y) = match &owner {
                Some(f) => {
                    let (c0, c) = (f(first), f(st));
                    (qx + (c[0] - c0[0]) * s, qy + (c[1] - c0[1]) * s)
                }
                None => (qx, qy),
            };
            points.push(x as f32);
            points.push(y as f32);
        }
    }
    let n = queries.len();
    TrajectorySet::new(t, size, size, grid, points, vec![1.0; n * t])
}

/// Rolls out the scripted policy for `len` frames. `actions[t]` is the
/// action applied after frame `t`; `rewards[t]` is the reward of frame `t`.
pub fn generate_episode(cfg: &DataConfig, seed: u64, index: u64) -> Result<EpisodeRecord> {
    if cfg.episode_len == 0 {
        return Err(Error::config("data.episode_len", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut state = SpritesState::random(cfg.num_objects, &mut rng);
    let mut states = Vec::with_capacity(cfg.episode_len);
    let mut frames = Vec::with_capacity(cfg.episode_len);
    let mut actions = Vec::with_capacity(cfg.episode_len * ACTION_DIM);
    let mut rewards = Vec::with_capacity(cfg.episode_len);
    for _ in 0..cfg.episode_len {
        frames.push(state.render(cfg.frame_size));
        rewards.push(state.reward() as f32);
        states.push(state.clone());
        let a = scripted_action(&state, 0.6, &mut rng);
        let a32 = [a[0] as f32, a[1] as f32];
        actions.extend_from_slice(&a32);
        state = sprites_step(&state, [a32[0] as f64, a32[1] as f64], cfg.frame_size).state;
    }
    let trajectories = Some(ground_truth_tracks(&states, cfg.frame_size, cfg.grid_size)?);
    EpisodeRecord::new(
        frames,
        actions,
        ACTION_DIM,
        rewards,
        trajectories,
        EpisodeMeta { env: ENV_NAME.into(), seed, step_size: cfg.step_size },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_action_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = SpritesState::random(3, &mut rng);
        let out = sprites_step(&s, [0.0, 0.0], 32);
        assert_eq!(out.state, s);
        assert_eq!(out.frame, s.render(32));
        assert!(!out.clamped);
    }

    #[test]
    fn unit_action_moves_by_step_scale() {
        let s = SpritesState::new([0.5, 0.5], vec![[0.9, 0.9]], [0.1, 0.1]);
        let out = sprites_step(&s, [1.0, 0.0], 32);
        assert!((out.state.agent[0] - 0.55).abs() < 1e-15 && out.state.agent[1] == 0.5);
        assert!(sprites_step(&s, [2.0, 0.0], 32).clamped);
    }

    #[test]
    fn object_at_goal_gives_zero_reward() {
        let s = SpritesState::new([0.1, 0.1], vec![[0.7, 0.3], [0.4, 0.4]], [0.4, 0.4]);
        assert_eq!(s.reward(), 0.0);
    }
}

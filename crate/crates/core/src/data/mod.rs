//! Episodes: the synthetic environment that produces them, session
//! preprocessing into fixed-length clips, segment sampling and the on-disk
//! container.

mod container;
mod preprocess;
pub mod sprites;

pub(crate) use container::write_atomically;
pub use container::{list_episodes, read_episode, read_session, write_dataset, write_episode, write_session};
pub use preprocess::{downsample_factor, preprocess_session, sample_start, sample_training_segment, PreprocessConfig, Session};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Frame;
use crate::motion::TrajectorySet;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub env: String,
    pub seed: u64,
    pub step_size: usize,
}

/// Aligned frames, actions and rewards of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub frames: Vec<Frame>,
    /// `T x action_dim`, row-major.
    pub actions: Vec<f32>,
    pub action_dim: usize,
    pub rewards: Vec<f32>,
    pub trajectories: Option<TrajectorySet>,
    pub meta: EpisodeMeta,
}

impl EpisodeRecord {
    pub fn new(
        frames: Vec<Frame>,
        actions: Vec<f32>,
        action_dim: usize,
        rewards: Vec<f32>,
        trajectories: Option<TrajectorySet>,
        meta: EpisodeMeta,
    ) -> Result<Self> {
        let t = frames.len();
        if t == 0 {
            return Err(Error::invalid("episode without frames"));
        }
        let (h, w) = (frames[0].height, frames[0].width);
        if frames.iter().any(|f| f.height != h || f.width != w) {
            return Err(Error::invalid("frames of one episode must share a size"));
        }
        if actions.len() != t * action_dim {
            return Err(Error::invalid(format!("{} action values for {t} frames of dimension {action_dim}", actions.len())));
        }
        if rewards.len() != t {
            return Err(Error::invalid(format!("{} rewards for {t} frames", rewards.len())));
        }
        if let Some(tr) = &trajectories {
            if tr.t != t || tr.height != h || tr.width != w {
                return Err(Error::invalid("trajectories do not match the episode's length or frame size"));
            }
        }
        Ok(Self { frames, actions, action_dim, rewards, trajectories, meta })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    /// Action applied after frame index `t` (0-based).
    pub fn action(&self, t: usize) -> Vec<f64> {
        self.actions[t * self.action_dim..(t + 1) * self.action_dim].iter().map(|&v| v as f64).collect()
    }

    pub fn actions_f64(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|t| self.action(t)).collect()
    }

    pub fn rewards_f64(&self) -> Vec<f64> {
        self.rewards.iter().map(|&r| r as f64).collect()
    }

    /// Sub-episode at the given frame indices.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if idx.iter().any(|&i| i >= self.len()) {
            return Err(Error::invalid("selected frame index outside the episode"));
        }
        let frames = idx.iter().map(|&i| self.frames[i].clone()).collect();
        let actions = idx.iter().flat_map(|&i| self.actions[i * self.action_dim..(i + 1) * self.action_dim].iter().copied()).collect();
        let rewards = idx.iter().map(|&i| self.rewards[i]).collect();
        let trajectories = self.trajectories.as_ref().map(|tr| {
            let mut points = Vec::new();
            let mut confidence = Vec::new();
            for n in 0..tr.n {
                for &i in idx {
                    let k = n * tr.t + i;
                    points.extend_from_slice(&tr.points[2 * k..2 * k + 2]);
                    confidence.push(tr.confidence[k]);
                }
            }
            TrajectorySet { t: idx.len(), points, confidence, ..tr.clone() }
        });
        Self::new(frames, actions, self.action_dim, rewards, trajectories, self.meta.clone())
    }
}

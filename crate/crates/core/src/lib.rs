//! Scale-wise autoregressive video world model.
//!
//! Frames are tokenized into coarse-to-fine token maps by a multi-scale
//! vector-quantized tokenizer. A decoder-only transformer predicts the token
//! maps of future frames scale by scale, causally across frames and in
//! parallel within a scale, conditioned on actions and optionally on a
//! motion-trajectory prompt.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod image;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod rollout;
pub mod tokenizer;
pub mod train;

pub use config::{load_config, scale_weights, scaled_model_config, write_config, Config, ModelConfig, RunConfig, ScaleSchedule};
pub use error::{Error, Result};
pub use swm_autograd as autograd;

use serde::{Deserialize, Serialize};

/// Which tokenizer branch a frame belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Observed,
    Future,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Observed => "observed",
            Role::Future => "future",
        }
    }

    /// Role of 1-based frame `t` in a sequence with `t0` context frames.
    pub fn of_frame(t: usize, t0: usize) -> Role {
        if t <= t0 {
            Role::Observed
        } else {
            Role::Future
        }
    }
}

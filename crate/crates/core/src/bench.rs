//! Scale-wise versus raster-scan decoding benchmark with shared weights.

use std::time::Instant;

use swm_autograd::Float;

use crate::error::{Error, Result};
use crate::image::{frames_to_tensor, Frame};
use crate::layout::{build_layout, build_raster_layout, LayoutKind, TokenStreamLayout};
use crate::embed::StreamState;
use crate::model::WorldModel;
use crate::rollout::{decode_block_batched, DecodeState, SamplingConfig};
use crate::tokenizer::{MultiScaleTokenMap, Tokenizer};
use crate::Role;

#[derive(Clone, Copy, Debug)]
pub struct BenchConfig {
    pub batch: usize,
    pub context_frames: usize,
    pub future_frames: usize,
    pub warmups: usize,
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { batch: 16, context_frames: 1, future_frames: 1, warmups: 2, repetitions: 5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub layout: &'static str,
    /// Sequential forward passes per future frame, from the layout.
    pub steps_per_frame: usize,
    /// Passes actually executed per future frame during decoding.
    pub measured_steps_per_frame: usize,
    /// Median decode wall-clock per video in seconds.
    pub seconds_per_video: f64,
    pub tokens_per_s: f64,
    /// Every timed repetition in seconds (whole batch).
    pub runs: Vec<f64>,
}

pub fn layout_name(kind: LayoutKind) -> &'static str {
    match kind {
        LayoutKind::ScaleWise => "scalewise",
        LayoutKind::Raster => "raster",
    }
}

pub fn bench_layout(model_schedule: &crate::ScaleSchedule, kind: LayoutKind, cfg: &BenchConfig) -> Result<TokenStreamLayout> {
    let frames = cfg.context_frames + cfg.future_frames;
    match kind {
        LayoutKind::ScaleWise => build_layout(model_schedule, frames, cfg.context_frames, false),
        LayoutKind::Raster => build_raster_layout(model_schedule, frames, cfg.context_frames),
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Greedy batched decoding of the future frames after a prefilled context.
/// Only the decoding passes are timed.
pub fn bench_decode<F: Float>(model: &WorldModel<F>, tok: &Tokenizer<F>, kind: LayoutKind, cfg: &BenchConfig) -> Result<BenchRow> {
    if cfg.batch == 0 || cfg.repetitions < 5 || cfg.future_frames == 0 {
        return Err(Error::invalid("benchmark needs a positive batch, at least 5 repetitions and one future frame"));
    }
    let layout = bench_layout(&model.schedule, kind, cfg)?;
    let blank = Frame::filled(tok.spec.frame_size, tok.spec.frame_size, [0, 0, 0]);
    let ctx_frames: Vec<&Frame> = vec![&blank; cfg.context_frames];
    let mut context: Vec<MultiScaleTokenMap> = tok.encode_multiscale(&frames_to_tensor(&ctx_frames)?, Role::Observed, None)?;
    for (i, m) in context.iter_mut().enumerate() {
        m.frame = i + 1;
    }
    let actions = vec![vec![0.0; model.cfg.action_dim]; layout.frames];
    let fresh = || -> Result<Vec<DecodeState<F>>> {
        (0..cfg.batch)
            .map(|i| {
                let stream = StreamState::new(layout.clone(), model.vocab, model.cfg.width, tok.spec.embed_dim, &actions)?;
                let mut s = DecodeState::new(model, stream, true, SamplingConfig::greedy(), i as u64)?;
                s.prefill(model, tok, None, &context)?;
                Ok(s)
            })
            .collect()
    };
    let mut runs = Vec::with_capacity(cfg.repetitions);
    let mut measured = 0;
    for rep in 0..cfg.warmups + cfg.repetitions {
        let mut states = fresh()?;
        let before = states[0].forward_passes;
        let t0 = Instant::now();
        while !states[0].is_done() {
            decode_block_batched(model, tok, &mut states)?;
        }
        let dt = t0.elapsed().as_secs_f64();
        measured = (states[0].forward_passes - before) / cfg.future_frames;
        if rep >= cfg.warmups {
            runs.push(dt);
        }
    }
    let med = median(&runs);
    let first = layout.first_future_block();
    let tokens: usize = layout.blocks[first..].iter().filter(|b| b.is_code()).map(|b| b.len).sum();
    Ok(BenchRow {
        layout: layout_name(kind),
        steps_per_frame: layout.steps_per_future_frame(),
        measured_steps_per_frame: measured,
        seconds_per_video: med / cfg.batch as f64,
        tokens_per_s: (tokens * cfg.batch) as f64 / med,
        runs,
    })
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub scalewise: BenchRow,
    pub raster: BenchRow,
}

impl BenchReport {
    pub fn step_ratio(&self) -> f64 {
        self.raster.steps_per_frame as f64 / self.scalewise.steps_per_frame as f64
    }

    pub fn speedup(&self) -> f64 {
        self.raster.seconds_per_video / self.scalewise.seconds_per_video
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layout,steps_per_frame,seconds_per_video,tokens_per_s,step_ratio,speedup\n");
        for r in [&self.scalewise, &self.raster] {
            s.push_str(&format!(
                "{},{},{:.6},{:.1},{:.4},{:.4}\n",
                r.layout,
                r.steps_per_frame,
                r.seconds_per_video,
                r.tokens_per_s,
                self.step_ratio(),
                self.speedup()
            ));
        }
        s
    }
}

/// Runs both layouts with the same weights; timing runs are sequential.
pub fn bench_both<F: Float>(model: &WorldModel<F>, tok: &Tokenizer<F>, cfg: &BenchConfig) -> Result<BenchReport> {
    let scalewise = bench_decode(model, tok, LayoutKind::ScaleWise, cfg)?;
    let raster = bench_decode(model, tok, LayoutKind::Raster, cfg)?;
    Ok(BenchReport { scalewise, raster })
}

use rand::Rng;

use super::{EpisodeMeta, EpisodeRecord};
use crate::error::{Error, Result};
use crate::image::Frame;

/// Frame rate of raw sessions.
pub const SOURCE_FPS: usize = 30;

/// A raw recording at the source frame rate with a segment id per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub frames: Vec<Frame>,
    pub actions: Vec<f32>,
    pub action_dim: usize,
    pub rewards: Vec<f32>,
    pub segment_ids: Vec<u32>,
    pub meta: EpisodeMeta,
}

impl Session {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames.len();
        if t == 0 {
            return Err(Error::invalid("empty session"));
        }
        if self.actions.len() != t * self.action_dim || self.rewards.len() != t || self.segment_ids.len() != t {
            return Err(Error::invalid(format!(
                "inconsistent stream lengths: {t} frames, {} action values (dim {}), {} rewards, {} segment ids",
                self.actions.len(),
                self.action_dim,
                self.rewards.len(),
                self.segment_ids.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub target_fps: usize,
    pub t_min: usize,
    pub t_clip: usize,
    pub min_clip: usize,
    pub stride: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { target_fps: 15, t_min: 51, t_clip: 30, min_clip: 15, stride: 30 }
    }
}

/// `floor(30 / f_target)`.
pub fn downsample_factor(target_fps: usize) -> Result<usize> {
    if target_fps == 0 || target_fps > SOURCE_FPS {
        return Err(Error::config("fps", format!("target frame rate must lie in [1, {SOURCE_FPS}]")));
    }
    Ok(SOURCE_FPS / target_fps)
}

/// Downsamples, splits by segment id, drops short segments and cuts the
/// rest into clips.
///
/// Each distinct segment id spans from its first to its last occurrence in
/// the downsampled stream; ids are visited in order of first appearance.
pub fn preprocess_session(session: &Session, cfg: &PreprocessConfig) -> Result<Vec<EpisodeRecord>> {
    session.validate()?;
    if cfg.t_clip == 0 || cfg.stride == 0 {
        return Err(Error::config("tclip", "clip length and stride must be positive"));
    }
    let df = downsample_factor(cfg.target_fps)?;
    let keep: Vec<usize> = (0..session.len()).step_by(df).collect();
    let seg: Vec<u32> = keep.iter().map(|&i| session.segment_ids[i]).collect();
    let mut order: Vec<u32> = Vec::new();
    for &s in &seg {
        if !order.contains(&s) {
            order.push(s);
        }
    }
    let mut out = Vec::new();
    for s in order {
        let start = seg.iter().position(|&x| x == s).expect("present");
        let end = seg.iter().rposition(|&x| x == s).expect("present") + 1;
        if end - start < cfg.t_min {
            continue;
        }
        let span = &keep[start..end];
        for w in (0..span.len()).step_by(cfg.stride) {
            let window = &span[w..(w + cfg.t_clip).min(span.len())];
            if window.len() < cfg.min_clip {
                continue;
            }
            let frames = window.iter().map(|&i| session.frames[i].clone()).collect();
            let ad = session.action_dim;
            let actions = window.iter().flat_map(|&i| session.actions[i * ad..(i + 1) * ad].iter().copied()).collect();
            let rewards = window.iter().map(|&i| session.rewards[i]).collect();
            let meta = EpisodeMeta { step_size: df, ..session.meta.clone() };
            out.push(EpisodeRecord::new(frames, actions, ad, rewards, None, meta)?);
        }
    }
    Ok(out)
}

/// Start index of a uniformly placed window of `len` frames spaced `step` apart.
pub fn sample_start<R: Rng>(t: usize, len: usize, step: usize, rng: &mut R) -> Result<usize> {
    if len == 0 || step == 0 {
        return Err(Error::invalid("segment length and step must be positive"));
    }
    let span = (len - 1) * step;
    if span >= t {
        return Err(Error::invalid(format!("record of {t} frames too short for {len} frames at step {step}")));
    }
    Ok(rng.random_range(0..=t - 1 - span))
}

/// Uniformly placed sub-episode of `len` frames taking every `step`-th frame.
pub fn sample_training_segment<R: Rng>(record: &EpisodeRecord, len: usize, step: usize, rng: &mut R) -> Result<EpisodeRecord> {
    let s = sample_start(record.len(), len, step, rng)?;
    let idx: Vec<usize> = (0..len).map(|k| s + k * step).collect();
    record.select(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(ids: &[u32]) -> Session {
        let n = ids.len();
        Session {
            frames: (0..n).map(|i| Frame::filled(1, 1, [(i % 256) as u8, 0, 0])).collect(),
            actions: (0..n).map(|i| i as f32).collect(),
            action_dim: 1,
            rewards: vec![0.0; n],
            segment_ids: ids.to_vec(),
            meta: EpisodeMeta { env: "test".into(), seed: 0, step_size: 1 },
        }
    }

    #[test]
    fn factor_examples() {
        assert_eq!(downsample_factor(15).unwrap(), 2);
        assert_eq!(downsample_factor(30).unwrap(), 1);
        assert_eq!(downsample_factor(7).unwrap(), 4);
        assert!(downsample_factor(0).is_err());
    }

    #[test]
    fn windowing_examples() {
        let cfg = PreprocessConfig { target_fps: 30, ..Default::default() };
        assert!(preprocess_session(&session(&[0; 45]), &cfg).unwrap().is_empty());
        let recs = preprocess_session(&session(&[3; 70]), &cfg).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].actions[0], 30.0);
        assert!(recs.iter().all(|r| r.len() == 30));
    }

    #[test]
    fn whole_episode_when_length_matches() {
        let rec = preprocess_session(&session(&[0; 60]), &PreprocessConfig { target_fps: 30, ..Default::default() }).unwrap().remove(0);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let seg = sample_training_segment(&rec, 30, 1, &mut rng).unwrap();
        assert_eq!(seg, rec);
        assert!(sample_training_segment(&rec, 31, 1, &mut rng).is_err());
    }
}

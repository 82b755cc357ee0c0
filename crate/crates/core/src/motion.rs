//! Motion prompts: point trajectories filtered to the dynamic ones and drawn
//! over the first observation, then placed ahead of the observed frames.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ScaleSchedule;
use crate::error::{Error, Result};
use crate::image::Frame;
use crate::layout::{build_layout, Block, BlockKind, Vocab};
use crate::tokenizer::MultiScaleTokenMap;
use crate::Role;

pub const DEFAULT_WINDOW: usize = 4;
pub const DEFAULT_RATIO: f64 = 0.02;

/// `n` point tracks over `t` frames in pixel coordinates of an `height x width` image.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySet {
    pub n: usize,
    pub t: usize,
    pub height: usize,
    pub width: usize,
    /// Grid size used to seed the queries (0 when not grid sampled).
    pub grid: usize,
    /// `n * t * 2` interleaved `(x, y)`.
    pub points: Vec<f32>,
    /// `n * t` values in `[0, 1]`.
    pub confidence: Vec<f32>,
}

impl TrajectorySet {
    pub fn new(t: usize, height: usize, width: usize, grid: usize, points: Vec<f32>, confidence: Vec<f32>) -> Result<Self> {
        if t == 0 || points.len() % (2 * t) != 0 {
            return Err(Error::invalid(format!("{} coordinates do not form tracks of length {t}", points.len())));
        }
        let n = points.len() / (2 * t);
        if confidence.len() != n * t {
            return Err(Error::invalid(format!("{} confidences for {n} tracks of length {t}", confidence.len())));
        }
        if confidence.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("confidence outside [0, 1]"));
        }
        Ok(Self { n, t, height, width, grid, points, confidence })
    }

    /// Tracks stretched in time with [`replicate_frames`] to at least `required` steps.
    pub fn replicated(&self, required: usize) -> Result<Self> {
        let steps = replicate_frames(&(0..self.t).collect::<Vec<_>>(), required)?;
        let mut points = Vec::with_capacity(self.n * steps.len() * 2);
        let mut confidence = Vec::with_capacity(self.n * steps.len());
        for i in 0..self.n {
            for &t in &steps {
                let k = i * self.t + t;
                points.extend_from_slice(&self.points[2 * k..2 * k + 2]);
                confidence.push(self.confidence[k]);
            }
        }
        Self::new(steps.len(), self.height, self.width, self.grid, points, confidence)
    }

    pub fn point(&self, i: usize, t: usize) -> (f64, f64) {
        let k = (i * self.t + t) * 2;
        (self.points[k] as f64, self.points[k + 1] as f64)
    }

    pub fn mean_confidence(&self, i: usize) -> f64 {
        self.confidence[i * self.t..(i + 1) * self.t].iter().map(|&c| c as f64).sum::<f64>() / self.t as f64
    }

    /// Largest displacement over any `window`-frame span of track `i`.
    pub fn max_displacement(&self, i: usize, window: usize) -> f64 {
        (0..self.t - window)
            .map(|t| {
                let (x0, y0) = self.point(i, t);
                let (x1, y1) = self.point(i, t + window);
                (x1 - x0).hypot(y1 - y0)
            })
            .fold(0.0, f64::max)
    }

    pub fn subset(&self, keep: &[usize]) -> Self {
        let mut points = Vec::with_capacity(keep.len() * self.t * 2);
        let mut confidence = Vec::with_capacity(keep.len() * self.t);
        for &i in keep {
            points.extend_from_slice(&self.points[i * self.t * 2..(i + 1) * self.t * 2]);
            confidence.extend_from_slice(&self.confidence[i * self.t..(i + 1) * self.t]);
        }
        Self { n: keep.len(), points, confidence, ..*self }
    }
}

/// Centres of a uniform `g x g` partition of the frame, row-major, as `(x, y)`.
pub fn sample_grid(height: usize, width: usize, g: usize) -> Result<Vec<(f64, f64)>> {
    if g == 0 || g > height.min(width) {
        return Err(Error::config("data.grid_size", format!("must lie in [1, {}] for a {height}x{width} frame", height.min(width))));
    }
    let mut out = Vec::with_capacity(g * g);
    for i in 0..g {
        for j in 0..g {
            out.push(((j as f64 + 0.5) * width as f64 / g as f64, (i as f64 + 0.5) * height as f64 / g as f64));
        }
    }
    Ok(out)
}

/// Keeps tracks with mean confidence at least `tau_c` whose displacement over
/// some `window`-frame span reaches `ratio` of the image diagonal.
pub fn filter_trajectories(trajs: &TrajectorySet, tau_c: f64, window: usize, ratio: f64) -> Result<TrajectorySet> {
    if window == 0 || trajs.t <= window {
        return Err(Error::invalid(format!("trajectories need at least {} frames for a window of {window}", window + 1)));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("displacement ratio must lie in (0, 1)"));
    }
    let threshold = ratio * (trajs.height as f64).hypot(trajs.width as f64);
    let keep: Vec<usize> = (0..trajs.n)
        .filter(|&i| trajs.mean_confidence(i) >= tau_c && trajs.max_displacement(i, window) >= threshold)
        .collect();
    Ok(trajs.subset(&keep))
}

fn track_color(t: usize, len: usize) -> [u8; 3] {
    let s = if len > 1 { t as f64 / (len - 1) as f64 } else { 0.0 };
    [(255.0 * s).round() as u8, 0, (255.0 * (1.0 - s)).round() as u8]
}

fn plot(frame: &mut Frame, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < frame.width && (y as usize) < frame.height {
        frame.set_pixel(y as usize, x as usize, c);
    }
}

/// Integer Bresenham line, both endpoints included.
fn draw_line(frame: &mut Frame, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        plot(frame, x0, y0, c);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Draws every track as a 1-pixel polyline over a copy of `first_frame`.
/// Segment `t -> t+1` takes the colour of step `t` on a blue-to-red ramp and
/// every vertex is then stamped with its own step colour, so a track starts
/// pure blue and ends pure red.
pub fn render_prompt(first_frame: &Frame, trajs: &TrajectorySet) -> Frame {
    let mut out = first_frame.clone();
    let px = |v: f64| v.floor() as i64;
    for i in 0..trajs.n {
        for t in 0..trajs.t.saturating_sub(1) {
            let (x0, y0) = trajs.point(i, t);
            let (x1, y1) = trajs.point(i, t + 1);
            draw_line(&mut out, (px(x0), px(y0)), (px(x1), px(y1)), track_color(t, trajs.t));
        }
        for t in 0..trajs.t {
            let (x, y) = trajs.point(i, t);
            plot(&mut out, px(x), px(y), track_color(t, trajs.t));
        }
    }
    out
}

/// Filters `trajs` and renders the surviving tracks over `first_frame`.
pub fn build_prompt(first_frame: &Frame, trajs: &TrajectorySet, tau_c: f64) -> Result<Frame> {
    let dynamic = if trajs.t <= DEFAULT_WINDOW {
        filter_trajectories(&trajs.replicated(DEFAULT_WINDOW + 1)?, tau_c, DEFAULT_WINDOW, DEFAULT_RATIO)?
    } else {
        filter_trajectories(trajs, tau_c, DEFAULT_WINDOW, DEFAULT_RATIO)?
    };
    Ok(render_prompt(first_frame, &dynamic))
}

/// Returns `false` (omit the prompt) with probability `p`.
pub fn prompt_dropout<R: Rng>(p: f64, rng: &mut R) -> Result<bool> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config("run.prompt_dropout", "must lie in [0, 1]"));
    }
    Ok(!rng.random_bool(p))
}

/// Repeats each frame `ceil(required / len)` times in order, truncated to
/// `required`; longer inputs are returned unchanged.
pub fn replicate_frames<T: Clone>(frames: &[T], required: usize) -> Result<Vec<T>> {
    if frames.is_empty() {
        return Err(Error::invalid("cannot replicate an empty frame list"));
    }
    if frames.len() >= required {
        return Ok(frames.to_vec());
    }
    let reps = required.div_ceil(frames.len());
    Ok(frames.iter().flat_map(|f| std::iter::repeat_n(f.clone(), reps)).take(required).collect())
}

/// Token prefix of the stream: optional prompt branch then the observed frames.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamPrefix {
    pub ids: Vec<usize>,
    pub blocks: Vec<Block>,
}

pub fn assemble_dual_branch(
    schedule: &ScaleSchedule,
    vocab: Vocab,
    prompt: Option<&MultiScaleTokenMap>,
    observed: &[MultiScaleTokenMap],
    use_prompt: bool,
) -> Result<StreamPrefix> {
    if observed.is_empty() {
        return Err(Error::invalid("no observed frames"));
    }
    let prompt = if use_prompt {
        let p = prompt.ok_or_else(|| Error::invalid("prompt requested but not provided"))?;
        if p.role != Role::Observed {
            return Err(Error::invalid("the motion prompt must be tokenized with the observed role"));
        }
        Some(p)
    } else {
        None
    };
    let layout = build_layout(schedule, observed.len() + 1, observed.len(), use_prompt)?;
    let blocks = layout.blocks[..layout.first_future_block()].to_vec();
    let mut ids = Vec::with_capacity(layout.total);
    for blk in &blocks {
        match blk.kind {
            BlockKind::Start => ids.push(vocab.start()),
            BlockKind::Sep => ids.push(vocab.sep()),
            BlockKind::Prompt(l) | BlockKind::Scale(l) => {
                let map = match blk.kind {
                    BlockKind::Prompt(_) => prompt.expect("prompt blocks only with a prompt"),
                    _ => &observed[blk.frame - 1],
                };
                if map.role != Role::Observed {
                    return Err(Error::invalid(format!("observed frame {} was tokenized with the future role", blk.frame)));
                }
                let g = map
                    .maps
                    .get(l)
                    .filter(|g| g.side == blk.side)
                    .ok_or_else(|| Error::invalid(format!("token map lacks scale {} of side {}", l + 1, blk.side)))?;
                ids.extend(g.indices.iter().map(|&i| vocab.code(Role::Observed, i)));
            }
            BlockKind::Raster(_) => unreachable!("scale-wise layout"),
        }
    }
    Ok(StreamPrefix { ids, blocks })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryManifest {
    n: usize,
    t: usize,
    h: usize,
    w: usize,
    g: usize,
}

pub(crate) fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub(crate) fn read_f32_file(path: &Path, expected: usize, stream: &str) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::format(path, format!("missing or unreadable stream `{stream}`: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(path, format!("stream `{stream}` holds {} bytes, expected {}", bytes.len(), expected * 4)));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Writes `manifest.json`, `points.bin` and `confidence.bin` into `dir`.
pub fn write_trajectories(trajs: &TrajectorySet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = TrajectoryManifest { n: trajs.n, t: trajs.t, h: trajs.height, w: trajs.width, g: trajs.grid };
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    write("manifest.json", serde_json::to_string_pretty(&m).expect("serializable").as_bytes())?;
    write("points.bin", &f32_bytes(&trajs.points))?;
    write("confidence.bin", &f32_bytes(&trajs.confidence))
}

pub fn read_trajectories(dir: &Path) -> Result<TrajectorySet> {
    let mp = dir.join("manifest.json");
    let text = fs::read_to_string(&mp).map_err(|e| Error::format(&mp, format!("missing trajectory manifest: {e}")))?;
    let m: TrajectoryManifest = serde_json::from_str(&text).map_err(|e| Error::format(&mp, e.to_string()))?;
    let points = read_f32_file(&dir.join("points.bin"), m.n * m.t * 2, "points")?;
    let confidence = read_f32_file(&dir.join("confidence.bin"), m.n * m.t, "confidence")?;
    TrajectorySet::new(m.t, m.h, m.w, m.g, points, confidence).map_err(|e| Error::format(dir, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts_and_centre() {
        assert_eq!(sample_grid(64, 64, 12).unwrap().len(), 144);
        assert_eq!(sample_grid(256, 256, 16).unwrap().len(), 256);
        assert_eq!(sample_grid(64, 48, 1).unwrap(), vec![(24.0, 32.0)]);
        assert!(sample_grid(8, 8, 9).is_err());
    }

    #[test]
    fn replication_examples() {
        assert_eq!(replicate_frames(&['f'], 4).unwrap(), vec!['f'; 4]);
        assert_eq!(replicate_frames(&['a', 'b'], 5).unwrap(), vec!['a', 'a', 'a', 'b', 'b']);
        assert_eq!(replicate_frames(&[1, 2, 3, 4, 5, 6], 4).unwrap(), vec![1, 2, 3, 4, 5, 6]);
        assert!(replicate_frames::<u8>(&[], 3).is_err());
    }

    #[test]
    fn line_endpoints_inclusive() {
        let mut f = Frame::filled(5, 5, [0, 0, 0]);
        draw_line(&mut f, (0, 0), (4, 2), [1, 1, 1]);
        assert_eq!(f.pixel(0, 0), [1, 1, 1]);
        assert_eq!(f.pixel(2, 4), [1, 1, 1]);
        assert_eq!(f.data.chunks(3).filter(|p| p[0] == 1).count(), 5);
    }
}

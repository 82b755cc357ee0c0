//! Token stream layout, block-causal masking and fixed positional embeddings.

use std::fmt::Write as _;

use crate::config::ScaleSchedule;
use crate::error::{Error, Result};
use crate::Role;

/// Unified vocabulary: observed codes, future codes, then two special tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub codebook_size: usize,
}

impl Vocab {
    pub fn new(codebook_size: usize) -> Self {
        Self { codebook_size }
    }

    pub fn size(&self) -> usize {
        2 * self.codebook_size + 2
    }

    pub fn start(&self) -> usize {
        2 * self.codebook_size
    }

    pub fn sep(&self) -> usize {
        2 * self.codebook_size + 1
    }

    /// Column window of the unified vocabulary legal for codes of `role`.
    pub fn range(&self, role: Role) -> std::ops::Range<usize> {
        let v = self.codebook_size;
        match role {
            Role::Observed => 0..v,
            Role::Future => v..2 * v,
        }
    }

    pub fn specials(&self) -> std::ops::Range<usize> {
        self.start()..self.size()
    }

    pub fn code(&self, role: Role, index: usize) -> usize {
        debug_assert!(index < self.codebook_size);
        self.range(role).start + index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayoutKind {
    ScaleWise,
    Raster,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Start,
    /// Scale `l` (0-based) of the motion-prompt branch.
    Prompt(usize),
    Sep,
    /// Scale `l` (0-based) of a frame.
    Scale(usize),
    /// Latent cell `c` of a raster-scan frame.
    Raster(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    /// 1-based frame index; the prompt branch and separator use frame 0.
    pub frame: usize,
    pub kind: BlockKind,
    pub offset: usize,
    pub len: usize,
    pub role: Role,
    /// Side of the token map for scale and prompt blocks, 1 otherwise.
    pub side: usize,
}

impl Block {
    pub fn end(&self) -> usize {
        self.offset + self.len
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.offset..self.end()
    }

    /// Whether this block carries codebook tokens (as opposed to specials).
    pub fn is_code(&self) -> bool {
        matches!(self.kind, BlockKind::Prompt(_) | BlockKind::Scale(_) | BlockKind::Raster(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenStreamLayout {
    pub kind: LayoutKind,
    pub blocks: Vec<Block>,
    pub total: usize,
    pub frames: usize,
    pub context: usize,
    pub with_prompt: bool,
    pub schedule: ScaleSchedule,
    block_of: Vec<usize>,
}

impl TokenStreamLayout {
    fn from_blocks(
        kind: LayoutKind,
        blocks: Vec<Block>,
        frames: usize,
        context: usize,
        with_prompt: bool,
        schedule: ScaleSchedule,
    ) -> Self {
        let total = blocks.last().map_or(0, Block::end);
        let mut block_of = Vec::with_capacity(total);
        for (b, blk) in blocks.iter().enumerate() {
            block_of.extend(std::iter::repeat(b).take(blk.len));
        }
        Self { kind, blocks, total, frames, context, with_prompt, schedule, block_of }
    }

    pub fn block_index(&self, pos: usize) -> usize {
        self.block_of[pos]
    }

    pub fn block_at(&self, pos: usize) -> &Block {
        &self.blocks[self.block_of[pos]]
    }

    /// Number of keys visible to each position under the block-causal mask.
    pub fn key_limits(&self) -> Vec<usize> {
        self.block_of.iter().map(|&b| self.blocks[b].end()).collect()
    }

    /// Indices of the blocks belonging to frame `t`.
    pub fn frame_blocks(&self, t: usize) -> std::ops::Range<usize> {
        let first = self.blocks.iter().position(|b| b.frame == t && b.kind == BlockKind::Start);
        match first {
            Some(s) => {
                let e = self.blocks[s + 1..].iter().position(|b| b.frame != t).map_or(self.blocks.len(), |i| s + 1 + i);
                s..e
            }
            None => 0..0,
        }
    }

    /// Position of the last token of frame `t` (the reward readout position).
    pub fn frame_last_position(&self, t: usize) -> usize {
        let r = self.frame_blocks(t);
        assert!(!r.is_empty(), "frame {t} not in layout");
        self.blocks[r.end - 1].end() - 1
    }

    /// Index of the first block of the first future frame.
    pub fn first_future_block(&self) -> usize {
        self.frame_blocks(self.context + 1).start
    }

    /// Sequential decoding passes needed per future frame: one per code
    /// block, since the START block rides along with the first of them.
    pub fn steps_per_future_frame(&self) -> usize {
        self.blocks[self.frame_blocks(self.context + 1)].iter().filter(|b| b.is_code()).count()
    }

    /// Scales of a code block.
    pub fn block_scales(&self, blk: &Block) -> &[usize] {
        match blk.kind {
            BlockKind::Prompt(_) => &self.schedule.obs_scales,
            _ => self.schedule.scales(blk.role),
        }
    }
}

/// Scale-wise layout: `[START PROMPT(1..K) SEP]? (START SCALE(1..K_t))_{t=1..T}`.
pub fn build_layout(schedule: &ScaleSchedule, frames: usize, context: usize, with_prompt: bool) -> Result<TokenStreamLayout> {
    schedule.validate()?;
    check_frames(frames, context)?;
    let mut blocks = Vec::new();
    let mut off = 0;
    let mut push = |frame, kind, len, role, side| {
        blocks.push(Block { frame, kind, offset: off, len, role, side });
        off += len;
    };
    if with_prompt {
        push(0, BlockKind::Start, 1, Role::Observed, 1);
        for (l, &s) in schedule.obs_scales.iter().enumerate() {
            push(0, BlockKind::Prompt(l), s * s, Role::Observed, s);
        }
        push(0, BlockKind::Sep, 1, Role::Observed, 1);
    }
    for t in 1..=frames {
        let role = Role::of_frame(t, context);
        push(t, BlockKind::Start, 1, role, 1);
        for (l, &s) in schedule.scales(role).iter().enumerate() {
            push(t, BlockKind::Scale(l), s * s, role, s);
        }
    }
    Ok(TokenStreamLayout::from_blocks(LayoutKind::ScaleWise, blocks, frames, context, with_prompt, schedule.clone()))
}

/// Raster-scan baseline: every frame is START followed by `latent_base^2`
/// single-token blocks in row-major order.
pub fn build_raster_layout(schedule: &ScaleSchedule, frames: usize, context: usize) -> Result<TokenStreamLayout> {
    schedule.validate()?;
    check_frames(frames, context)?;
    let cells = schedule.latent_base * schedule.latent_base;
    let mut blocks = Vec::with_capacity(frames * (cells + 1));
    let mut off = 0;
    for t in 1..=frames {
        let role = Role::of_frame(t, context);
        blocks.push(Block { frame: t, kind: BlockKind::Start, offset: off, len: 1, role, side: 1 });
        off += 1;
        for c in 0..cells {
            blocks.push(Block { frame: t, kind: BlockKind::Raster(c), offset: off, len: 1, role, side: 1 });
            off += 1;
        }
    }
    Ok(TokenStreamLayout::from_blocks(LayoutKind::Raster, blocks, frames, context, false, schedule.clone()))
}

fn check_frames(frames: usize, context: usize) -> Result<()> {
    if context == 0 {
        return Err(Error::config("run.context_frames", "must be at least 1"));
    }
    if frames <= context {
        return Err(Error::config("run.sequence_length", "must exceed context_frames"));
    }
    Ok(())
}

/// Dense boolean attention mask, row = query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub n: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.n + k]
    }

    /// Per-query count of visible keys, valid when each row is a prefix.
    pub fn prefix_limits(&self) -> Option<Vec<usize>> {
        (0..self.n)
            .map(|q| {
                let row = &self.allowed[q * self.n..(q + 1) * self.n];
                let lim = row.iter().take_while(|&&a| a).count();
                row[lim..].iter().all(|&a| !a).then_some(lim)
            })
            .collect()
    }
}

pub fn block_causal_mask(layout: &TokenStreamLayout) -> AttentionMask {
    let n = layout.total;
    let mut allowed = vec![false; n * n];
    for q in 0..n {
        let bq = layout.block_index(q);
        for k in 0..n {
            allowed[q * n + k] = layout.block_index(k) <= bq;
        }
    }
    AttentionMask { n, allowed }
}

/// Sinusoidal embedding: pair `j` is `(sin(t w_j), cos(t w_j))`, `w_j = 10000^(-2j/dim)`.
pub fn temporal_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    sincos(t as f64, dim)
}

fn sincos(pos: f64, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::config("model.width", format!("sinusoidal embedding needs an even dimension, got {dim}")));
    }
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim / 2 {
        let rate = 10000f64.powf(-2.0 * j as f64 / dim as f64);
        out.push((pos * rate).sin());
        out.push((pos * rate).cos());
    }
    Ok(out)
}

/// 2-D sinusoidal embedding of cell `(i, j)` of an `side x side` map.
///
/// Coordinates are cell centres in units of the finest latent grid, so the
/// same spatial location gets similar codes at every scale. The first half of
/// the vector encodes the row, the second half the column.
pub fn spatial_embedding(i: usize, j: usize, side: usize, latent_base: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 4 != 0 {
        return Err(Error::config("model.width", format!("2-D embedding needs a multiple of 4, got {dim}")));
    }
    let unit = latent_base as f64 / side as f64;
    let mut out = sincos((i as f64 + 0.5) * unit, dim / 2)?;
    out.extend(sincos((j as f64 + 0.5) * unit, dim / 2)?);
    Ok(out)
}

/// Human-readable block table.
pub fn dump_layout(layout: &TokenStreamLayout) -> String {
    let mut s = String::new();
    let kind = match layout.kind {
        LayoutKind::ScaleWise => "scalewise",
        LayoutKind::Raster => "raster",
    };
    let _ = writeln!(
        s,
        "# layout={kind} frames={} context={} prompt={} total={} steps_per_future_frame={}",
        layout.frames,
        layout.context,
        layout.with_prompt,
        layout.total,
        layout.steps_per_future_frame()
    );
    let _ = writeln!(s, "{:>6} {:>6} {:>12} {:>9} {:>8} {:>6}", "block", "frame", "kind", "role", "offset", "len");
    for (b, blk) in layout.blocks.iter().enumerate() {
        let kind = match blk.kind {
            BlockKind::Start => "START".to_string(),
            BlockKind::Sep => "SEP".to_string(),
            BlockKind::Prompt(l) => format!("PROMPT({})", l + 1),
            BlockKind::Scale(l) => format!("SCALE({})", l + 1),
            BlockKind::Raster(c) => format!("CELL({c})"),
        };
        let _ = writeln!(s, "{b:>6} {:>6} {kind:>12} {:>9} {:>8} {:>6}", blk.frame, blk.role.name(), blk.offset, blk.len);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(obs: &[usize], fut: &[usize], base: usize) -> ScaleSchedule {
        ScaleSchedule::new(obs.to_vec(), fut.to_vec(), base).unwrap()
    }

    #[test]
    fn small_layout_arithmetic() {
        let l = build_layout(&sched(&[1, 2], &[1], 2), 2, 1, false).unwrap();
        assert_eq!(l.total, 8);
        let m = block_causal_mask(&l);
        // frame-1 SCALE(1) is position 1
        assert_eq!((0..8).filter(|&k| m.get(1, k)).count(), 2);
        assert!((0..8).all(|k| m.get(7, k)));
        assert_eq!(l.frame_last_position(1), 5);
        assert_eq!(l.frame_last_position(2), 7);
    }

    #[test]
    fn future_frame_size() {
        let s = sched(&[1, 2, 3, 4, 5, 6, 8], &[1, 2, 3, 4, 5, 6], 8);
        let l = build_layout(&s, 3, 1, false).unwrap();
        let r = l.frame_blocks(2);
        let n: usize = l.blocks[r.clone()].iter().map(|b| b.len).sum();
        assert_eq!(n, 92);
        assert_eq!(l.steps_per_future_frame(), 6);
    }

    #[test]
    fn prompt_prefix() {
        let s = sched(&[1, 2], &[1], 2);
        let plain = build_layout(&s, 2, 1, false).unwrap();
        let with = build_layout(&s, 2, 1, true).unwrap();
        assert_eq!(with.total - plain.total, 1 + 5 + 1);
        assert_eq!(with.blocks[with.blocks.len() - 1].kind, BlockKind::Scale(0));
    }

    #[test]
    fn first_frame_two_token_mask() {
        let l = build_layout(&sched(&[1, 2], &[1], 2), 2, 1, false).unwrap();
        let m = block_causal_mask(&l);
        assert_eq!([m.get(0, 0), m.get(0, 1), m.get(1, 0), m.get(1, 1)], [true, false, true, true]);
        assert_eq!(m.prefix_limits().unwrap(), l.key_limits());
    }

    #[test]
    fn raster_is_strictly_causal() {
        let s = sched(&[1, 2, 4], &[1, 2], 4);
        let l = build_raster_layout(&s, 2, 1).unwrap();
        assert_eq!(l.steps_per_future_frame(), 16);
        let m = block_causal_mask(&l);
        for q in 0..l.total {
            for k in 0..l.total {
                assert_eq!(m.get(q, k), k <= q);
            }
        }
    }

    #[test]
    fn temporal_examples() {
        assert_eq!(temporal_embedding(0, 4).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
        let e = temporal_embedding(1, 4).unwrap();
        let want = [0.84147, 0.54030, 0.01000, 0.99995];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(temporal_embedding(1, 5).is_err());
        for t in 0..50 {
            let e = temporal_embedding(t, 16).unwrap();
            assert!((e.iter().map(|v| v * v).sum::<f64>() - 8.0).abs() < 1e-12);
        }
    }
}

//! Transformer inputs for a token stream.
//!
//! [`StreamState`] holds the tokens committed so far and everything derived
//! from them on the host (accumulated quantized latents per frame and the
//! resized latents that seed each scale). [`embed_blocks`] turns a run of
//! blocks into input rows on a tape. Every row depends only on strictly
//! earlier blocks and on per-row arithmetic, so embedding a single block
//! reproduces the corresponding rows of a full-sequence embedding.

use swm_autograd::{Bound, Float, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::layout::{spatial_embedding, temporal_embedding, BlockKind, TokenStreamLayout, Vocab};
use crate::tokenizer::resample::resize_planes;
use crate::tokenizer::{planes_to_cells, MultiScaleTokenMap, TokenGrid, Tokenizer};
use crate::Role;

const UNSET: usize = usize::MAX;

#[derive(Clone, Debug)]
pub struct StreamState<F: Float> {
    pub layout: TokenStreamLayout,
    pub vocab: Vocab,
    /// Unified-vocabulary id per committed position.
    pub ids: Vec<usize>,
    pub committed: usize,
    /// Action fed to the START token of frame `t` (index 0 is the prompt branch).
    pub frame_actions: Vec<Vec<f64>>,
    latents: Vec<Option<Tensor<F>>>,
    acc: Vec<Vec<F>>,
    const_rows: Vec<F>,
    width: usize,
}

impl<F: Float> StreamState<F> {
    /// `frame_actions[t - 1]` is the action conditioning frame `t`.
    pub fn new(layout: TokenStreamLayout, vocab: Vocab, width: usize, embed_dim: usize, frame_actions: &[Vec<f64>]) -> Result<Self> {
        if frame_actions.len() != layout.frames {
            return Err(Error::invalid(format!("{} frame actions for a {}-frame layout", frame_actions.len(), layout.frames)));
        }
        let dim = frame_actions.first().map_or(0, Vec::len);
        if frame_actions.iter().any(|a| a.len() != dim) {
            return Err(Error::invalid("actions must share one dimension"));
        }
        let mut acts = vec![vec![0.0; dim]];
        acts.extend(frame_actions.iter().cloned());
        let base = layout.schedule.latent_base;
        let const_rows = constant_rows(&layout, width)?;
        let nb = layout.blocks.len();
        Ok(Self {
            ids: vec![UNSET; layout.total],
            committed: 0,
            frame_actions: acts,
            latents: vec![None; nb],
            acc: vec![vec![F::zero(); embed_dim * base * base]; layout.frames + 1],
            const_rows,
            width,
            vocab,
            layout,
        })
    }

    /// Builds a fully committed stream from ground-truth token maps.
    pub fn teacher_forced(
        layout: TokenStreamLayout,
        vocab: Vocab,
        width: usize,
        tok: &Tokenizer<F>,
        prompt: Option<&MultiScaleTokenMap>,
        frames: &[MultiScaleTokenMap],
        frame_actions: &[Vec<f64>],
    ) -> Result<Self> {
        let mut s = Self::new(layout, vocab, width, tok.spec.embed_dim, frame_actions)?;
        if frames.len() != s.layout.frames {
            return Err(Error::invalid(format!("{} token maps for a {}-frame layout", frames.len(), s.layout.frames)));
        }
        let n = s.layout.blocks.len();
        s.commit_known(tok, prompt, frames, n)?;
        Ok(s)
    }

    /// Commits blocks up to (excluding) `upto` from known token maps.
    /// `frames[t - 1]` holds the tokens of frame `t`; only frames touched by
    /// those blocks need to be present.
    pub fn commit_known(&mut self, tok: &Tokenizer<F>, prompt: Option<&MultiScaleTokenMap>, frames: &[MultiScaleTokenMap], upto: usize) -> Result<()> {
        if self.layout.with_prompt != prompt.is_some() {
            return Err(Error::invalid("prompt presence does not match the layout"));
        }
        if upto > self.layout.blocks.len() {
            return Err(Error::invalid(format!("block {upto} outside the layout")));
        }
        for b in self.committed..upto {
            let blk = self.layout.blocks[b];
            let frame_map = |t: usize| frames.get(t - 1).ok_or_else(|| Error::invalid(format!("token map of frame {t} missing")));
            let codes: Vec<usize> = match blk.kind {
                BlockKind::Start | BlockKind::Sep => Vec::new(),
                BlockKind::Prompt(l) => {
                    let p = prompt.expect("checked above");
                    if p.role != Role::Observed {
                        return Err(Error::invalid("the motion prompt must be tokenized with the observed role"));
                    }
                    grid_at(p, l, blk.side)?.indices.clone()
                }
                BlockKind::Scale(l) => {
                    let m = frame_map(blk.frame)?;
                    if m.role != blk.role {
                        return Err(Error::invalid(format!("frame {} has role {:?}, layout expects {:?}", blk.frame, m.role, blk.role)));
                    }
                    grid_at(m, l, blk.side)?.indices.clone()
                }
                BlockKind::Raster(c) => {
                    let m = frame_map(blk.frame)?;
                    let base = self.layout.schedule.latent_base;
                    let g = m.maps.iter().find(|g| g.side == base).ok_or_else(|| Error::invalid("raster stream needs finest-scale tokens"))?;
                    vec![g.indices[c]]
                }
            };
            self.commit_block(tok, b, &codes)?;
        }
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.committed == self.layout.blocks.len()
    }

    /// Commits the codebook indices of block `b` (empty for special blocks).
    pub fn commit_block(&mut self, tok: &Tokenizer<F>, b: usize, codes: &[usize]) -> Result<()> {
        if b != self.committed {
            return Err(Error::invalid(format!("block {b} committed out of order (next is {})", self.committed)));
        }
        let blk = self.layout.blocks[b];
        match blk.kind {
            BlockKind::Start | BlockKind::Sep => {
                if !codes.is_empty() {
                    return Err(Error::invalid("special blocks carry no codes"));
                }
                self.ids[blk.offset] = if blk.kind == BlockKind::Start { self.vocab.start() } else { self.vocab.sep() };
            }
            BlockKind::Prompt(_) | BlockKind::Scale(_) | BlockKind::Raster(_) => {
                if codes.len() != blk.len {
                    return Err(Error::invalid(format!("block {b} needs {} codes, got {}", blk.len, codes.len())));
                }
                if let Some(&bad) = codes.iter().find(|&&c| c >= self.vocab.codebook_size) {
                    return Err(Error::invalid(format!("code {bad} outside codebook of size {}", self.vocab.codebook_size)));
                }
                for (i, &c) in codes.iter().enumerate() {
                    self.ids[blk.offset + i] = self.vocab.code(blk.role, c);
                }
                if !matches!(blk.kind, BlockKind::Raster(_)) {
                    let grid = TokenGrid { side: blk.side, indices: codes.to_vec() };
                    tok.accumulate_grid(blk.role, &mut self.acc[blk.frame], &grid)?;
                    if let Some(next) = self.layout.blocks.get(b + 1) {
                        if next.frame == blk.frame && matches!(next.kind, BlockKind::Scale(_) | BlockKind::Prompt(_)) {
                            let base = self.layout.schedule.latent_base;
                            let e = tok.spec.embed_dim;
                            let small = resize_planes(&self.acc[blk.frame], e, &tok.resampler(base, next.side));
                            let cells = planes_to_cells(&small, e, next.side * next.side);
                            self.latents[b + 1] = Some(Tensor::new(&[next.len, e], cells));
                        }
                    }
                }
            }
        }
        self.committed += 1;
        Ok(())
    }

    /// Accumulated quantized latent `(E, B, B)` of frame `t` so far.
    pub fn frame_latent(&self, t: usize) -> &[F] {
        &self.acc[t]
    }

    /// Codebook indices committed for frame `t`, grouped by block.
    pub fn frame_tokens(&self, t: usize) -> MultiScaleTokenMap {
        let range = self.layout.frame_blocks(t);
        let mut maps = Vec::new();
        let mut role = Role::Observed;
        for blk in &self.layout.blocks[range] {
            if blk.is_code() && self.ids[blk.offset] != UNSET {
                role = blk.role;
                let off = self.vocab.range(blk.role).start;
                let indices = self.ids[blk.positions()].iter().map(|&i| i - off).collect();
                maps.push(TokenGrid { side: blk.side, indices });
            }
        }
        MultiScaleTokenMap { frame: t, role, maps }
    }
}

fn grid_at(m: &MultiScaleTokenMap, l: usize, side: usize) -> Result<&TokenGrid> {
    let g = m.maps.get(l).ok_or_else(|| Error::invalid(format!("token map of frame {} lacks scale {}", m.frame, l + 1)))?;
    if g.side != side || g.indices.len() != side * side {
        return Err(Error::invalid(format!("scale {} of frame {} has side {}, layout expects {side}", l + 1, m.frame, g.side)));
    }
    Ok(g)
}

/// Fixed temporal plus 2-D spatial sinusoidal terms for every position.
fn constant_rows<F: Float>(layout: &TokenStreamLayout, width: usize) -> Result<Vec<F>> {
    let base = layout.schedule.latent_base;
    let mut out = Vec::with_capacity(layout.total * width);
    for blk in &layout.blocks {
        let temporal = temporal_embedding(blk.frame, width)?;
        for p in 0..blk.len {
            let spatial = match blk.kind {
                BlockKind::Scale(_) | BlockKind::Prompt(_) => Some(spatial_embedding(p / blk.side, p % blk.side, blk.side, base, width)?),
                BlockKind::Raster(c) => Some(spatial_embedding(c / base, c % base, base, base, width)?),
                BlockKind::Start | BlockKind::Sep => None,
            };
            for d in 0..width {
                let v = temporal[d] + spatial.as_ref().map_or(0.0, |s| s[d]);
                out.push(F::lit(v));
            }
        }
    }
    Ok(out)
}

/// Input rows for blocks `blocks` (a contiguous range). Every block before
/// the last in the range must already be committed.
pub fn embed_blocks<F: Float>(tape: &mut Tape<F>, b: &Bound, state: &StreamState<F>, blocks: std::ops::Range<usize>) -> Result<Var> {
    let layout = &state.layout;
    if blocks.is_empty() || blocks.end > layout.blocks.len() {
        return Err(Error::invalid(format!("block range {blocks:?} outside layout")));
    }
    if blocks.end - 1 > state.committed {
        return Err(Error::invalid(format!("blocks up to {} needed but only {} committed", blocks.end - 1, state.committed)));
    }
    let w = state.width;
    let pos0 = layout.blocks[blocks.start].offset;
    let pos1 = layout.blocks[blocks.end - 1].end();
    let m = pos1 - pos0;
    let mut x = tape.constant(Tensor::new(&[m, w], state.const_rows[pos0 * w..pos1 * w].to_vec()));

    let mut tok_rows = Vec::new();
    let mut tok_ids = Vec::new();
    let mut start_rows = Vec::new();
    let mut start_frames = Vec::new();
    let mut seed_rows = Vec::new();
    let mut seed_frames = Vec::new();
    let mut lat: [(Vec<usize>, Vec<F>); 2] = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
    let mut scale: [(Vec<usize>, Vec<usize>); 3] = Default::default();
    for bi in blocks.clone() {
        let blk = layout.blocks[bi];
        let r0 = blk.offset - pos0;
        match blk.kind {
            BlockKind::Start => {
                start_rows.push(r0);
                start_frames.push(blk.frame);
            }
            BlockKind::Sep => {
                tok_rows.push(r0);
                tok_ids.push(state.vocab.sep());
            }
            BlockKind::Raster(0) => {
                seed_rows.push(r0);
                seed_frames.push(blk.frame);
            }
            BlockKind::Raster(_) => {
                tok_rows.push(r0);
                tok_ids.push(state.ids[blk.offset - 1]);
            }
            BlockKind::Scale(l) | BlockKind::Prompt(l) => {
                if l == 0 {
                    seed_rows.push(r0);
                    seed_frames.push(blk.frame);
                } else {
                    let rows = state.latents[bi]
                        .as_ref()
                        .ok_or_else(|| Error::invalid(format!("latent input of block {bi} is not available")))?;
                    let slot = usize::from(blk.role == Role::Future);
                    lat[slot].0.extend(r0..r0 + blk.len);
                    lat[slot].1.extend_from_slice(rows.data());
                }
                let table = match (blk.kind, blk.role) {
                    (BlockKind::Prompt(_), _) => 0,
                    (_, Role::Observed) => 1,
                    _ => 2,
                };
                scale[table].0.extend(r0..r0 + blk.len);
                scale[table].1.extend(std::iter::repeat(l).take(blk.len));
            }
        }
    }

    let emb = b.get("tok_emb");
    if !tok_rows.is_empty() {
        let g = tape.gather_rows(emb, &tok_ids);
        let s = tape.scatter_rows(g, &tok_rows, m);
        x = tape.add(x, s);
    }
    if !start_rows.is_empty() {
        let sv = start_vectors(tape, b, state, &start_frames)?;
        let s = tape.scatter_rows(sv, &start_rows, m);
        x = tape.add(x, s);
    }
    if !seed_rows.is_empty() {
        let sv = start_vectors(tape, b, state, &seed_frames)?;
        let seeded = tape.linear(sv, b.get("seed_proj"), None);
        let s = tape.scatter_rows(seeded, &seed_rows, m);
        x = tape.add(x, s);
    }
    let e = state.acc[0].len() / (layout.schedule.latent_base * layout.schedule.latent_base);
    for (slot, name) in [(0, "obs"), (1, "fut")] {
        let (rows, data) = std::mem::take(&mut lat[slot]);
        if rows.is_empty() {
            continue;
        }
        let c = tape.constant(Tensor::new(&[rows.len(), e], data));
        let p = tape.linear(c, b.get(&format!("lat_proj.{name}.w")), Some(b.get(&format!("lat_proj.{name}.b"))));
        let s = tape.scatter_rows(p, &rows, m);
        x = tape.add(x, s);
    }
    for (table, name) in [(0, "prompt"), (1, "obs"), (2, "fut")] {
        let (rows, idx) = &scale[table];
        if rows.is_empty() {
            continue;
        }
        let g = tape.gather_rows(b.get(&format!("scale_emb.{name}")), idx);
        let s = tape.scatter_rows(g, rows, m);
        x = tape.add(x, s);
    }
    Ok(x)
}

/// `tok_emb[START] + a_t W_a` for each listed frame.
fn start_vectors<F: Float>(tape: &mut Tape<F>, b: &Bound, state: &StreamState<F>, frames: &[usize]) -> Result<Var> {
    let start = vec![state.vocab.start(); frames.len()];
    let base = tape.gather_rows(b.get("tok_emb"), &start);
    let proj = b.get("act_proj");
    let adim = tape.value(proj).dims2().0;
    let mut a = Vec::with_capacity(frames.len() * adim);
    for &t in frames {
        let act = &state.frame_actions[t];
        if act.len() != adim {
            return Err(Error::invalid(format!("action of frame {t} has {} entries, model expects {adim}", act.len())));
        }
        a.extend(act.iter().map(|&v| F::lit(v)));
    }
    let av = tape.constant(Tensor::new(&[frames.len(), adim], a));
    let injected = tape.linear(av, proj, None);
    Ok(tape.add(base, injected))
}

/// `start_embedding + W^T action`, the action injection on its own.
pub fn inject_action<F: Float>(start_embedding: &[F], action: &[F], proj: &Tensor<F>) -> Result<Vec<F>> {
    let (adim, w) = proj.dims2();
    if action.len() != adim || start_embedding.len() != w {
        return Err(Error::invalid(format!(
            "action of {} entries and embedding of {} for a {adim}x{w} projection",
            action.len(),
            start_embedding.len()
        )));
    }
    let mut out = start_embedding.to_vec();
    for (i, &a) in action.iter().enumerate() {
        for (o, &p) in out.iter_mut().zip(proj.row(i)) {
            *o += a * p;
        }
    }
    Ok(out)
}

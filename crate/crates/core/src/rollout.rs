//! Action-conditioned generation of future frames.
//!
//! A [`DecodeState`] walks the token stream block by block. Every block runs
//! one forward pass over its own positions only, attending to the key/value
//! cache of everything committed before it plus the block itself, and then
//! samples all of its tokens at once. With the cache disabled the whole
//! prefix is recomputed for each block instead; both paths produce the same
//! hidden states bit for bit.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swm_autograd::{Float, Tape};

use crate::config::RunConfig;
use crate::embed::{embed_blocks, StreamState};
use crate::error::{Error, Result};
use crate::image::{frames_to_tensor, tensor_to_frames, write_png, Frame};
use crate::layout::build_layout;
use crate::metrics::Metric;
use crate::model::{legal_range, KvCache, WorldModel};
use crate::tokenizer::{MultiScaleTokenMap, Tokenizer};
use crate::Role;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingConfig {
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub greedy: bool,
}

impl SamplingConfig {
    pub fn from_run(run: &RunConfig) -> Self {
        Self { top_k: run.top_k, top_p: run.top_p, temperature: run.temperature, greedy: false }
    }

    pub fn greedy() -> Self {
        Self { top_k: 1, top_p: 1.0, temperature: 1.0, greedy: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k < 1 {
            return Err(Error::config("run.top_k", "must be at least 1"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config("run.top_p", "must lie in (0, 1]"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config("run.temperature", "must be positive and finite"));
        }
        Ok(())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<F: Float>(row: &[F]) -> Result<usize> {
    let mut best: Option<(usize, F)> = None;
    for (i, &v) in row.iter().enumerate() {
        if v.is_nan() {
            return Err(Error::Numeric(format!("NaN logit at column {i}")));
        }
        if v == F::neg_infinity() {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i).ok_or_else(|| Error::invalid("every logit is -inf: empty legal vocabulary"))
}

/// Top-k, then nucleus (top-p) sampling at the given temperature.
///
/// Candidates are ordered by logit with ties broken toward the lower index.
/// Exactly one uniform draw is taken from `rng`.
pub fn sample_topk_topp<F: Float, R: Rng>(row: &[F], k: usize, p: f64, temperature: f64, rng: &mut R) -> Result<usize> {
    SamplingConfig { top_k: k, top_p: p, temperature, greedy: false }.validate()?;
    let mut cand: Vec<(usize, f64)> = Vec::with_capacity(row.len());
    for (i, &v) in row.iter().enumerate() {
        let v = v.as_f64();
        if v.is_nan() {
            return Err(Error::Numeric(format!("NaN logit at column {i}")));
        }
        if v > f64::NEG_INFINITY {
            cand.push((i, v));
        }
    }
    if cand.is_empty() {
        return Err(Error::invalid("every logit is -inf: empty legal vocabulary"));
    }
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cand.truncate(k);
    let top = cand[0].1;
    let mut probs: Vec<f64> = cand.iter().map(|&(_, v)| ((v - top) / temperature).exp()).collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|q| *q /= z);
    let mut keep = probs.len();
    let mut cum = 0.0;
    for (i, q) in probs.iter().enumerate() {
        cum += q;
        if cum >= p {
            keep = i + 1;
            break;
        }
    }
    let mass: f64 = probs[..keep].iter().sum();
    let u = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    for i in 0..keep {
        acc += probs[i];
        if u < acc {
            return Ok(cand[i].0);
        }
    }
    Ok(cand[keep - 1].0)
}

/// Incremental decoding state of one rollout.
#[derive(Clone, Debug)]
pub struct DecodeState<F: Float> {
    pub stream: StreamState<F>,
    cache: Option<KvCache<F>>,
    limits: Vec<usize>,
    /// Number of blocks whose positions have been run through the model.
    cursor: usize,
    rng: ChaCha8Rng,
    pub sampling: SamplingConfig,
    /// Reward prediction of frame `t` at index `t - 1`, once its last block ran.
    pub rewards: Vec<Option<f64>>,
    /// Sequential forward passes performed so far.
    pub forward_passes: usize,
}

impl<F: Float> DecodeState<F> {
    pub fn new(model: &WorldModel<F>, stream: StreamState<F>, use_cache: bool, sampling: SamplingConfig, seed: u64) -> Result<Self> {
        sampling.validate()?;
        if stream.layout.schedule != model.schedule {
            return Err(Error::invalid("stream schedule differs from the model's schedule"));
        }
        if stream.committed != 0 {
            return Err(Error::invalid("decoding must start from an empty stream"));
        }
        let limits = stream.layout.key_limits();
        let cache = use_cache.then(|| model.new_cache(stream.layout.total));
        let frames = stream.layout.frames;
        Ok(Self { stream, cache, limits, cursor: 0, rng: ChaCha8Rng::seed_from_u64(seed), sampling, rewards: vec![None; frames], forward_passes: 0 })
    }

    /// Selects an independent random stream (used for nested best-of-N seeds).
    pub fn set_stream(&mut self, seed: u64, stream: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.rng.set_stream(stream);
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn uses_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn is_done(&self) -> bool {
        self.cursor == self.stream.layout.blocks.len()
    }

    /// Commits the known prefix (prompt and context frames) and runs it
    /// through the model in a single pass.
    pub fn prefill(&mut self, model: &WorldModel<F>, tok: &Tokenizer<F>, prompt: Option<&MultiScaleTokenMap>, context: &[MultiScaleTokenMap]) -> Result<()> {
        if self.cursor != 0 {
            return Err(Error::invalid("prefill must run first"));
        }
        let upto = self.stream.layout.first_future_block();
        self.stream.commit_known(tok, prompt, context, upto)?;
        if upto == 0 {
            return Ok(());
        }
        let hidden = self.run_blocks(model, 0..upto)?;
        self.record_rewards(model, 0..upto, &hidden);
        self.cursor = upto;
        Ok(())
    }

    fn run_blocks(&mut self, model: &WorldModel<F>, blocks: std::ops::Range<usize>) -> Result<Vec<F>> {
        let layout = &self.stream.layout;
        let p0 = layout.blocks[blocks.start].offset;
        let p1 = layout.blocks[blocks.end - 1].end();
        self.forward_passes += 1;
        match self.cache.as_mut() {
            Some(cache) => {
                if cache.len != p0 {
                    return Err(Error::invalid(format!("cache holds {} positions, block starts at {p0}", cache.len)));
                }
                let x = model.embed_rows(&self.stream, blocks)?;
                model.infer_rows(&mut [cache], &[p1 - p0], &[&self.limits[p0..p1]], x.data())
            }
            None => {
                let mut tape = Tape::inference();
                let b = model.params.bind(&mut tape);
                let end_block = blocks.end;
                let x = embed_blocks(&mut tape, &b, &self.stream, 0..end_block)?;
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let h = model.transformer(&mut tape, &b, x, &self.limits[..p1], &mut rng);
                let w = model.cfg.width;
                Ok(tape.value(h).data()[p0 * w..p1 * w].to_vec())
            }
        }
    }

    fn record_rewards(&mut self, model: &WorldModel<F>, blocks: std::ops::Range<usize>, hidden: &[F]) {
        let layout = &self.stream.layout;
        let w = model.cfg.width;
        let p0 = layout.blocks[blocks.start].offset;
        for t in 1..=layout.frames {
            let last = layout.frame_last_position(t);
            if last >= p0 && last < layout.blocks[blocks.end - 1].end() {
                let r = last - p0;
                self.rewards[t - 1] = Some(model.reward_of(&hidden[r * w..(r + 1) * w]).as_f64());
            }
        }
    }

    fn pick_tokens(&mut self, model: &WorldModel<F>, b: usize, hidden: &[F]) -> Result<Vec<usize>> {
        let blk = self.stream.layout.blocks[b];
        if !blk.is_code() {
            return Ok(Vec::new());
        }
        let cols = legal_range(&model.vocab, &blk);
        let logits = model.logits_window(hidden, cols.clone());
        let width = cols.len();
        let code0 = model.vocab.range(blk.role).start;
        let mut out = Vec::with_capacity(blk.len);
        for row in logits.chunks(width) {
            let j = if self.sampling.greedy {
                argmax(row)?
            } else {
                sample_topk_topp(row, self.sampling.top_k, self.sampling.top_p, self.sampling.temperature, &mut self.rng)?
            };
            out.push(cols.start + j - code0);
        }
        Ok(out)
    }

    /// Blocks decoded together from block `b`: a START block is known in
    /// advance and shares its pass with the first scale block after it.
    fn pass_blocks(&self, b: usize) -> std::ops::Range<usize> {
        let blocks = &self.stream.layout.blocks;
        let fused = !blocks[b].is_code() && blocks.get(b + 1).is_some_and(|n| n.is_code() && n.frame == blocks[b].frame);
        b..b + 1 + fused as usize
    }

    /// Decodes block `b` in one forward pass over its positions (together with
    /// the following scale block when `b` is a START), then samples and
    /// commits every token. Returns the codebook indices of the code block.
    pub fn decode_block(&mut self, model: &WorldModel<F>, tok: &Tokenizer<F>, b: usize) -> Result<Vec<usize>> {
        if b != self.cursor || b != self.stream.committed {
            return Err(Error::invalid(format!("decode cursor is at block {}, not {b}", self.cursor)));
        }
        if b >= self.stream.layout.blocks.len() {
            return Err(Error::invalid("stream already complete"));
        }
        let range = self.pass_blocks(b);
        let last = range.end - 1;
        if last > b {
            self.stream.commit_block(tok, b, &[])?;
        }
        let hidden = self.run_blocks(model, range.clone())?;
        self.record_rewards(model, range.clone(), &hidden);
        let skip = (self.stream.layout.blocks[last].offset - self.stream.layout.blocks[b].offset) * model.cfg.width;
        let codes = self.pick_tokens(model, last, &hidden[skip..])?;
        self.stream.commit_block(tok, last, &codes)?;
        self.cursor = range.end;
        Ok(codes)
    }

    /// Decodes every remaining block.
    pub fn run_to_end(&mut self, model: &WorldModel<F>, tok: &Tokenizer<F>) -> Result<()> {
        while !self.is_done() {
            self.decode_block(model, tok, self.cursor)?;
        }
        Ok(())
    }
}

/// Decodes the next block of several rollouts that share one layout, with a
/// single stacked forward pass. Every state must use a cache and sit at the
/// same block.
pub fn decode_block_batched<F: Float>(model: &WorldModel<F>, tok: &Tokenizer<F>, states: &mut [DecodeState<F>]) -> Result<()> {
    let Some(first) = states.first() else { return Ok(()) };
    let b = first.cursor;
    let layout = first.stream.layout.clone();
    if b >= layout.blocks.len() {
        return Err(Error::invalid("stream already complete"));
    }
    let range = first.pass_blocks(b);
    let last = range.end - 1;
    let (p0, p1) = (layout.blocks[b].offset, layout.blocks[last].end());
    let mut x = Vec::new();
    for s in states.iter_mut() {
        if s.cursor != b || s.stream.committed != b || s.stream.layout != layout || s.cache.is_none() {
            return Err(Error::invalid("batched decoding needs cached states at the same block of one layout"));
        }
        if last > b {
            s.stream.commit_block(tok, b, &[])?;
        }
        x.extend_from_slice(model.embed_rows(&s.stream, range.clone())?.data());
    }
    let limits = layout.key_limits();
    let n = states.len();
    let hidden = {
        let mut caches: Vec<&mut KvCache<F>> = states.iter_mut().map(|s| s.cache.as_mut().expect("checked")).collect();
        let lim: Vec<&[usize]> = vec![&limits[p0..p1]; n];
        model.infer_rows(&mut caches, &vec![p1 - p0; n], &lim, &x)?
    };
    let w = model.cfg.width;
    let rows = (p1 - p0) * w;
    let skip = (layout.blocks[last].offset - p0) * w;
    for (i, s) in states.iter_mut().enumerate() {
        let h = &hidden[i * rows..(i + 1) * rows];
        s.forward_passes += 1;
        s.record_rewards(model, range.clone(), h);
        let codes = s.pick_tokens(model, last, &h[skip..])?;
        s.stream.commit_block(tok, last, &codes)?;
        s.cursor = range.end;
    }
    Ok(())
}

/// Inputs of one rollout.
#[derive(Clone, Copy, Debug)]
pub struct RolloutInput<'a> {
    /// Observed context frames (`T0` of them).
    pub context: &'a [Frame],
    /// `actions[i]` is the action taken after frame `i + 1`; at least `horizon - 1` entries.
    pub actions: &'a [Vec<f64>],
    /// Total number of frames `T`, context included.
    pub horizon: usize,
    /// Motion-prompt image, when the prompt branch is enabled.
    pub prompt: Option<&'a Frame>,
}

#[derive(Clone, Copy, Debug)]
pub struct RolloutOptions {
    pub sampling: SamplingConfig,
    pub use_cache: bool,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct RolloutOutput {
    /// The `T - T0` predicted frames.
    pub frames: Vec<Frame>,
    /// Predicted rewards of the predicted frames.
    pub rewards: Vec<f64>,
    pub tokens: Vec<MultiScaleTokenMap>,
    pub forward_passes: usize,
}

/// Builds a decode state for `input` and prefills its known prefix.
pub fn prepare_rollout<F: Float>(
    model: &WorldModel<F>,
    tok: &Tokenizer<F>,
    input: &RolloutInput<'_>,
    opts: &RolloutOptions,
) -> Result<DecodeState<F>> {
    if tok.spec.schedule != model.schedule {
        return Err(Error::invalid("schedule mismatch between tokenizer and world model"));
    }
    if tok.spec.codebook_size != model.cfg.codebook_size {
        return Err(Error::invalid("codebook size mismatch between tokenizer and world model"));
    }
    let t0 = input.context.len();
    if t0 == 0 {
        return Err(Error::invalid("rollout needs at least one context frame"));
    }
    if input.horizon <= t0 {
        return Err(Error::invalid(format!("horizon {} must exceed the {t0} context frames", input.horizon)));
    }
    if input.actions.len() < input.horizon - 1 {
        return Err(Error::invalid(format!(
            "missing action: {} frames need {} actions, got {}",
            input.horizon,
            input.horizon - 1,
            input.actions.len()
        )));
    }
    let adim = model.cfg.action_dim;
    if let Some(a) = input.actions.iter().find(|a| a.len() != adim) {
        return Err(Error::invalid(format!("action of dimension {} for a model expecting {adim}", a.len())));
    }
    let refs: Vec<&Frame> = input.context.iter().collect();
    let mut context = tok.encode_multiscale(&frames_to_tensor(&refs)?, Role::Observed, None)?;
    for (i, m) in context.iter_mut().enumerate() {
        m.frame = i + 1;
    }
    let prompt = match input.prompt {
        Some(p) => Some(tok.encode_multiscale(&frames_to_tensor(&[p])?, Role::Observed, None)?.remove(0)),
        None => None,
    };
    let layout = build_layout(&model.schedule, input.horizon, t0, prompt.is_some())?;
    let mut frame_actions = vec![vec![0.0; adim]];
    frame_actions.extend(input.actions[..input.horizon - 1].iter().cloned());
    let stream = StreamState::new(layout, model.vocab, model.cfg.width, tok.spec.embed_dim, &frame_actions)?;
    let mut state = DecodeState::new(model, stream, opts.use_cache, opts.sampling, opts.seed)?;
    state.prefill(model, tok, prompt.as_ref(), &context)?;
    Ok(state)
}

/// Decodes the generated token maps to pixels and gathers rewards.
pub fn finish_rollout<F: Float>(tok: &Tokenizer<F>, state: &DecodeState<F>) -> Result<RolloutOutput> {
    if !state.is_done() {
        return Err(Error::invalid("rollout is not finished"));
    }
    let layout = &state.stream.layout;
    let future: Vec<usize> = (layout.context + 1..=layout.frames).collect();
    let tokens: Vec<MultiScaleTokenMap> = future.iter().map(|&t| state.stream.frame_tokens(t)).collect();
    let frames = tensor_to_frames(&tok.decode_multiscale(&tokens)?);
    let rewards = future
        .iter()
        .map(|&t| state.rewards[t - 1].ok_or_else(|| Error::invalid(format!("no reward for frame {t}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutOutput { frames, rewards, tokens, forward_passes: state.forward_passes })
}

/// Generates the future frames of one rollout.
pub fn rollout<F: Float>(model: &WorldModel<F>, tok: &Tokenizer<F>, input: &RolloutInput<'_>, opts: &RolloutOptions) -> Result<RolloutOutput> {
    let mut state = prepare_rollout(model, tok, input, opts)?;
    state.run_to_end(model, tok)?;
    finish_rollout(tok, &state)
}

#[derive(Clone, Debug)]
pub struct BestOfN {
    pub best: usize,
    /// Metric of every sample, in seed order.
    pub scores: Vec<f64>,
    pub samples: Vec<RolloutOutput>,
}

impl BestOfN {
    pub fn best_sample(&self) -> &RolloutOutput {
        &self.samples[self.best]
    }

    /// Best score among the first `n` samples.
    pub fn best_of_first(&self, n: usize) -> f64 {
        self.scores[..n.min(self.scores.len())].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Runs `n` independently seeded rollouts and keeps the one scoring best
/// against `truth`. Sample `i` draws from random stream `i` of `opts.seed`,
/// so the samples of a smaller `n` are a prefix of those of a larger one.
pub fn best_of_n<F: Float>(
    model: &WorldModel<F>,
    tok: &Tokenizer<F>,
    input: &RolloutInput<'_>,
    truth: &[Frame],
    n: usize,
    metric: Metric,
    opts: &RolloutOptions,
) -> Result<BestOfN> {
    if n == 0 {
        return Err(Error::invalid("best-of-N needs N >= 1"));
    }
    if truth.len() != input.horizon - input.context.len() {
        return Err(Error::invalid(format!("{} ground-truth frames for {} predicted frames", truth.len(), input.horizon - input.context.len())));
    }
    let base = prepare_rollout(model, tok, input, opts)?;
    let mut scores = Vec::with_capacity(n);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = base.clone();
        s.set_stream(opts.seed, i as u64);
        s.run_to_end(model, tok)?;
        let out = finish_rollout(tok, &s)?;
        scores.push(metric.video(&out.frames, truth)?);
        samples.push(out);
    }
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    Ok(BestOfN { best, scores, samples })
}

/// Writes predicted frames as `frame_XXX.png` and `rewards.csv` into `dir`.
pub fn write_rollout(out: &RolloutOutput, first_frame: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = String::from("frame,reward\n");
    for (i, (f, r)) in out.frames.iter().zip(&out.rewards).enumerate() {
        let t = first_frame + i;
        write_png(f, &dir.join(format!("frame_{t:03}.png")))?;
        csv.push_str(&format!("{t},{r}\n"));
    }
    let path = dir.join("rewards.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lower_index() {
        assert_eq!(argmax(&[1.0f64, 3.0, 3.0, f64::NEG_INFINITY]).unwrap(), 1);
        assert!(argmax(&[f64::NEG_INFINITY; 3]).is_err());
    }

    #[test]
    fn sampler_rejects_bad_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_topk_topp(&[0.0f64, 1.0], 0, 1.0, 1.0, &mut rng).is_err());
        assert!(sample_topk_topp(&[0.0f64, 1.0], 1, 0.0, 1.0, &mut rng).is_err());
        assert!(sample_topk_topp(&[0.0f64, 1.0], 1, 1.0, 0.0, &mut rng).is_err());
        assert!(sample_topk_topp(&[f64::NEG_INFINITY; 2], 2, 1.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn top_k_boundary_ties_go_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let i = sample_topk_topp(&[0.0f64, 2.0, 2.0, 2.0], 2, 1.0, 1.0, &mut rng).unwrap();
            assert!(i == 1 || i == 2);
        }
    }
}

//! Teacher-forced objectives, learning-rate schedule and optimizer steps.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use swm_autograd::{accumulate_grads, clip_grad_norm, AdamW, Bound, Float, GradMap, Tape, Tensor, Var};

use crate::config::{scale_weights, RunConfig};
use crate::data::{sample_start, sample_training_segment, EpisodeRecord};
use crate::image::{frames_to_tensor, Frame};
use crate::layout::build_layout;
use crate::motion::{build_prompt, prompt_dropout};
use crate::tokenizer::{MultiScaleTokenMap, Tokenizer, TokenizerBatch, TokenizerStepMetrics};
use crate::embed::StreamState;
use crate::error::{Error, Result};
use crate::layout::{BlockKind, TokenStreamLayout};
use crate::model::WorldModel;
use crate::Role;

/// Linear warmup from 0 to `peak`, then cosine decay to `min_ratio * peak` at `total`.
pub fn lr_at(step: usize, peak: f64, warmup: usize, total: usize, min_ratio: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let floor = peak * min_ratio;
    if total <= warmup || step >= total {
        return if step >= total && total > warmup { floor } else { peak };
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-position cross-entropy weight: `lambda_l / (L_l^2 * F)` on the scale
/// blocks of the `F` future frames, zero everywhere else.
pub fn ce_weights(layout: &TokenStreamLayout) -> Result<Vec<f64>> {
    let fut = &layout.schedule.fut_scales;
    let lambda = scale_weights(fut)?;
    let n_future = (layout.frames - layout.context) as f64;
    let mut w = vec![0.0; layout.total];
    for blk in &layout.blocks {
        match blk.kind {
            BlockKind::Scale(l) if blk.role == Role::Future => {
                let v = lambda[l] / (blk.len as f64 * n_future);
                w[blk.positions()].iter_mut().for_each(|x| *x = v);
            }
            BlockKind::Raster(_) if blk.role == Role::Future => {
                let cells = (layout.schedule.latent_base * layout.schedule.latent_base) as f64;
                let v = 1.0 / (cells * n_future);
                w[blk.positions()].iter_mut().for_each(|x| *x = v);
            }
            _ => {}
        }
    }
    Ok(w)
}

/// Multi-scale cross-entropy over the future frames on full-vocabulary logits.
///
/// `targets` are unified-vocabulary ids, one per position.
pub fn multiscale_ce_loss<F: Float>(tape: &mut Tape<F>, logits: Var, targets: &[usize], layout: &TokenStreamLayout) -> Result<Var> {
    let (n, _) = tape.value(logits).dims2();
    if n != layout.total || targets.len() != n {
        return Err(Error::invalid(format!("{n} logit rows and {} targets for a layout of {}", targets.len(), layout.total)));
    }
    let w: Vec<F> = ce_weights(layout)?.into_iter().map(F::lit).collect();
    Ok(tape.cross_entropy(logits, targets, &w))
}

/// Same objective as [`multiscale_ce_loss`] computed only on future rows and
/// the future-codebook columns. Also returns the number of future tokens.
pub fn future_ce_loss<F: Float>(
    tape: &mut Tape<F>,
    b: &Bound,
    model: &WorldModel<F>,
    hidden: Var,
    state: &StreamState<F>,
) -> Result<(Var, Var, usize)> {
    let layout = &state.layout;
    let weights = ce_weights(layout)?;
    let range = model.vocab.range(Role::Future);
    let rows: Vec<usize> = (0..layout.total).filter(|&p| weights[p] > 0.0).collect();
    let targets: Vec<usize> = rows.iter().map(|&p| state.ids[p] - range.start).collect();
    let w: Vec<F> = rows.iter().map(|&p| F::lit(weights[p])).collect();
    let h = tape.gather_rows(hidden, &rows);
    let logits = tape.linear_cols(h, b.get("head.w"), Some(b.get("head.b")), range.start, range.end);
    let loss = tape.cross_entropy(logits, &targets, &w);
    let per_token = F::lit(1.0 / rows.len() as f64);
    let mean = tape.cross_entropy(logits, &targets, &vec![per_token; rows.len()]);
    Ok((loss, mean, rows.len()))
}

/// Mean squared reward error over frames `t > t0`; `pred` is `frames x 1`.
pub fn reward_loss<F: Float>(tape: &mut Tape<F>, pred: Var, truth: &[f64], t0: usize) -> Result<Var> {
    let (n, _) = tape.value(pred).dims2();
    if truth.len() != n || t0 >= n {
        return Err(Error::invalid(format!("{n} predicted rewards, {} targets, {t0} context frames", truth.len())));
    }
    let rows: Vec<usize> = (t0..n).collect();
    let p = tape.gather_rows(pred, &rows);
    let t = tape.constant(Tensor::new(&[n - t0, 1], truth[t0..].iter().map(|&v| F::lit(v)).collect()));
    Ok(tape.mse(p, t))
}

/// Host-side reward MSE for reporting.
pub fn reward_mse(pred: &[f64], truth: &[f64], t0: usize) -> Result<f64> {
    if pred.len() != truth.len() || t0 >= pred.len() {
        return Err(Error::invalid("reward length mismatch"));
    }
    let n = (pred.len() - t0) as f64;
    Ok(pred[t0..].iter().zip(&truth[t0..]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

/// One teacher-forced sequence with its per-frame rewards.
#[derive(Clone, Debug)]
pub struct TrainExample<F: Float> {
    pub state: StreamState<F>,
    pub rewards: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub ce_loss: f64,
    /// Unweighted mean negative log-likelihood per future token.
    pub ce_per_token: f64,
    pub reward_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tokens_per_s: f64,
}

/// Loss of one example on a tape: `CE + reward_weight * reward MSE`.
pub struct ExampleLoss {
    pub total: Var,
    pub ce: Var,
    pub ce_mean: Var,
    pub reward: Option<Var>,
    pub tokens: usize,
}

pub fn example_loss<F: Float, R: Rng>(
    tape: &mut Tape<F>,
    b: &Bound,
    model: &WorldModel<F>,
    ex: &TrainExample<F>,
    reward_weight: Option<f64>,
    rng: &mut R,
) -> Result<ExampleLoss> {
    let h = model.hidden(tape, b, &ex.state, rng)?;
    let (ce, ce_mean, tokens) = future_ce_loss(tape, b, model, h, &ex.state)?;
    let mut total = ce;
    let mut reward = None;
    if let Some(wr) = reward_weight {
        let pred = model.rewards(tape, b, h, &ex.state.layout);
        let r = reward_loss(tape, pred, &ex.rewards, ex.state.layout.context)?;
        let scaled = tape.scale(r, F::lit(wr));
        total = tape.add(total, scaled);
        reward = Some(r);
    }
    Ok(ExampleLoss { total, ce, ce_mean, reward, tokens })
}

/// Averaged gradients over a batch plus the unclipped metrics.
pub fn batch_gradients<F: Float, R: Rng>(
    model: &WorldModel<F>,
    batch: &[TrainExample<F>],
    run: &RunConfig,
    rng: &mut R,
) -> Result<(GradMap<F>, StepMetrics)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let mut grads = GradMap::new();
    let mut m = StepMetrics::default();
    let inv = 1.0 / batch.len() as f64;
    let mut tokens = 0;
    for ex in batch {
        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape);
        let rw = run.train_reward.then_some(run.reward_weight);
        let l = example_loss(&mut tape, &b, model, ex, rw, rng)?;
        let total = tape.scale(l.total, F::lit(inv));
        let value = tape.value(total).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {value}")));
        }
        m.ce_loss += tape.value(l.ce).item().as_f64() * inv;
        m.ce_per_token += tape.value(l.ce_mean).item().as_f64() * inv;
        if let Some(r) = l.reward {
            m.reward_loss += tape.value(r).item().as_f64() * inv;
        }
        tokens += l.tokens;
        let mut g = tape.backward(total);
        accumulate_grads(&mut grads, model.params.gradients(&b, &mut g));
    }
    m.tokens_per_s = tokens as f64;
    Ok((grads, m))
}

/// One optimizer step: averaged batch gradients, global-norm clipping,
/// decoupled weight decay, scheduled learning rate.
pub fn train_step<F: Float, R: Rng>(
    model: &mut WorldModel<F>,
    opt: &mut AdamW<F>,
    batch: &[TrainExample<F>],
    run: &RunConfig,
    step: usize,
    rng: &mut R,
) -> Result<StepMetrics> {
    let t0 = Instant::now();
    let (mut grads, mut m) = batch_gradients(model, batch, run, rng)?;
    m.grad_norm = clip_grad_norm(&mut grads, run.grad_clip);
    if !m.grad_norm.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient norm at step {step}")));
    }
    m.lr = lr_at(step, run.peak_lr, run.warmup_steps, run.total_steps, run.min_lr_ratio);
    opt.step(&mut model.params, &grads, m.lr);
    m.step = step;
    m.tokens_per_s /= t0.elapsed().as_secs_f64().max(1e-9);
    Ok(m)
}

pub fn transformer_optimizer<F: Float>(run: &RunConfig) -> AdamW<F> {
    AdamW::new(0.9, 0.999, run.weight_decay_transformer)
}

pub fn tokenizer_optimizer<F: Float>(run: &RunConfig) -> AdamW<F> {
    AdamW::new(0.9, 0.999, run.weight_decay_tokenizer)
}

/// Append-only CSV of training metrics.
pub struct MetricsLog {
    file: File,
}

pub const METRICS_HEADER: &str = "step,ce_loss,reward_loss,lr,grad_norm,tokens_per_s";

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists();
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        if fresh {
            writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { file })
    }

    pub fn append(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.file, "{},{:.6},{:.6},{:.8},{:.6},{:.1}", m.step, m.ce_loss, m.reward_loss, m.lr, m.grad_norm, m.tokens_per_s)
            .map_err(|e| Error::io("metrics.csv", e))
    }
}

/// Token maps of a clip: the first `t0` frames with the observed branch,
/// the rest with the future branch attending to all `t0` context frames.
/// Map `i` carries frame number `i + 1`.
pub fn tokenize_clip<F: Float>(tok: &Tokenizer<F>, frames: &[Frame], t0: usize) -> Result<Vec<MultiScaleTokenMap>> {
    if t0 == 0 || t0 > frames.len() {
        return Err(Error::invalid(format!("{t0} context frames in a clip of {}", frames.len())));
    }
    let obs: Vec<&Frame> = frames[..t0].iter().collect();
    let mut maps = tok.encode_multiscale(&frames_to_tensor(&obs)?, Role::Observed, None)?;
    if frames.len() > t0 {
        let refs: Vec<&MultiScaleTokenMap> = maps.iter().collect();
        let ctx = tok.context_cells(&refs)?;
        let fut: Vec<&Frame> = frames[t0..].iter().collect();
        let contexts = vec![ctx; fut.len()];
        maps.extend(tok.encode_multiscale(&frames_to_tensor(&fut)?, Role::Future, Some(&contexts))?);
    }
    for (i, m) in maps.iter_mut().enumerate() {
        m.frame = i + 1;
    }
    Ok(maps)
}

/// Teacher-forced example from a clip. `actions[t]` follows frame `t`
/// (0-based), so frame `t + 1` is conditioned on `actions[t]`.
pub fn prepare_example<F: Float>(
    model: &WorldModel<F>,
    tok: &Tokenizer<F>,
    clip: &EpisodeRecord,
    t0: usize,
    prompt: Option<&Frame>,
) -> Result<TrainExample<F>> {
    let maps = tokenize_clip(tok, &clip.frames, t0)?;
    let prompt_map = match prompt {
        Some(p) => Some(tok.encode_multiscale(&frames_to_tensor(&[p])?, Role::Observed, None)?.remove(0)),
        None => None,
    };
    let layout = build_layout(&model.schedule, clip.len(), t0, prompt_map.is_some())?;
    let mut frame_actions = vec![vec![0.0; clip.action_dim]];
    frame_actions.extend((0..clip.len() - 1).map(|t| clip.action(t)));
    let state = StreamState::teacher_forced(layout, model.vocab, model.cfg.width, tok, prompt_map.as_ref(), &maps, &frame_actions)?;
    Ok(TrainExample { state, rewards: clip.rewards_f64() })
}

/// Motion prompt for a clip when the prompt branch is enabled and the
/// dropout draw keeps it.
pub fn clip_prompt<R: Rng>(clip: &EpisodeRecord, run: &RunConfig, rng: &mut R) -> Result<Option<Frame>> {
    if !run.use_motion_prompt {
        return Ok(None);
    }
    let Some(tr) = &clip.trajectories else { return Ok(None) };
    if !prompt_dropout(run.prompt_dropout, rng)? {
        return Ok(None);
    }
    build_prompt(&clip.frames[0], tr, run.confidence_threshold).map(Some)
}

/// Observed and future frames of several clips for one tokenizer step.
pub fn tokenizer_batch<F: Float>(clips: &[&[Frame]], t0: usize) -> Result<TokenizerBatch<F>> {
    let mut obs = Vec::new();
    let mut fut = Vec::new();
    let mut ctx = Vec::new();
    for c in clips {
        if c.len() < t0 || t0 == 0 {
            return Err(Error::invalid("clip shorter than the context"));
        }
        let base = obs.len();
        obs.extend(c[..t0].iter());
        for f in &c[t0..] {
            fut.push(f);
            ctx.push((base..base + t0).collect());
        }
    }
    Ok(TokenizerBatch {
        observed: frames_to_tensor(&obs)?,
        future: if fut.is_empty() { None } else { Some(frames_to_tensor(&fut)?) },
        future_context: ctx,
    })
}

/// Mean per-token cross-entropy and reward MSE over `examples`, without
/// dropout or gradients.
pub fn evaluate_examples<F: Float>(model: &WorldModel<F>, examples: &[TrainExample<F>]) -> Result<StepMetrics> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples to evaluate"));
    }
    let mut m = StepMetrics::default();
    let inv = 1.0 / examples.len() as f64;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    for ex in examples {
        let mut tape = Tape::inference();
        let b = model.params.bind(&mut tape);
        let l = example_loss(&mut tape, &b, model, ex, Some(1.0), &mut rng)?;
        m.ce_loss += tape.value(l.ce).item().as_f64() * inv;
        m.ce_per_token += tape.value(l.ce_mean).item().as_f64() * inv;
        m.reward_loss += l.reward.map_or(0.0, |r| tape.value(r).item().as_f64()) * inv;
    }
    Ok(m)
}

/// Draws training batches of random clip segments and memoizes the prepared
/// examples, which stay valid while the tokenizer is frozen.
pub struct ExampleSampler<'a, F: Float> {
    clips: &'a [EpisodeRecord],
    run: RunConfig,
    step: usize,
    cache: HashMap<(usize, usize, bool), TrainExample<F>>,
    capacity: usize,
}

impl<'a, F: Float> ExampleSampler<'a, F> {
    pub fn new(clips: &'a [EpisodeRecord], run: &RunConfig, step: usize) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::invalid("no training clips"));
        }
        let need = (run.sequence_length - 1) * step.max(1) + 1;
        if let Some(c) = clips.iter().find(|c| c.len() < need) {
            return Err(Error::invalid(format!("clip of {} frames is shorter than a {need}-frame training segment", c.len())));
        }
        Ok(Self { clips, run: run.clone(), step: step.max(1), cache: HashMap::new(), capacity: 4096 })
    }

    pub fn cached(&self) -> usize {
        self.cache.len()
    }

    pub fn example<R: Rng>(&mut self, model: &WorldModel<F>, tok: &Tokenizer<F>, clip: usize, start: usize, rng: &mut R) -> Result<TrainExample<F>> {
        let idx: Vec<usize> = (0..self.run.sequence_length).map(|k| start + k * self.step).collect();
        let seg = self.clips[clip].select(&idx)?;
        let prompt = clip_prompt(&seg, &self.run, rng)?;
        let key = (clip, start, prompt.is_some());
        if let Some(ex) = self.cache.get(&key) {
            return Ok(ex.clone());
        }
        let ex = prepare_example(model, tok, &seg, self.run.context_frames, prompt.as_ref())?;
        if self.cache.len() < self.capacity {
            self.cache.insert(key, ex.clone());
        }
        Ok(ex)
    }

    pub fn batch<R: Rng>(&mut self, model: &WorldModel<F>, tok: &Tokenizer<F>, rng: &mut R) -> Result<Vec<TrainExample<F>>> {
        (0..self.run.batch_size.max(1))
            .map(|_| {
                let clip = rng.random_range(0..self.clips.len());
                let start = sample_start(self.clips[clip].len(), self.run.sequence_length, self.step, rng)?;
                self.example(model, tok, clip, start, rng)
            })
            .collect()
    }
}

/// Runs `steps` world-model updates. `on_step` sees every step's metrics
/// and returns `true` to stop early. Returns the metrics of the last step.
pub fn fit_world_model<F: Float, R: Rng>(
    model: &mut WorldModel<F>,
    tok: &Tokenizer<F>,
    clips: &[EpisodeRecord],
    run: &RunConfig,
    step_size: usize,
    steps: usize,
    rng: &mut R,
    mut on_step: impl FnMut(&WorldModel<F>, &StepMetrics) -> Result<bool>,
) -> Result<StepMetrics> {
    let mut sampler = ExampleSampler::new(clips, run, step_size)?;
    let mut opt = transformer_optimizer(run);
    let mut last = StepMetrics::default();
    for step in 0..steps {
        let batch = sampler.batch(model, tok, rng)?;
        last = train_step(model, &mut opt, &batch, run, step, rng)?;
        if on_step(model, &last)? {
            break;
        }
    }
    Ok(last)
}

/// Runs `steps` tokenizer updates on random segments of `clips`. The learning
/// rate decays from `tokenizer_lr` on a cosine over `tokenizer_steps` total
/// updates. Codebooks are initialised from the first batch of a fresh tokenizer.
pub fn fit_tokenizer<F: Float, R: Rng>(
    tok: &mut Tokenizer<F>,
    clips: &[EpisodeRecord],
    run: &RunConfig,
    steps: usize,
    rng: &mut R,
    mut on_step: impl FnMut(&TokenizerStepMetrics) -> Result<bool>,
) -> Result<TokenizerStepMetrics> {
    let len = run.sequence_length;
    if clips.iter().any(|c| c.len() < len) || clips.is_empty() {
        return Err(Error::invalid(format!("tokenizer training needs clips of at least {len} frames")));
    }
    let mut opt = tokenizer_optimizer(run);
    let mut last = TokenizerStepMetrics::default();
    for _ in 0..steps {
        let segs: Vec<EpisodeRecord> = (0..run.tokenizer_batch.max(1))
            .map(|_| {
                let c = &clips[rng.random_range(0..clips.len())];
                sample_training_segment(c, len, 1, rng)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&[Frame]> = segs.iter().map(|s| s.frames.as_slice()).collect();
        let batch = tokenizer_batch(&refs, run.context_frames)?;
        if tok.steps == 0 {
            tok.init_codebooks(&batch, rng)?;
        }
        let lr = lr_at(tok.steps as usize, run.tokenizer_lr, 0, run.tokenizer_steps, run.min_lr_ratio);
        last = tok.train_step(&mut opt, &batch, lr, run.grad_clip, rng)?;
        if on_step(&last)? {
            break;
        }
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 1e-3, 100, 1000, 0.0), 0.0);
        assert_eq!(lr_at(100, 1e-3, 100, 1000, 0.0), 1e-3);
        assert!((lr_at(550, 1e-3, 100, 1000, 0.0) - 5e-4).abs() < 1e-12);
        assert!(lr_at(1000, 1e-3, 100, 1000, 0.1) - 1e-4 < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 100..=1000 {
            let lr = lr_at(s, 1e-3, 100, 1000, 0.0);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn reward_mse_examples() {
        assert_eq!(reward_mse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 1).unwrap(), 0.0);
        assert!((reward_mse(&[1.5, 2.5, 3.5], &[1.0, 2.0, 3.0], 0).unwrap() - 0.25).abs() < 1e-15);
    }
}

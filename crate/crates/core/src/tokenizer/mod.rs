//! Asymmetric multi-scale vector-quantized tokenizer.
//!
//! Each role (observed, future) owns an encoder, a decoder and a codebook of
//! identical shapes. A frame is encoded to a `B x B` latent, then quantized
//! coarse to fine: at every scale the running residual is downsampled,
//! snapped to the nearest codewords, upsampled back and subtracted. Future
//! frames first mix in the quantized latents of the context frames through a
//! single cross-attention layer.

pub mod net;
pub mod quantize;
pub mod resample;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use swm_autograd::{clip_grad_norm, AdamW, Bound, Float, ParamStore, Tape, Tensor, Var};

use crate::config::{Config, ScaleSchedule, ENCODER_STRIDE};
use crate::error::{Error, Result};
use crate::Role;
pub use net::NetShape;
pub use quantize::{quantize, quantize_rows};
use resample::{resize_planes, resize_tensor};

/// One scale of a token map: a `side x side` row-major grid of code indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub side: usize,
    pub indices: Vec<usize>,
}

/// Coarse-to-fine token grids of one frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiScaleTokenMap {
    pub frame: usize,
    pub role: Role,
    pub maps: Vec<TokenGrid>,
}

impl MultiScaleTokenMap {
    pub fn sides(&self) -> Vec<usize> {
        self.maps.iter().map(|g| g.side).collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.maps.iter().map(|g| g.indices.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub channels: [usize; 2],
    pub groups: usize,
    pub embed_dim: usize,
    pub codebook_size: usize,
    pub beta: f64,
    pub cross_attn_heads: usize,
    pub dead_code_steps: usize,
    pub frame_size: usize,
    pub schedule: ScaleSchedule,
}

impl TokenizerSpec {
    pub fn from_config(cfg: &Config) -> Self {
        let t = &cfg.model.tokenizer;
        Self {
            channels: t.channels,
            groups: t.groups,
            embed_dim: cfg.model.embed_dim,
            codebook_size: cfg.model.codebook_size,
            beta: t.beta,
            cross_attn_heads: t.cross_attn_heads,
            dead_code_steps: t.dead_code_steps,
            frame_size: cfg.data.frame_size,
            schedule: cfg.schedule.clone(),
        }
    }

    pub fn latent_base(&self) -> usize {
        self.schedule.latent_base
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.frame_size != ENCODER_STRIDE * self.latent_base() {
            return Err(Error::config("data.frame_size", format!("must equal {ENCODER_STRIDE} * latent_base")));
        }
        if self.groups == 0 || self.channels.iter().any(|&c| c == 0 || c % self.groups != 0) {
            return Err(Error::config("model.tokenizer.groups", "must divide every channel width"));
        }
        if self.embed_dim == 0 || self.codebook_size == 0 {
            return Err(Error::config("model.embed_dim", "embedding size and codebook size must be positive"));
        }
        if self.cross_attn_heads == 0 || self.embed_dim % self.cross_attn_heads != 0 {
            return Err(Error::config("model.tokenizer.cross_attn_heads", "must divide embed_dim"));
        }
        Ok(())
    }

    fn net_shape(&self) -> NetShape {
        NetShape { c1: self.channels[0], c2: self.channels[1], groups: self.groups, embed_dim: self.embed_dim }
    }
}

/// Values held fixed by the stop-gradient operators of the loss.
#[derive(Clone, Debug)]
pub struct Frozen<F> {
    pub grids: Vec<Vec<TokenGrid>>,
    /// `sg(f_hat - f)` used by the straight-through estimator.
    pub delta: Tensor<F>,
    /// `sg(f)` for the codebook term.
    pub f: Tensor<F>,
    /// `sg(f_hat)` for the commitment term.
    pub f_hat: Tensor<F>,
}

/// Tape handles of one role's loss.
pub struct LossParts<F> {
    pub loss: Var,
    pub recon: Var,
    pub commit: Var,
    pub latent: Var,
    pub recon_image: Var,
    pub frozen: Frozen<F>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenizerStepMetrics {
    pub loss: f64,
    pub recon_obs: f64,
    pub recon_fut: f64,
    pub commit: f64,
    pub grad_norm: f64,
    pub dead_resets: usize,
}

/// Frames of one training example: the first `context` are observed.
#[derive(Clone, Debug)]
pub struct TokenizerBatch<F> {
    pub observed: Tensor<F>,
    pub future: Option<Tensor<F>>,
    /// For each future sample, the rows of `observed` forming its context.
    pub future_context: Vec<Vec<usize>>,
}

pub struct Tokenizer<F: Float> {
    pub spec: TokenizerSpec,
    pub params: ParamStore<F>,
    resamplers: BTreeMap<(usize, usize), Arc<Tensor<F>>>,
    /// Selection counts per role and code since creation.
    pub usage: [Vec<u64>; 2],
    last_used: [Vec<u64>; 2],
    pub steps: u64,
}

fn role_slot(role: Role) -> usize {
    match role {
        Role::Observed => 0,
        Role::Future => 1,
    }
}

impl<F: Float> Tokenizer<F> {
    pub fn new<R: Rng>(spec: TokenizerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let shape = spec.net_shape();
        for role in [Role::Observed, Role::Future] {
            net::init_branch(&mut params, role, shape, rng);
            let cb: Vec<F> = (0..spec.codebook_size * spec.embed_dim)
                .map(|_| F::lit(rng.random_range(-1.0..1.0) / spec.codebook_size as f64))
                .collect();
            params.insert(format!("{}.codebook", net::prefix(role)), Tensor::new(&[spec.codebook_size, spec.embed_dim], cb));
        }
        net::init_cross_attention(&mut params, spec.embed_dim, rng);
        Ok(Self::assemble(spec, params))
    }

    /// Wraps an existing parameter set, checking names and shapes.
    pub fn from_params(spec: TokenizerSpec, params: ParamStore<F>) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reference = Tokenizer::<F>::new(spec.clone(), &mut rng)?;
        check_same_shapes(&reference.params, &params)?;
        Ok(Self::assemble(spec, params))
    }

    fn assemble(spec: TokenizerSpec, params: ParamStore<F>) -> Self {
        let base = spec.latent_base();
        let mut resamplers = BTreeMap::new();
        let mut sides: Vec<usize> = spec.schedule.obs_scales.clone();
        sides.push(base);
        for &s in &sides {
            resamplers.insert((base, s), Arc::new(resize_tensor(base, s)));
            resamplers.insert((s, base), Arc::new(resize_tensor(s, base)));
        }
        let v = spec.codebook_size;
        Self { spec, params, resamplers, usage: [vec![0; v], vec![0; v]], last_used: [vec![0; v], vec![0; v]], steps: 0 }
    }

    pub fn cast<G: Float>(&self) -> Tokenizer<G> {
        let mut t = Tokenizer::assemble(self.spec.clone(), self.params.cast());
        t.usage = self.usage.clone();
        t.last_used = self.last_used.clone();
        t.steps = self.steps;
        t
    }

    pub fn resampler(&self, from: usize, to: usize) -> Arc<Tensor<F>> {
        match self.resamplers.get(&(from, to)) {
            Some(r) => r.clone(),
            None => Arc::new(resize_tensor(from, to)),
        }
    }

    pub fn codebook(&self, role: Role) -> &Tensor<F> {
        self.params.get(&format!("{}.codebook", net::prefix(role)))
    }

    fn check_frames(&self, x: &Tensor<F>) -> Result<usize> {
        let s = x.shape();
        let fs = self.spec.frame_size;
        if s.len() != 4 || s[1] != 3 || s[2] != fs || s[3] != fs {
            return Err(Error::invalid(format!("expected frames of shape (n, 3, {fs}, {fs}), got {s:?}")));
        }
        Ok(s[0])
    }

    /// Encoder output (plus cross-attention for the future role).
    pub fn encode_latent<R: Rng>(
        &self,
        tape: &mut Tape<F>,
        b: &Bound,
        role: Role,
        x: Var,
        contexts: Option<&[Tensor<F>]>,
        rng: &mut R,
    ) -> Result<Var> {
        let f = net::encode(tape, b, role, self.spec.groups, x);
        match (role, contexts) {
            (Role::Observed, None) => Ok(f),
            (Role::Observed, Some(_)) => Err(Error::invalid("observed frames take no cross-attention context")),
            (Role::Future, None) => Err(Error::invalid("future frames require observed context tokens")),
            (Role::Future, Some(ctx)) => {
                for c in ctx {
                    let (m, e) = c.dims2();
                    if m == 0 || e != self.spec.embed_dim {
                        return Err(Error::invalid(format!("context must be (m > 0) x {}, got {m} x {e}", self.spec.embed_dim)));
                    }
                }
                if ctx.len() != tape.value(f).dims4().0 {
                    return Err(Error::invalid("one context per future frame required"));
                }
                Ok(net::cross_attend(tape, b, self.spec.cross_attn_heads, f, ctx, rng))
            }
        }
    }

    /// Coarse-to-fine residual quantization of latents `(n, E, B, B)` with
    /// the scales of `role`. Returns per-sample grids.
    pub fn residual_quantize(&self, role: Role, f: &Tensor<F>) -> Result<Vec<Vec<TokenGrid>>> {
        self.residual_quantize_scales(role, f, self.spec.schedule.scales(role))
    }

    fn residual_quantize_scales(&self, role: Role, f: &Tensor<F>, scales: &[usize]) -> Result<Vec<Vec<TokenGrid>>> {
        let (n, e, h, w) = f.dims4();
        let base = self.spec.latent_base();
        if (e, h, w) != (self.spec.embed_dim, base, base) {
            return Err(Error::invalid(format!("latent shape {:?} does not match ({e}, {base}, {base})", f.shape())));
        }
        let cb = self.codebook(role).data();
        let plane = base * base;
        let mut out = Vec::with_capacity(n);
        for s in 0..n {
            let mut resid = f.data()[s * e * plane..(s + 1) * e * plane].to_vec();
            let mut grids = Vec::with_capacity(scales.len());
            for &side in scales {
                let small = resize_planes(&resid, e, &self.resampler(base, side));
                let cells = planes_to_cells(&small, e, side * side);
                let idx = quantize_rows(&cells, e, cb)?;
                let up = self.upsampled_codes(cb, &idx, side);
                for (r, u) in resid.iter_mut().zip(&up) {
                    *r -= *u;
                }
                grids.push(TokenGrid { side, indices: idx });
            }
            out.push(grids);
        }
        Ok(out)
    }

    /// Codewords of a grid placed as `(E, side, side)` planes and upsampled to `(E, B, B)`.
    fn upsampled_codes(&self, cb: &[F], idx: &[usize], side: usize) -> Vec<F> {
        let e = self.spec.embed_dim;
        let mut planes = vec![F::zero(); e * side * side];
        for (p, &i) in idx.iter().enumerate() {
            for c in 0..e {
                planes[c * side * side + p] = cb[i * e + c];
            }
        }
        resize_planes(&planes, e, &self.resampler(side, self.spec.latent_base()))
    }

    /// Adds the upsampled codewords of one grid into an `(E, B, B)` accumulator.
    pub fn accumulate_grid(&self, role: Role, acc: &mut [F], grid: &TokenGrid) -> Result<()> {
        self.check_grid(grid)?;
        let up = self.upsampled_codes(self.codebook(role).data(), &grid.indices, grid.side);
        for (a, u) in acc.iter_mut().zip(&up) {
            *a += *u;
        }
        Ok(())
    }

    fn check_grid(&self, grid: &TokenGrid) -> Result<()> {
        if grid.indices.len() != grid.side * grid.side {
            return Err(Error::invalid(format!("grid of side {} holds {} indices", grid.side, grid.indices.len())));
        }
        if let Some(&bad) = grid.indices.iter().find(|&&i| i >= self.spec.codebook_size) {
            return Err(Error::invalid(format!("token index {bad} outside codebook of size {}", self.spec.codebook_size)));
        }
        Ok(())
    }

    /// Quantized latent `(E, B, B)` of a (possibly partial) token map.
    pub fn latent_from_tokens(&self, map: &MultiScaleTokenMap) -> Result<Vec<F>> {
        if map.maps.is_empty() {
            return Err(Error::invalid("cannot decode an empty token map"));
        }
        let scales = self.spec.schedule.scales(map.role);
        if map.maps.len() > scales.len() || map.sides() != scales[..map.maps.len()] {
            return Err(Error::invalid(format!(
                "token map sides {:?} are not a prefix of the {} scales {scales:?}",
                map.sides(),
                map.role.name()
            )));
        }
        let base = self.spec.latent_base();
        let mut acc = vec![F::zero(); self.spec.embed_dim * base * base];
        for g in &map.maps {
            self.accumulate_grid(map.role, &mut acc, g)?;
        }
        Ok(acc)
    }

    /// Same as [`Tokenizer::latent_from_tokens`] but on the tape, so codebook
    /// gradients flow through the gathered rows.
    fn latent_on_tape(&self, tape: &mut Tape<F>, b: &Bound, role: Role, grids: &[Vec<TokenGrid>]) -> Var {
        let n = grids.len();
        let base = self.spec.latent_base();
        let cb = b.get(&format!("{}.codebook", net::prefix(role)));
        let mut acc: Option<Var> = None;
        for (l, &side) in self.spec.schedule.scales(role).iter().enumerate() {
            let idx: Vec<usize> = grids.iter().flat_map(|g| g[l].indices.iter().copied()).collect();
            let rows = tape.gather_rows(cb, &idx);
            let planes = tape.from_cells(rows, n, side, side);
            let r = self.resampler(side, base);
            let up = tape.resize(planes, r.clone(), r);
            acc = Some(match acc {
                Some(a) => tape.add(a, up),
                None => up,
            });
        }
        acc.expect("non-empty schedule")
    }

    /// Encodes `(n, 3, H, W)` frames to token maps with the given role.
    pub fn encode_multiscale(&self, frames: &Tensor<F>, role: Role, contexts: Option<&[Tensor<F>]>) -> Result<Vec<MultiScaleTokenMap>> {
        self.check_frames(frames)?;
        let mut tape = Tape::inference();
        let b = self.params.bind(&mut tape);
        let x = tape.constant(frames.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = self.encode_latent(&mut tape, &b, role, x, contexts, &mut rng)?;
        let grids = self.residual_quantize(role, tape.value(f))?;
        Ok(grids.into_iter().map(|maps| MultiScaleTokenMap { frame: 0, role, maps }).collect())
    }

    /// Decodes token maps (any schedule prefix, one role) to `(n, 3, H, W)`.
    pub fn decode_multiscale(&self, maps: &[MultiScaleTokenMap]) -> Result<Tensor<F>> {
        let first = maps.first().ok_or_else(|| Error::invalid("no token maps to decode"))?;
        if maps.iter().any(|m| m.role != first.role) {
            return Err(Error::invalid("all decoded token maps must share one role"));
        }
        let latents = maps.iter().map(|m| self.latent_from_tokens(m)).collect::<Result<Vec<_>>>()?;
        self.decode_latents(first.role, latents)
    }

    /// Runs the role's decoder on stacked `(E, B, B)` latents.
    pub fn decode_latents(&self, role: Role, latents: Vec<Vec<F>>) -> Result<Tensor<F>> {
        let n = latents.len();
        let base = self.spec.latent_base();
        let z = Tensor::new(&[n, self.spec.embed_dim, base, base], latents.concat());
        let mut tape = Tape::inference();
        let b = self.params.bind(&mut tape);
        let zv = tape.constant(z);
        let out = net::decode(&mut tape, &b, role, self.spec.groups, zv);
        Ok(tape.value(out).clone())
    }

    /// Quantized finest-grid latents of observed token maps as context cells
    /// (`(k * B^2) x E`), ready for the future branch's cross-attention.
    pub fn context_cells(&self, observed: &[&MultiScaleTokenMap]) -> Result<Tensor<F>> {
        let e = self.spec.embed_dim;
        let plane = self.spec.latent_base() * self.spec.latent_base();
        let mut data = Vec::with_capacity(observed.len() * plane * e);
        for m in observed {
            if m.role != Role::Observed {
                return Err(Error::invalid("context must come from observed-role token maps"));
            }
            let lat = self.latent_from_tokens(m)?;
            data.extend(planes_to_cells(&lat, e, plane));
        }
        if data.is_empty() {
            return Err(Error::invalid("empty context"));
        }
        Ok(Tensor::new(&[observed.len() * plane, e], data))
    }

    /// Reconstruction plus `beta`-weighted commitment loss for one role.
    ///
    /// With `frozen`, quantization indices and every stop-gradient value are
    /// taken from it instead of being recomputed.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_parts<R: Rng>(
        &self,
        tape: &mut Tape<F>,
        b: &Bound,
        role: Role,
        frames: &Tensor<F>,
        contexts: Option<&[Tensor<F>]>,
        frozen: Option<&Frozen<F>>,
        rng: &mut R,
    ) -> Result<LossParts<F>> {
        self.check_frames(frames)?;
        let x = tape.constant(frames.clone());
        let f = self.encode_latent(tape, b, role, x, contexts, rng)?;
        if !tape.value(f).all_finite() {
            return Err(Error::Numeric("encoder produced non-finite latents".into()));
        }
        let grids = match frozen {
            Some(fr) => fr.grids.clone(),
            None => self.residual_quantize(role, tape.value(f))?,
        };
        let f_hat = self.latent_on_tape(tape, b, role, &grids);
        let frozen = match frozen {
            Some(fr) => fr.clone(),
            None => {
                let fv = tape.value(f).clone();
                let fh = tape.value(f_hat).clone();
                let delta = Tensor::new(fv.shape(), fh.data().iter().zip(fv.data()).map(|(&a, &c)| a - c).collect());
                Frozen { grids, delta, f: fv, f_hat: fh }
            }
        };
        let delta = tape.constant(frozen.delta.clone());
        let z = tape.add(f, delta);
        let recon_image = net::decode(tape, b, role, self.spec.groups, z);
        let recon = tape.mse(recon_image, x);
        let sg_f = tape.constant(frozen.f.clone());
        let sg_fh = tape.constant(frozen.f_hat.clone());
        let codebook_term = tape.mse(f_hat, sg_f);
        let commit_term = tape.mse(sg_fh, f);
        let commit = tape.add(codebook_term, commit_term);
        let weighted = tape.scale(commit, F::lit(self.spec.beta));
        let loss = tape.add(recon, weighted);
        Ok(LossParts { loss, recon, commit, latent: f, recon_image, frozen })
    }

    /// One optimization step over both branches.
    pub fn train_step<R: Rng>(
        &mut self,
        opt: &mut AdamW<F>,
        batch: &TokenizerBatch<F>,
        lr: f64,
        grad_clip: f64,
        rng: &mut R,
    ) -> Result<TokenizerStepMetrics> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let obs = self.loss_parts(&mut tape, &b, Role::Observed, &batch.observed, None, None, rng)?;
        let mut total = obs.loss;
        let mut m = TokenizerStepMetrics {
            recon_obs: tape.value(obs.recon).item().as_f64(),
            commit: tape.value(obs.commit).item().as_f64(),
            ..Default::default()
        };
        let mut selected: Vec<(Role, Vec<Vec<TokenGrid>>, Tensor<F>)> =
            vec![(Role::Observed, obs.frozen.grids.clone(), obs.frozen.f.clone())];
        if let Some(fut) = &batch.future {
            let e = self.spec.embed_dim;
            let plane = self.spec.latent_base() * self.spec.latent_base();
            let obs_lat = &obs.frozen.f_hat;
            let contexts: Vec<Tensor<F>> = batch
                .future_context
                .iter()
                .map(|rows| {
                    let mut d = Vec::with_capacity(rows.len() * plane * e);
                    for &r in rows {
                        d.extend(planes_to_cells(&obs_lat.data()[r * e * plane..(r + 1) * e * plane], e, plane));
                    }
                    Tensor::new(&[rows.len() * plane, e], d)
                })
                .collect();
            let fp = self.loss_parts(&mut tape, &b, Role::Future, fut, Some(&contexts), None, rng)?;
            m.recon_fut = tape.value(fp.recon).item().as_f64();
            m.commit += tape.value(fp.commit).item().as_f64();
            total = tape.add(total, fp.loss);
            selected.push((Role::Future, fp.frozen.grids.clone(), fp.frozen.f.clone()));
        }
        m.loss = tape.value(total).item().as_f64();
        if !m.loss.is_finite() {
            return Err(Error::Numeric(format!("tokenizer loss is {} at step {}", m.loss, self.steps)));
        }
        let mut grads = tape.backward(total);
        let mut gm = self.params.gradients(&b, &mut grads);
        drop(tape);
        m.grad_norm = clip_grad_norm(&mut gm, grad_clip);
        opt.step(&mut self.params, &gm, lr);
        self.steps += 1;
        for (role, grids, f) in &selected {
            self.record_usage(*role, grids);
            m.dead_resets += self.reset_dead_codes(*role, f, rng);
        }
        Ok(m)
    }

    fn record_usage(&mut self, role: Role, grids: &[Vec<TokenGrid>]) {
        let slot = role_slot(role);
        for g in grids.iter().flatten() {
            for &i in &g.indices {
                self.usage[slot][i] += 1;
                self.last_used[slot][i] = self.steps;
            }
        }
    }

    /// Re-initializes codewords unused for `dead_code_steps` steps to random
    /// encoder output cells. Returns the number of codes reset.
    fn reset_dead_codes<R: Rng>(&mut self, role: Role, f: &Tensor<F>, rng: &mut R) -> usize {
        let slot = role_slot(role);
        let limit = self.spec.dead_code_steps as u64;
        if limit == 0 || self.steps < limit {
            return 0;
        }
        let dead: Vec<usize> =
            (0..self.spec.codebook_size).filter(|&i| self.steps - self.last_used[slot][i] >= limit).collect();
        if dead.is_empty() {
            return 0;
        }
        let e = self.spec.embed_dim;
        let (n, _, h, w) = f.dims4();
        let plane = h * w;
        let steps = self.steps;
        let cb = self.params.get_mut(&format!("{}.codebook", net::prefix(role)));
        for &code in &dead {
            let s = rng.random_range(0..n);
            let p = rng.random_range(0..plane);
            for c in 0..e {
                cb.data_mut()[code * e + c] = f.data()[(s * e + c) * plane + p];
            }
        }
        for &code in &dead {
            self.last_used[slot][code] = steps;
        }
        dead.len()
    }

    /// Data-dependent codebook initialization: codewords are drawn from the
    /// encoder's latents downsampled to every scale of the role.
    pub fn init_codebooks<R: Rng>(&mut self, batch: &TokenizerBatch<F>, rng: &mut R) -> Result<()> {
        let mut tape = Tape::inference();
        let b = self.params.bind(&mut tape);
        let x = tape.constant(batch.observed.clone());
        let f_obs = self.encode_latent(&mut tape, &b, Role::Observed, x, None, rng)?;
        let f_obs = tape.value(f_obs).clone();
        let fut_latent = match &batch.future {
            Some(fut) => {
                let xf = tape.constant(fut.clone());
                let f = net::encode(&mut tape, &b, Role::Future, self.spec.groups, xf);
                Some(tape.value(f).clone())
            }
            None => None,
        };
        drop(tape);
        let sources = [(Role::Observed, Some(f_obs)), (Role::Future, fut_latent)];
        let mut fallback: Option<Vec<Vec<F>>> = None;
        for (role, lat) in sources {
            let pool = match lat {
                Some(l) => self.cell_pool(role, &l),
                None => match &fallback {
                    Some(p) => p.clone(),
                    None => continue,
                },
            };
            if fallback.is_none() {
                fallback = Some(pool.clone());
            }
            let e = self.spec.embed_dim;
            let v = self.spec.codebook_size;
            let cb = self.params.get_mut(&format!("{}.codebook", net::prefix(role)));
            for code in 0..v {
                let src = pool.choose(rng).expect("non-empty pool");
                for c in 0..e {
                    let jitter = F::lit(rng.random_range(-1e-3..1e-3));
                    cb.data_mut()[code * e + c] = src[c] + jitter;
                }
            }
        }
        Ok(())
    }

    fn cell_pool(&self, role: Role, f: &Tensor<F>) -> Vec<Vec<F>> {
        let (n, e, base, _) = f.dims4();
        let plane = base * base;
        let mut pool = Vec::new();
        for s in 0..n {
            let lat = &f.data()[s * e * plane..(s + 1) * e * plane];
            for &side in self.spec.schedule.scales(role) {
                let small = resize_planes(lat, e, &self.resampler(base, side));
                for cell in planes_to_cells(&small, e, side * side).chunks_exact(e) {
                    pool.push(cell.to_vec());
                }
            }
        }
        pool
    }

    /// Fraction of codes of `role` selected at least once.
    pub fn usage_fraction(&self, role: Role) -> f64 {
        let u = &self.usage[role_slot(role)];
        u.iter().filter(|&&c| c > 0).count() as f64 / u.len() as f64
    }

    pub fn reset_usage(&mut self) {
        for u in &mut self.usage {
            u.iter_mut().for_each(|c| *c = 0);
        }
    }

    /// Per-scale-prefix mean squared reconstruction error (pixel range `[-1, 1]`)
    /// of observed frames: entry `k` uses the first `k + 1` scales.
    pub fn prefix_errors(&self, frames: &Tensor<F>, role: Role, contexts: Option<&[Tensor<F>]>) -> Result<Vec<Vec<f64>>> {
        let maps = self.encode_multiscale(frames, role, contexts)?;
        let n = maps.len();
        let k = self.spec.schedule.scales(role).len();
        let per = frames.numel() / n;
        let mut out = vec![Vec::with_capacity(k); n];
        for upto in 1..=k {
            let prefix: Vec<MultiScaleTokenMap> = maps
                .iter()
                .map(|m| MultiScaleTokenMap { frame: m.frame, role, maps: m.maps[..upto].to_vec() })
                .collect();
            let rec = self.decode_multiscale(&prefix)?;
            for (s, row) in out.iter_mut().enumerate() {
                let a = &rec.data()[s * per..(s + 1) * per];
                let b = &frames.data()[s * per..(s + 1) * per];
                let mse = a.iter().zip(b).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum::<f64>() / per as f64;
                row.push(mse);
            }
        }
        Ok(out)
    }
}

/// `(E, P)` planes to `P x E` cell rows.
pub fn planes_to_cells<F: Float>(planes: &[F], e: usize, p: usize) -> Vec<F> {
    let mut out = vec![F::zero(); p * e];
    for c in 0..e {
        for i in 0..p {
            out[i * e + c] = planes[c * p + i];
        }
    }
    out
}

pub(crate) fn check_same_shapes<F: Float>(want: &ParamStore<F>, got: &ParamStore<F>) -> Result<()> {
    for (name, t) in want.iter() {
        if !got.contains(name) {
            return Err(Error::invalid(format!("missing parameter `{name}`")));
        }
        if got.get(name).shape() != t.shape() {
            return Err(Error::invalid(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                got.get(name).shape(),
                t.shape()
            )));
        }
    }
    if let Some(extra) = got.names().find(|n| !want.contains(n)) {
        return Err(Error::invalid(format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}

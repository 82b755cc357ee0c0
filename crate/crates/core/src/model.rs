//! Decoder-only transformer over the unified token stream, with a per-frame
//! reward head and an incremental key/value-cached inference path.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use swm_autograd::kernels::{self, HeadKv};
use swm_autograd::{AttnSpec, Bound, Float, ParamStore, Tape, Tensor, Var};

use crate::config::{ModelConfig, ScaleSchedule};
use crate::embed::{embed_blocks, StreamState};
use crate::error::{Error, Result};
use crate::layout::{Block, BlockKind, TokenStreamLayout, Vocab};
use crate::Role;

const LN_EPS: f64 = 1e-5;

pub struct WorldModel<F: Float> {
    pub cfg: ModelConfig,
    pub schedule: ScaleSchedule,
    pub vocab: Vocab,
    pub params: ParamStore<F>,
}

/// Full-sequence outputs.
#[derive(Clone, Debug)]
pub struct ForwardOutput<F> {
    /// `total x vocab` logits; entries outside each row's legal sub-vocabulary are `-inf`.
    pub logits: Tensor<F>,
    /// Final hidden state at the last position of every frame, `frames x width`.
    pub frame_hidden: Tensor<F>,
    pub rewards: Vec<F>,
}

/// Legal vocabulary window of a position's logits.
pub fn legal_range(vocab: &Vocab, blk: &Block) -> Range<usize> {
    match blk.kind {
        BlockKind::Start | BlockKind::Sep => vocab.specials(),
        BlockKind::Prompt(_) => vocab.range(Role::Observed),
        BlockKind::Scale(_) | BlockKind::Raster(_) => vocab.range(blk.role),
    }
}

fn normal<F: Float, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).expect("valid std");
    Tensor::new(shape, (0..n).map(|_| F::lit(d.sample(rng))).collect())
}

impl<F: Float> WorldModel<F> {
    pub fn new<R: Rng>(cfg: ModelConfig, schedule: ScaleSchedule, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        schedule.validate()?;
        if cfg.width % 4 != 0 {
            return Err(Error::config("model.width", "must be a multiple of 4 for the 2-D positional embedding"));
        }
        let vocab = Vocab::new(cfg.codebook_size);
        let w = cfg.width;
        let std = 0.02;
        let proj_std = 0.02 / (2.0 * cfg.depth as f64).sqrt();
        let mut p = ParamStore::new();
        p.insert("tok_emb", normal(&[vocab.size(), w], std, rng));
        p.insert("act_proj", normal(&[cfg.action_dim, w], std, rng));
        p.insert("seed_proj", normal(&[w, w], 1.0 / (w as f64).sqrt(), rng));
        for role in ["obs", "fut"] {
            p.insert(format!("lat_proj.{role}.w"), normal(&[cfg.embed_dim, w], 1.0 / (cfg.embed_dim as f64).sqrt(), rng));
            p.insert(format!("lat_proj.{role}.b"), Tensor::zeros(&[w]));
        }
        p.insert("scale_emb.prompt", normal(&[schedule.obs_scales.len(), w], std, rng));
        p.insert("scale_emb.obs", normal(&[schedule.obs_scales.len(), w], std, rng));
        p.insert("scale_emb.fut", normal(&[schedule.fut_scales.len(), w], std, rng));
        for i in 0..cfg.depth {
            let n = |s: &str| format!("blk{i}.{s}");
            for ln in ["ln1", "ln2"] {
                p.insert(n(&format!("{ln}.g")), Tensor::full(&[w], F::one()));
                p.insert(n(&format!("{ln}.b")), Tensor::zeros(&[w]));
            }
            for m in ["wq", "wk", "wv"] {
                p.insert(n(&format!("attn.{m}")), normal(&[w, w], std, rng));
                p.insert(n(&format!("attn.b{}", &m[1..])), Tensor::zeros(&[w]));
            }
            p.insert(n("attn.wo"), normal(&[w, w], proj_std, rng));
            p.insert(n("attn.bo"), Tensor::zeros(&[w]));
            p.insert(n("ffn.w1"), normal(&[w, cfg.ffn_dim], std, rng));
            p.insert(n("ffn.b1"), Tensor::zeros(&[cfg.ffn_dim]));
            p.insert(n("ffn.w2"), normal(&[cfg.ffn_dim, w], proj_std, rng));
            p.insert(n("ffn.b2"), Tensor::zeros(&[w]));
        }
        p.insert("ln_f.g", Tensor::full(&[w], F::one()));
        p.insert("ln_f.b", Tensor::zeros(&[w]));
        p.insert("head.w", normal(&[w, vocab.size()], std, rng));
        p.insert("head.b", Tensor::zeros(&[vocab.size()]));
        p.insert("reward.w", normal(&[w, 1], std, rng));
        p.insert("reward.b", Tensor::zeros(&[1]));
        Ok(Self { cfg, schedule, vocab, params: p })
    }

    pub fn from_params(cfg: ModelConfig, schedule: ScaleSchedule, params: ParamStore<F>) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let reference = WorldModel::<F>::new(cfg.clone(), schedule.clone(), &mut rng)?;
        crate::tokenizer::check_same_shapes(&reference.params, &params)?;
        Ok(Self { vocab: reference.vocab, cfg, schedule, params })
    }

    pub fn cast<G: Float>(&self) -> WorldModel<G> {
        WorldModel { cfg: self.cfg.clone(), schedule: self.schedule.clone(), vocab: self.vocab, params: self.params.cast() }
    }

    /// Residual stack on the tape. `x` holds rows for every layout position and
    /// `limits[i]` is the number of keys position `i` may attend to.
    /// Returns the final-normalized hidden states.
    pub fn transformer<R: Rng>(&self, tape: &mut Tape<F>, b: &Bound, x: Var, limits: &[usize], rng: &mut R) -> Var {
        let dr = if tape.grad_enabled() { self.cfg.dropout } else { 0.0 };
        let mut x = x;
        for i in 0..self.cfg.depth {
            let g = |s: &str| b.get(&format!("blk{i}.{s}"));
            let h = tape.layer_norm(x, g("ln1.g"), g("ln1.b"), LN_EPS);
            let q = tape.linear(h, g("attn.wq"), Some(g("attn.bq")));
            let k = tape.linear(h, g("attn.wk"), Some(g("attn.bk")));
            let v = tape.linear(h, g("attn.wv"), Some(g("attn.bv")));
            let a = tape.attention(q, k, v, &AttnSpec { heads: self.cfg.heads, limits, dropout: dr }, rng);
            let o = tape.linear(a, g("attn.wo"), Some(g("attn.bo")));
            x = tape.add(x, o);
            let h = tape.layer_norm(x, g("ln2.g"), g("ln2.b"), LN_EPS);
            let f = tape.linear(h, g("ffn.w1"), Some(g("ffn.b1")));
            let f = tape.gelu(f);
            let f = tape.dropout(f, dr, rng);
            let f = tape.linear(f, g("ffn.w2"), Some(g("ffn.b2")));
            x = tape.add(x, f);
        }
        tape.layer_norm(x, b.get("ln_f.g"), b.get("ln_f.b"), LN_EPS)
    }

    /// Embeds and runs a fully committed stream. Returns final hidden states.
    pub fn hidden<R: Rng>(&self, tape: &mut Tape<F>, b: &Bound, state: &StreamState<F>, rng: &mut R) -> Result<Var> {
        self.check_layout(&state.layout)?;
        if !state.is_complete() {
            return Err(Error::invalid("teacher-forced forward needs every block committed"));
        }
        let x = embed_blocks(tape, b, state, 0..state.layout.blocks.len())?;
        Ok(self.transformer(tape, b, x, &state.layout.key_limits(), rng))
    }

    fn check_layout(&self, layout: &TokenStreamLayout) -> Result<()> {
        if layout.schedule != self.schedule {
            return Err(Error::invalid("layout schedule differs from the model's schedule"));
        }
        Ok(())
    }

    /// Logits over the whole vocabulary with the legal-window mask applied.
    pub fn masked_logits(&self, tape: &mut Tape<F>, b: &Bound, hidden: Var, layout: &TokenStreamLayout) -> Var {
        let logits = tape.linear(hidden, b.get("head.w"), Some(b.get("head.b")));
        let vs = self.vocab.size();
        let mut mask = vec![F::neg_infinity(); layout.total * vs];
        for blk in &layout.blocks {
            let r = legal_range(&self.vocab, blk);
            for p in blk.positions() {
                mask[p * vs + r.start..p * vs + r.end].iter_mut().for_each(|v| *v = F::zero());
            }
        }
        let m = tape.constant(Tensor::new(&[layout.total, vs], mask));
        tape.add(logits, m)
    }

    /// Reward predictions `frames x 1` from the last position of each frame.
    pub fn rewards(&self, tape: &mut Tape<F>, b: &Bound, hidden: Var, layout: &TokenStreamLayout) -> Var {
        let rows: Vec<usize> = (1..=layout.frames).map(|t| layout.frame_last_position(t)).collect();
        let h = tape.gather_rows(hidden, &rows);
        self.predict_reward(tape, b, h)
    }

    /// Affine reward head on hidden states.
    pub fn predict_reward(&self, tape: &mut Tape<F>, b: &Bound, hidden: Var) -> Var {
        tape.linear(hidden, b.get("reward.w"), Some(b.get("reward.b")))
    }

    /// Teacher-forced evaluation without gradients.
    pub fn forward(&self, state: &StreamState<F>) -> Result<ForwardOutput<F>> {
        let mut tape = Tape::inference();
        let b = self.params.bind(&mut tape);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let h = self.hidden(&mut tape, &b, state, &mut rng)?;
        let logits = self.masked_logits(&mut tape, &b, h, &state.layout);
        let rows: Vec<usize> = (1..=state.layout.frames).map(|t| state.layout.frame_last_position(t)).collect();
        let fh = tape.gather_rows(h, &rows);
        let r = self.predict_reward(&mut tape, &b, fh);
        Ok(ForwardOutput {
            logits: tape.value(logits).clone(),
            frame_hidden: tape.value(fh).clone(),
            rewards: tape.value(r).data().to_vec(),
        })
    }

    /// Input rows of a block range, as plain values.
    pub fn embed_rows(&self, state: &StreamState<F>, blocks: Range<usize>) -> Result<Tensor<F>> {
        let mut tape = Tape::inference();
        let b = self.params.bind(&mut tape);
        let x = embed_blocks(&mut tape, &b, state, blocks)?;
        Ok(tape.value(x).clone())
    }

    pub fn new_cache(&self, capacity: usize) -> KvCache<F> {
        let w = self.cfg.width;
        KvCache {
            layers: (0..self.cfg.depth)
                .map(|_| LayerCache { kt: vec![F::zero(); w * capacity], v: vec![F::zero(); capacity * w] })
                .collect(),
            len: 0,
            capacity,
            width: w,
            heads: self.cfg.heads,
        }
    }

    /// Incremental forward over new rows of several independent sequences.
    ///
    /// `x` stacks the new input rows of every segment. Segment `s` appends
    /// `rows[s]` positions to `caches[s]`; each new position attends to the
    /// first `limits[s][i]` positions of its own sequence. Returns the final
    /// normalized hidden states of all new rows.
    pub fn infer_rows(&self, caches: &mut [&mut KvCache<F>], rows: &[usize], limits: &[&[usize]], x: &[F]) -> Result<Vec<F>> {
        let w = self.cfg.width;
        let n: usize = rows.iter().sum();
        if x.len() != n * w || caches.len() != rows.len() || limits.len() != rows.len() {
            return Err(Error::invalid("segment bookkeeping does not match the stacked rows"));
        }
        for (s, c) in caches.iter().enumerate() {
            if c.len + rows[s] > c.capacity {
                return Err(Error::invalid(format!("cache overflow: {} + {} > {}", c.len, rows[s], c.capacity)));
            }
            if limits[s].len() != rows[s] {
                return Err(Error::invalid("one key limit per new row required"));
            }
            if limits[s].iter().any(|&l| l < 1 || l > c.len + rows[s]) {
                return Err(Error::invalid("key limit beyond the committed cache"));
            }
        }
        let heads = self.cfg.heads;
        let hd = w / heads;
        let scale = F::one() / F::lit(hd as f64).sqrt();
        let p = |name: String| self.params.get(&name).data();
        let mut xs = x.to_vec();
        let mut h = vec![F::zero(); n * w];
        let mut q = vec![F::zero(); n * w];
        let mut k = vec![F::zero(); n * w];
        let mut v = vec![F::zero(); n * w];
        let mut a = vec![F::zero(); n * w];
        let mut o = vec![F::zero(); n * w];
        let mut f1 = vec![F::zero(); n * self.cfg.ffn_dim];
        let max_keys = caches.iter().map(|c| c.capacity).max().unwrap_or(0);
        let mut probs = vec![F::zero(); max_keys];
        let mut head_out = vec![F::zero(); hd];
        for layer in 0..self.cfg.depth {
            let g = |s: &str| p(format!("blk{layer}.{s}"));
            kernels::layer_norm_forward(&xs, w, g("ln1.g"), g("ln1.b"), F::lit(LN_EPS), &mut h);
            kernels::linear_forward(&h, n, w, g("attn.wq"), w, 0, w, Some(g("attn.bq")), &mut q);
            kernels::linear_forward(&h, n, w, g("attn.wk"), w, 0, w, Some(g("attn.bk")), &mut k);
            kernels::linear_forward(&h, n, w, g("attn.wv"), w, 0, w, Some(g("attn.bv")), &mut v);
            let mut row0 = 0;
            for (s, cache) in caches.iter_mut().enumerate() {
                let cap = cache.capacity;
                let base = cache.len;
                let lc = &mut cache.layers[layer];
                for r in 0..rows[s] {
                    let src = (row0 + r) * w;
                    for d in 0..w {
                        let (hh, dd) = (d / hd, d % hd);
                        lc.kt[(hh * hd + dd) * cap + base + r] = k[src + d];
                    }
                    lc.v[(base + r) * w..(base + r + 1) * w].copy_from_slice(&v[src..src + w]);
                }
                for hh in 0..heads {
                    let kv = HeadKv { kt: &lc.kt[hh * hd * cap..(hh + 1) * hd * cap], kt_stride: cap, v: &lc.v, v_stride: w, v_offset: hh * hd };
                    for r in 0..rows[s] {
                        let qi = (row0 + r) * w + hh * hd;
                        kernels::attend_one(&q[qi..qi + hd], kv, limits[s][r], scale, &mut probs, &mut head_out);
                        a[qi..qi + hd].copy_from_slice(&head_out);
                    }
                }
                row0 += rows[s];
            }
            kernels::linear_forward(&a, n, w, g("attn.wo"), w, 0, w, Some(g("attn.bo")), &mut o);
            for (xv, &ov) in xs.iter_mut().zip(&o) {
                *xv += ov;
            }
            kernels::layer_norm_forward(&xs, w, g("ln2.g"), g("ln2.b"), F::lit(LN_EPS), &mut h);
            let fd = self.cfg.ffn_dim;
            kernels::linear_forward(&h, n, w, g("ffn.w1"), fd, 0, fd, Some(g("ffn.b1")), &mut f1);
            f1.iter_mut().for_each(|z| *z = kernels::gelu(*z));
            kernels::linear_forward(&f1, n, fd, g("ffn.w2"), w, 0, w, Some(g("ffn.b2")), &mut o);
            for (xv, &ov) in xs.iter_mut().zip(&o) {
                *xv += ov;
            }
        }
        for (s, cache) in caches.iter_mut().enumerate() {
            cache.len += rows[s];
        }
        kernels::layer_norm_forward(&xs, w, p("ln_f.g".into()), p("ln_f.b".into()), F::lit(LN_EPS), &mut h);
        Ok(h)
    }

    /// Logits of hidden rows restricted to vocabulary columns `cols`.
    pub fn logits_window(&self, hidden: &[F], cols: Range<usize>) -> Vec<F> {
        let w = self.cfg.width;
        let n = hidden.len() / w;
        let mut out = vec![F::zero(); n * cols.len()];
        let vs = self.vocab.size();
        kernels::linear_forward(hidden, n, w, self.params.get("head.w").data(), vs, cols.start, cols.end, Some(self.params.get("head.b").data()), &mut out);
        out
    }

    pub fn reward_of(&self, hidden_row: &[F]) -> F {
        let mut out = [F::zero()];
        kernels::linear_forward(hidden_row, 1, self.cfg.width, self.params.get("reward.w").data(), 1, 0, 1, Some(self.params.get("reward.b").data()), &mut out);
        out[0]
    }
}


#[derive(Clone, Debug)]
struct LayerCache<F> {
    /// Keys transposed per head: `(heads * head_dim) x capacity`.
    kt: Vec<F>,
    /// Values: `capacity x width`.
    v: Vec<F>,
}

/// Per-layer keys and values of the positions committed so far.
#[derive(Clone, Debug)]
pub struct KvCache<F> {
    layers: Vec<LayerCache<F>>,
    pub len: usize,
    pub capacity: usize,
    width: usize,
    heads: usize,
}

impl<F: Float> KvCache<F> {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Drops every position from `len` on.
    pub fn truncate(&mut self, len: usize) {
        self.len = self.len.min(len);
    }
}

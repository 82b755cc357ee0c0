#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swm_core::autograd::{Float, Tape};
use swm_core::config::{Config, DataConfig, ModelConfig, ScaleSchedule, TokenizerConfig};
use std::path::Path;

use swm_core::checkpoint::{load_checkpoint, save_tokenizer, save_world_model};
use swm_core::data::sprites::generate_episode;
use swm_core::data::{preprocess_session, read_episode, write_episode, EpisodeMeta, EpisodeRecord, PreprocessConfig, Session};
use swm_core::image::Frame;
use swm_core::model::WorldModel;
use swm_core::motion::{filter_trajectories, TrajectorySet, DEFAULT_RATIO, DEFAULT_WINDOW};
use swm_core::embed::{embed_blocks, StreamState};
use swm_core::layout::{build_layout, BlockKind};
use swm_core::rollout::{rollout, sample_topk_topp, RolloutInput, RolloutOptions, RolloutOutput, SamplingConfig};
use swm_core::tokenizer::{MultiScaleTokenMap, Tokenizer, TokenizerSpec};
use swm_core::train::{example_loss, multiscale_ce_loss, prepare_example, tokenize_clip, TrainExample};
use swm_core::Role;

/// Tiny configuration: 16x16 frames, 4x4 latent grid, depth 2, width 32.
pub fn micro_config() -> Config {
    let mut cfg = Config::default();
    cfg.schedule = ScaleSchedule::new(vec![1, 2, 4], vec![1, 2], 4).unwrap();
    cfg.model = ModelConfig {
        depth: 2,
        width: 32,
        heads: 2,
        dropout: 0.1,
        ffn_dim: 64,
        action_dim: 2,
        codebook_size: 16,
        embed_dim: 8,
        tokenizer: TokenizerConfig { channels: [8, 8], groups: 4, beta: 0.25, cross_attn_heads: 2, dead_code_steps: 0 },
    };
    cfg.data = DataConfig { frame_size: 16, num_objects: 2, episodes: 4, episode_len: 8, step_size: 1, grid_size: 4 };
    cfg.run.context_frames = 1;
    cfg.run.sequence_length = 3;
    cfg.validate().unwrap();
    cfg
}

pub struct Micro<F: Float> {
    pub cfg: Config,
    pub tok: Tokenizer<F>,
    pub model: WorldModel<F>,
}

pub fn micro<F: Float>(seed: u64) -> Micro<F> {
    let cfg = micro_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tok = Tokenizer::new(TokenizerSpec::from_config(&cfg), &mut rng).unwrap();
    let model = WorldModel::new(cfg.model.clone(), cfg.schedule.clone(), &mut rng).unwrap();
    Micro { cfg, tok, model }
}

/// Sprites clips of the micro frame size.
pub fn micro_clip(cfg: &Config, seed: u64, len: usize) -> EpisodeRecord {
    let mut d = cfg.data.clone();
    d.episode_len = len;
    generate_episode(&d, seed, 0).unwrap()
}

/// Teacher-forced training example from a micro clip of `len` frames with one
/// context frame.
pub fn micro_example(m: &Micro<f64>, clip_seed: u64, len: usize) -> TrainExample<f64> {
    let clip = micro_clip(&m.cfg, clip_seed, len);
    prepare_example(&m.model, &m.tok, &clip, 1, None).unwrap()
}

fn total_loss(model: &WorldModel<f64>, ex: &TrainExample<f64>, reward_weight: f64, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = example_loss(&mut tape, &b, model, ex, Some(reward_weight), &mut rng).unwrap();
    tape.value(l.total).item()
}

/// Largest relative error between tape gradients and central differences of
/// the training loss over `samples` randomly chosen transformer scalars. The
/// dropout stream is re-seeded for every evaluation so all evaluations share
/// one mask.
pub fn transformer_grad_check(seed: u64, samples: usize) -> f64 {
    let m = micro::<f64>(seed);
    let ex = micro_example(&m, seed + 100, 3);
    let rw = m.cfg.run.reward_weight.max(1.0);
    let drop_seed = seed + 7;
    let mut tape = Tape::new();
    let b = m.model.params.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(drop_seed);
    let l = example_loss(&mut tape, &b, &m.model, &ex, Some(rw), &mut rng).unwrap();
    let mut g = tape.backward(l.total);
    let grads = m.model.params.gradients(&b, &mut g);
    let names: Vec<(String, usize)> = m.model.params.iter().map(|(n, t)| (n.to_string(), t.numel())).collect();
    let total: usize = names.iter().map(|(_, n)| n).sum();
    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut model = m.model.cast::<f64>();
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let mut k = pick.random_range(0..total);
        let (name, i) = names
            .iter()
            .find_map(|(n, c)| if k < *c { Some((n.clone(), k)) } else { k -= c; None })
            .unwrap();
        let analytic = grads.get(&name).map_or(0.0, |t| t.data()[i]);
        let orig = model.params.get(&name).data()[i];
        model.params.get_mut(&name).data_mut()[i] = orig + eps;
        let up = total_loss(&model, &ex, rw, drop_seed);
        model.params.get_mut(&name).data_mut()[i] = orig - eps;
        let down = total_loss(&model, &ex, rw, drop_seed);
        model.params.get_mut(&name).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

/// Gradient of the full-vocabulary multi-scale loss with respect to the logits.
/// Returns the largest magnitude on positions outside the future scale blocks
/// and the number of future rows that carry a nonzero gradient.
pub fn ce_mask_gradient(seed: u64, with_prompt: bool) -> (f64, usize, usize) {
    let m = micro::<f64>(seed);
    let clip = micro_clip(&m.cfg, seed + 1, 3);
    let prompt = with_prompt.then(|| clip.frames[0].clone());
    let ex = prepare_example(&m.model, &m.tok, &clip, 1, prompt.as_ref()).unwrap();
    let layout = &ex.state.layout;
    let mut tape = Tape::new();
    let b = m.model.params.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = m.model.hidden(&mut tape, &b, &ex.state, &mut rng).unwrap();
    let logits = m.model.masked_logits(&mut tape, &b, h, layout);
    let loss = multiscale_ce_loss(&mut tape, logits, &ex.state.ids, layout).unwrap();
    let g = tape.backward_retain(loss);
    let gl = g.get(logits).unwrap();
    let vs = m.model.vocab.size();
    let mut off_max: f64 = 0.0;
    let mut live = 0;
    let mut future_rows = 0;
    for blk in &layout.blocks {
        let future = blk.role == Role::Future && blk.is_code();
        for p in blk.positions() {
            let row = &gl.data()[p * vs..(p + 1) * vs];
            if future {
                future_rows += 1;
                live += row.iter().any(|v| *v != 0.0) as usize;
            } else {
                off_max = row.iter().fold(off_max, |a, v| a.max(v.abs()));
            }
        }
    }
    (off_max, live, future_rows)
}

/// Empirical frequencies of `draws` sampler draws on `logits`.
pub fn sampler_frequencies(logits: &[f64], k: usize, p: f64, temperature: f64, draws: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; logits.len()];
    for _ in 0..draws {
        counts[sample_topk_topp(logits, k, p, temperature, &mut rng).unwrap()] += 1;
    }
    counts.iter().map(|&c| c as f64 / draws as f64).collect()
}

/// Largest deviation from the target categorical over the three-way checks:
/// plain sampling, top-2 truncation and a 0.7 nucleus.
pub fn sampler_max_deviation(draws: usize, seed: u64) -> f64 {
    let target = [0.5, 0.3, 0.2];
    let logits: Vec<f64> = target.iter().map(|p: &f64| p.ln()).collect();
    let cases: [(usize, f64, [f64; 3]); 3] =
        [(3, 1.0, [0.5, 0.3, 0.2]), (2, 1.0, [0.625, 0.375, 0.0]), (3, 0.7, [0.625, 0.375, 0.0])];
    let mut worst: f64 = 0.0;
    for (i, (k, p, want)) in cases.iter().enumerate() {
        let got = sampler_frequencies(&logits, *k, *p, 1.0, draws, seed + i as u64);
        for (g, w) in got.iter().zip(want) {
            worst = worst.max((g - w).abs());
        }
    }
    worst
}

/// Random session: segment ids arrive in runs and ids may recur later.
pub fn random_session(rng: &mut ChaCha8Rng) -> Session {
    let mut ids = Vec::new();
    let target = rng.random_range(1..400);
    while ids.len() < target {
        let id = rng.random_range(0..5u32);
        let run = rng.random_range(1..130);
        ids.extend(std::iter::repeat_n(id, run));
    }
    ids.truncate(target);
    let n = ids.len();
    let ad = rng.random_range(1..4);
    Session {
        frames: (0..n).map(|_| Frame::new(2, 2, (0..12).map(|_| rng.random()).collect()).unwrap()).collect(),
        actions: (0..n * ad).map(|_| rng.random::<f32>()).collect(),
        action_dim: ad,
        rewards: (0..n).map(|_| rng.random::<f32>()).collect(),
        segment_ids: ids,
        meta: EpisodeMeta { env: "synthetic".into(), seed: rng.random(), step_size: 1 },
    }
}

/// Straight transcription of the preprocessing pseudo-code, built for clarity.
pub fn reference_preprocess(s: &Session, fps: usize) -> Vec<EpisodeRecord> {
    let (t_min, t_clip, min_clip) = (51, 30, 15);
    let df = 30 / fps;
    let ad = s.action_dim;
    let mut frames = Vec::new();
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut seg = Vec::new();
    for i in 0..s.len() {
        if i % df == 0 {
            frames.push(s.frames[i].clone());
            actions.push(s.actions[i * ad..(i + 1) * ad].to_vec());
            rewards.push(s.rewards[i]);
            seg.push(s.segment_ids[i]);
        }
    }
    let mut unique: Vec<u32> = Vec::new();
    for id in &seg {
        if !unique.contains(id) {
            unique.push(*id);
        }
    }
    let mut out = Vec::new();
    for id in unique {
        let hits: Vec<usize> = (0..seg.len()).filter(|&i| seg[i] == id).collect();
        let (start, end) = (hits[0], hits[hits.len() - 1] + 1);
        if end - start < t_min {
            continue;
        }
        let mut w = 0;
        while start + w < end {
            let stop = (start + w + t_clip).min(end);
            let len = stop - (start + w);
            if len >= min_clip {
                let r = start + w..stop;
                out.push(
                    EpisodeRecord::new(
                        frames[r.clone()].to_vec(),
                        actions[r.clone()].concat(),
                        ad,
                        rewards[r].to_vec(),
                        None,
                        EpisodeMeta { step_size: df, ..s.meta.clone() },
                    )
                    .unwrap(),
                );
            }
            w += t_clip;
        }
    }
    out
}

/// Sessions on which the library disagrees with the reference, and the total
/// number of records compared.
pub fn preprocess_oracle(sessions: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    let mut records = 0;
    for _ in 0..sessions {
        let s = random_session(&mut rng);
        let fps = [30, 15, 10, 7, 5][rng.random_range(0..5)];
        let cfg = PreprocessConfig { target_fps: fps, ..Default::default() };
        let got = preprocess_session(&s, &cfg).unwrap();
        let want = reference_preprocess(&s, fps);
        records += want.len();
        bad += (got != want) as usize;
    }
    (bad, records)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Write, read back and write again; both copies must agree byte for byte and
/// the read value must equal the original.
pub fn episode_roundtrip(rec: &EpisodeRecord, root: &Path) -> bool {
    let (a, b) = (root.join("a"), root.join("b"));
    write_episode(rec, &a).unwrap();
    let back = read_episode(&a).unwrap();
    write_episode(&back, &b).unwrap();
    back == *rec && dir_bytes(&a) == dir_bytes(&b)
}

pub fn checkpoint_roundtrip(m: &Micro<f32>, root: &Path) -> bool {
    let (a, b) = (root.join("wm_a"), root.join("wm_b"));
    save_world_model(&a, &m.model, 17, &m.cfg).unwrap();
    let ck = load_checkpoint(&a).unwrap();
    let model: WorldModel<f32> = ck.world_model().unwrap();
    save_world_model(&b, &model, ck.step, &ck.config).unwrap();
    let (ta, tb) = (root.join("tok_a"), root.join("tok_b"));
    save_tokenizer(&ta, &m.tok, &m.cfg).unwrap();
    let tok: Tokenizer<f32> = load_checkpoint(&ta).unwrap().tokenizer().unwrap();
    save_tokenizer(&tb, &tok, &m.cfg).unwrap();
    ck.step == 17 && ck.config == m.cfg && dir_bytes(&a) == dir_bytes(&b) && dir_bytes(&ta) == dir_bytes(&tb)
}

/// Error messages produced by a set of corruptions of a written episode.
pub fn corruption_errors(rec: &EpisodeRecord, root: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut case = |name: &str, damage: &dyn Fn(&Path)| {
        let d = root.join(name);
        write_episode(rec, &d).unwrap();
        damage(&d);
        let msg = match read_episode(&d) {
            Ok(_) => String::new(),
            Err(e) => e.to_string(),
        };
        out.push((name.to_string(), msg));
    };
    case("missing_rewards", &|d| std::fs::remove_file(d.join("rewards.bin")).unwrap());
    case("truncated_frames", &|d| {
        let p = d.join("frames.bin");
        let b = std::fs::read(&p).unwrap();
        std::fs::write(&p, &b[..b.len() - 1]).unwrap();
    });
    case("bad_json", &|d| std::fs::write(d.join("manifest.json"), "{ not json").unwrap());
    case("dropped_stream", &|d| {
        let p = d.join("manifest.json");
        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        let streams = v["streams"].as_array_mut().unwrap();
        streams.retain(|s| s["name"] != "actions");
        std::fs::write(&p, v.to_string()).unwrap();
    });
    case("wrong_format", &|d| {
        let p = d.join("manifest.json");
        let text = std::fs::read_to_string(&p).unwrap().replace("swm-episode", "other");
        std::fs::write(&p, text).unwrap();
    });
    case("missing_manifest", &|d| std::fs::remove_file(d.join("manifest.json")).unwrap());
    out
}

/// Track set on a 64x64 frame from per-track position functions of time.
pub fn tracks(t: usize, paths: &[(&dyn Fn(usize) -> (f32, f32), f32)]) -> TrajectorySet {
    let mut points = Vec::new();
    let mut conf = Vec::new();
    for (f, c) in paths {
        for k in 0..t {
            let (x, y) = f(k);
            points.extend([x, y]);
            conf.push(*c);
        }
    }
    TrajectorySet::new(t, 64, 64, 0, points, conf).unwrap()
}

/// The four named filter cases: which tracks survive at the default window,
/// ratio and confidence threshold, in the order static, slow, unsure, jumper.
pub fn filter_cases() -> Vec<bool> {
    let set = tracks(
        12,
        &[
            (&|_| (20.0, 20.0), 1.0),
            (&|k| (10.0 + 0.25 * k as f32, 30.0), 1.0),
            (&|k| (2.0 + 4.0 * k as f32, 40.0), 0.3),
            (&|k| if k < 6 { (30.0, 10.0) } else { (40.0, 10.0) }, 0.9),
        ],
    );
    let kept = filter_trajectories(&set, 0.5, DEFAULT_WINDOW, DEFAULT_RATIO).unwrap();
    (0..set.n)
        .map(|i| (0..kept.n).any(|j| kept.points[j * 24..(j + 1) * 24] == set.points[i * 24..(i + 1) * 24]))
        .collect()
}

/// Random track set for property checks.
pub fn random_tracks(rng: &mut ChaCha8Rng, n: usize, t: usize) -> TrajectorySet {
    let mut points = Vec::new();
    for _ in 0..n {
        let speed = rng.random_range(0.0..3.0f32);
        let (mut x, mut y) = (rng.random_range(0.0..64.0f32), rng.random_range(0.0..64.0f32));
        for _ in 0..t {
            points.extend([x, y]);
            x += speed * rng.random_range(-1.0..1.0f32);
            y += speed * rng.random_range(-1.0..1.0f32);
        }
    }
    let confidence = (0..n * t).map(|_| rng.random_range(0.0..=1.0f32)).collect();
    TrajectorySet::new(t, 64, 64, 0, points, confidence).unwrap()
}

/// Whether raising either threshold ever enlarged the kept set over `trials`
/// random track sets.
pub fn filter_is_monotone(trials: usize, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let set = random_tracks(&mut rng, 30, 10);
        let (c1, c2) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let (r1, r2) = (rng.random_range(0.001..0.1), rng.random_range(0.001..0.1));
        let (clo, chi) = if c1 < c2 { (c1, c2) } else { (c2, c1) };
        let (rlo, rhi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
        let base = filter_trajectories(&set, clo, 4, rlo).unwrap().n;
        let tighter = [(chi, rlo), (clo, rhi), (chi, rhi)];
        if tighter.iter().any(|&(c, r)| filter_trajectories(&set, c, 4, r).unwrap().n > base) {
            return false;
        }
    }
    true
}

/// Teacher-forced micro stream over `maps` with fixed actions.
pub fn micro_stream(m: &Micro<f64>, maps: &[MultiScaleTokenMap], prompt: Option<&MultiScaleTokenMap>) -> StreamState<f64> {
    let layout = build_layout(&m.model.schedule, maps.len(), 1, prompt.is_some()).unwrap();
    let acts = vec![vec![0.3, -0.2]; maps.len()];
    StreamState::teacher_forced(layout, m.model.vocab, m.model.cfg.width, &m.tok, prompt, maps, &acts).unwrap()
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Perturbs every scale block of a 3-frame micro clip in turn, with and
/// without the prompt branch. Returns the number of perturbations that moved
/// any logit at or before the perturbed block, the number that failed to move
/// later logits although a finer scale of the same frame follows, and the
/// number of perturbations tried.
pub fn causality_violations(seed: u64) -> (usize, usize, usize) {
    let m = micro::<f64>(seed);
    let clip = micro_clip(&m.cfg, seed + 1, 3);
    let maps = tokenize_clip(&m.tok, &clip.frames, 1).unwrap();
    let prompt = maps[0].clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let vs = m.model.vocab.size();
    let (mut earlier, mut later, mut tried) = (0, 0, 0);
    for p in [None, Some(&prompt)] {
        let base = micro_stream(&m, &maps, p);
        let ref_logits = m.model.forward(&base).unwrap().logits;
        let blocks = base.layout.blocks.clone();
        for (bi, blk) in blocks.iter().enumerate() {
            let BlockKind::Scale(l) = blk.kind else { continue };
            let frame = blk.frame;
            let mut pert = maps.clone();
            for i in pert[frame - 1].maps[l].indices.iter_mut() {
                *i = (*i + rng.random_range(1..16)) % 16;
            }
            let logits = m.model.forward(&micro_stream(&m, &pert, p)).unwrap().logits;
            let cut = blk.end() * vs;
            tried += 1;
            earlier += (bits(&ref_logits.data()[..cut]) != bits(&logits.data()[..cut])) as usize;
            let refined = blocks.get(bi + 1).is_some_and(|n| n.frame == frame && matches!(n.kind, BlockKind::Scale(_)));
            later += (refined && bits(&ref_logits.data()[cut..]) == bits(&logits.data()[cut..])) as usize;
        }
    }
    (earlier, later, tried)
}

/// Prefixes of whole blocks whose hidden states differ from the full pass.
pub fn prefix_violations(seed: u64) -> (usize, usize) {
    let m = micro::<f64>(seed);
    let clip = micro_clip(&m.cfg, seed + 1, 3);
    let maps = tokenize_clip(&m.tok, &clip.frames, 1).unwrap();
    let s = micro_stream(&m, &maps, Some(&maps[0]));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::inference();
    let b = m.model.params.bind(&mut tape);
    let full = m.model.hidden(&mut tape, &b, &s, &mut rng).unwrap();
    let full = tape.value(full).data().to_vec();
    let w = m.model.cfg.width;
    let limits = s.layout.key_limits();
    let mut bad = 0;
    for k in 1..=s.layout.blocks.len() {
        let mut t = Tape::inference();
        let bb = m.model.params.bind(&mut t);
        let x = embed_blocks(&mut t, &bb, &s, 0..k).unwrap();
        let end = s.layout.blocks[k - 1].end();
        let h = m.model.transformer(&mut t, &bb, x, &limits[..end], &mut rng);
        bad += (bits(t.value(h).data()) != bits(&full[..end * w])) as usize;
    }
    (bad, s.layout.blocks.len())
}

/// Micro rollout of two future frames from the first frame of `clip`.
pub fn micro_rollout(m: &Micro<f64>, clip: &EpisodeRecord, sampling: SamplingConfig, cache: bool, seed: u64) -> RolloutOutput {
    let acts = clip.actions_f64();
    let input = RolloutInput { context: &clip.frames[..1], actions: &acts, horizon: 3, prompt: None };
    rollout(&m.model, &m.tok, &input, &RolloutOptions { sampling, use_cache: cache, seed }).unwrap()
}

/// Seeds among `seeds` whose cached and uncached rollouts disagree, under
/// greedy decoding and under top-k/top-p sampling.
pub fn cache_mismatches(seeds: std::ops::Range<u64>) -> usize {
    let m = micro::<f64>(14);
    let clip = micro_clip(&m.cfg, 8, 3);
    let sampled = SamplingConfig { top_k: 8, top_p: 0.9, temperature: 1.3, greedy: false };
    let mut bad = 0;
    for seed in seeds {
        for s in [SamplingConfig::greedy(), sampled] {
            let a = micro_rollout(&m, &clip, s, true, seed);
            let b = micro_rollout(&m, &clip, s, false, seed);
            bad += (a.tokens != b.tokens || a.frames != b.frames || bits(&a.rewards) != bits(&b.rewards)) as usize;
        }
    }
    bad
}

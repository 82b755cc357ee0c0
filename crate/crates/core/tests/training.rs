mod common;

use common::{checkpoint_roundtrip, micro, micro_clip, micro_example};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swm_core::autograd::{clip_grad_norm, global_norm, Tape};
use std::collections::BTreeSet;
use swm_core::train::{
    batch_gradients, evaluate_examples, example_loss, fit_tokenizer, fit_world_model, prepare_example, ExampleSampler, MetricsLog,
    StepMetrics, METRICS_HEADER,
};
use swm_core::Role;

#[test]
fn total_loss_is_linear_in_the_reward_weight() {
    let m = micro::<f64>(21);
    let ex = micro_example(&m, 3, 3);
    let eval = |w: f64| {
        let mut tape = Tape::new();
        let b = m.model.params.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = example_loss(&mut tape, &b, &m.model, &ex, Some(w), &mut rng).unwrap();
        (tape.value(l.total).item(), tape.value(l.ce).item(), tape.value(l.reward.unwrap()).item())
    };
    let (t1, ce1, r1) = eval(0.1);
    let (t2, ce2, r2) = eval(0.2);
    assert_eq!((ce1, r1), (ce2, r2));
    assert!(r1 > 0.0);
    assert!((t1 - (ce1 + 0.1 * r1)).abs() <= 1e-12 * t1.abs());
    assert!((t2 - (ce2 + 0.2 * r2)).abs() <= 1e-12 * t2.abs());
    let (t0, ..) = eval(0.0);
    assert_eq!(t0, ce1);
}

#[test]
fn clipped_gradients_respect_the_bound() {
    let m = micro::<f64>(22);
    let batch = vec![micro_example(&m, 4, 3), micro_example(&m, 5, 3)];
    let mut run = m.cfg.run.clone();
    for clip in [1e-3, 0.05, 1.0] {
        run.grad_clip = clip;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut g, _) = batch_gradients(&m.model, &batch, &run, &mut rng).unwrap();
        let before = clip_grad_norm(&mut g, clip);
        assert!(before > clip, "pre-clip norm {before} below {clip}");
        assert!(global_norm(&g) <= clip * (1.0 + 1e-6));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut g, _) = batch_gradients(&m.model, &batch, &run, &mut rng).unwrap();
    let raw = global_norm(&g);
    let reported = clip_grad_norm(&mut g, raw * 2.0);
    assert_eq!(reported, raw);
    assert_eq!(global_norm(&g), raw);
}

fn short_run(seed: u64, steps: usize) -> (Vec<StepMetrics>, Vec<f32>) {
    let mut m = micro::<f32>(23);
    let clips = vec![micro_clip(&m.cfg, 1, 5), micro_clip(&m.cfg, 2, 5)];
    let mut run = m.cfg.run.clone();
    run.batch_size = 2;
    run.warmup_steps = 5;
    run.peak_lr = 3e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::new();
    fit_world_model(&mut m.model, &m.tok, &clips, &run, 1, steps, &mut rng, |_, s| {
        log.push(StepMetrics { tokens_per_s: 0.0, ..s.clone() });
        Ok(false)
    })
    .unwrap();
    let params = m.model.params.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    (log, params)
}

#[test]
fn same_seed_gives_identical_training() {
    let (la, pa) = short_run(7, 30);
    let (lb, pb) = short_run(7, 30);
    assert_eq!(la.len(), 30);
    assert_eq!(la, lb);
    assert_eq!(pa.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), pb.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    let (lc, _) = short_run(8, 30);
    assert_ne!(la, lc);
}

#[test]
fn micro_model_overfits_two_episodes() {
    let mut m = micro::<f32>(24);
    let clips = vec![micro_clip(&m.cfg, 31, 3), micro_clip(&m.cfg, 32, 3)];
    let mut run = m.cfg.run.clone();
    run.batch_size = 2;
    run.warmup_steps = 20;
    run.peak_lr = 3e-3;
    run.total_steps = 2000;
    run.min_lr_ratio = 0.1;
    run.use_motion_prompt = false;
    run.tokenizer_batch = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    fit_tokenizer(&mut m.tok, &clips, &run, 40, &mut rng, |_| Ok(false)).unwrap();
    let examples: Vec<_> = clips.iter().map(|c| prepare_example(&m.model, &m.tok, c, 1, None).unwrap()).collect();
    let future = m.model.vocab.range(Role::Future);
    let codes: BTreeSet<usize> = examples.iter().flat_map(|e| e.state.ids.iter().copied()).filter(|i| future.contains(i)).collect();
    assert!(codes.len() >= 4, "only {} distinct future codes", codes.len());
    let start = evaluate_examples(&m.model, &examples).unwrap();
    let mut steps = 0;
    let mut eval = start.clone();
    fit_world_model(&mut m.model, &m.tok, &clips, &run, 1, 2000, &mut rng, |model, _| {
        steps += 1;
        if steps % 10 != 0 {
            return Ok(false);
        }
        eval = evaluate_examples(model, &examples)?;
        Ok(eval.ce_per_token < 0.1)
    })
    .unwrap();
    assert!(start.ce_per_token > 1.0);
    assert!(eval.ce_per_token < 0.1, "CE {} nats/token after {steps} steps (start {})", eval.ce_per_token, start.ce_per_token);
}

#[test]
fn metrics_log_writes_one_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    let row = StepMetrics { step: 3, ce_loss: 1.5, reward_loss: 0.25, lr: 1e-4, grad_norm: 2.0, ..Default::default() };
    MetricsLog::open(&path).unwrap().append(&row).unwrap();
    MetricsLog::open(&path).unwrap().append(&StepMetrics { step: 4, ..row }).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], METRICS_HEADER);
    assert!(lines[1].starts_with("3,1.500000,0.250000,"));
    assert!(lines[2].starts_with("4,"));
    assert_eq!(lines[1].split(',').count(), METRICS_HEADER.split(',').count());
}

#[test]
fn sampler_reuses_prepared_examples() {
    let m = micro::<f64>(25);
    let clips = vec![micro_clip(&m.cfg, 40, 3)];
    let mut run = m.cfg.run.clone();
    run.use_motion_prompt = false;
    run.batch_size = 4;
    let mut s = ExampleSampler::new(&clips, &run, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = s.batch(&m.model, &m.tok, &mut rng).unwrap();
    assert_eq!(batch.len(), 4);
    assert_eq!(s.cached(), 1);
    assert!(batch.iter().all(|e| e.state.ids == batch[0].state.ids));
    let short = vec![micro_clip(&m.cfg, 40, 2)];
    assert!(ExampleSampler::<f64>::new(&short, &run, 1).is_err());
    assert!(ExampleSampler::<f64>::new(&clips, &run, 2).is_err());
}

#[test]
fn prompted_examples_carry_the_prompt_branch() {
    let m = micro::<f64>(26);
    let clips = vec![micro_clip(&m.cfg, 41, 3)];
    let mut run = m.cfg.run.clone();
    run.use_motion_prompt = true;
    run.prompt_dropout = 0.0;
    let mut s = ExampleSampler::new(&clips, &run, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ex = s.example(&m.model, &m.tok, 0, 0, &mut rng).unwrap();
    assert!(ex.state.layout.blocks[0].frame == 0);
    assert_eq!(ex.state.ids[0], m.model.vocab.start());
    run.prompt_dropout = 1.0;
    let mut s = ExampleSampler::new(&clips, &run, 1).unwrap();
    let ex = s.example(&m.model, &m.tok, 0, 0, &mut rng).unwrap();
    assert!(ex.state.layout.blocks.iter().all(|b| b.frame > 0));
}

#[test]
fn tokenizer_fit_initialises_and_counts_steps() {
    let mut m = micro::<f32>(27);
    let clips = vec![micro_clip(&m.cfg, 50, 4)];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut losses = Vec::new();
    fit_tokenizer(&mut m.tok, &clips, &m.cfg.run, 5, &mut rng, |s| {
        losses.push(s.loss);
        Ok(losses.len() == 3)
    })
    .unwrap();
    assert_eq!(losses.len(), 3);
    assert_eq!(m.tok.steps, 3);
    assert!(losses.iter().all(|l| l.is_finite()));
}

#[test]
fn checkpoints_round_trip_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    assert!(checkpoint_roundtrip(&micro::<f32>(28), dir.path()));
}

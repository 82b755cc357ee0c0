mod common;

use std::collections::BTreeSet;

use common::{micro, micro_clip, micro_config};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swm_core::autograd::{Tape, Tensor};
use swm_core::image::frames_to_tensor;
use swm_core::tokenizer::{quantize, MultiScaleTokenMap, TokenGrid, Tokenizer, TokenizerSpec};
use swm_core::train::tokenize_clip;
use swm_core::Role;

#[test]
fn quantize_examples() {
    let cb = [1.0f64, 0.0, 0.0, 1.0];
    assert_eq!(quantize(&[0.9, 0.1], &cb).unwrap().0, 0);
    assert_eq!(quantize(&[0.5, 0.5], &cb).unwrap().0, 0);
    let four = [0.0f64, 0.0, 1.0, 1.0, -1.0, 2.0, 3.0, -4.0];
    assert_eq!(quantize(&[3.0, -4.0], &four).unwrap(), (3, 0.0));
    assert!(quantize(&[f64::INFINITY, 0.0], &four).is_err());
}

proptest! {
    #[test]
    fn quantize_is_permutation_equivariant(rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..10), v in prop::collection::vec(-3.0f64..3.0, 3), rot in 0usize..10) {
        let n = rows.len();
        let cb: Vec<f64> = rows.concat();
        let (i, d) = quantize(&v, &cb).unwrap();
        let perm: Vec<usize> = (0..n).map(|k| (k + rot) % n).collect();
        let pcb: Vec<f64> = perm.iter().flat_map(|&k| rows[k].clone()).collect();
        let (j, dj) = quantize(&v, &pcb).unwrap();
        prop_assert_eq!(d, dj);
        // with distinct distances the selected row is the same codeword
        let ties = rows.iter().filter(|r| quantize(&v, r).unwrap().1 == d).count();
        if ties == 1 {
            prop_assert_eq!(perm[j], i);
        }
        prop_assert_eq!(quantize(&rows[i], &cb).unwrap().1, 0.0);
    }
}

#[test]
fn emitted_scales_follow_the_role() {
    let m = micro::<f64>(1);
    let clip = micro_clip(&m.cfg, 2, 3);
    let maps = tokenize_clip(&m.tok, &clip.frames, 1).unwrap();
    assert_eq!(maps[0].role, Role::Observed);
    assert_eq!(maps[0].sides(), vec![1, 2, 4]);
    for f in &maps[1..] {
        assert_eq!(f.role, Role::Future);
        assert_eq!(f.sides(), vec![1, 2]);
    }
    assert!(maps.iter().flat_map(|f| f.maps.iter()).flat_map(|g| g.indices.iter()).all(|&i| i < 16));
}

#[test]
fn degenerate_single_scale_schedule() {
    let mut cfg = micro_config();
    cfg.schedule.fut_scales = vec![1];
    cfg.validate().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tok = Tokenizer::<f64>::new(TokenizerSpec::from_config(&cfg), &mut rng).unwrap();
    let clip = micro_clip(&cfg, 1, 2);
    let maps = tokenize_clip(&tok, &clip.frames, 1).unwrap();
    assert_eq!(maps[1].maps.len(), 1);
    assert_eq!(maps[1].maps[0].side, 1);
    assert_eq!(maps[1].num_tokens(), 1);
}

/// Tokenizer whose codebook row 0 is zero and row 5 is `c`.
fn hand_codebook(c: &[f64]) -> Tokenizer<f64> {
    let m = micro::<f64>(3);
    let mut tok = m.tok;
    let e = tok.spec.embed_dim;
    for role in [Role::Observed, Role::Future] {
        let name = format!("{}.codebook", if role == Role::Observed { "obs" } else { "fut" });
        let cb = tok.params.get_mut(&name).data_mut();
        cb[..e].iter_mut().for_each(|v| *v = 0.0);
        cb[5 * e..6 * e].copy_from_slice(c);
    }
    tok
}

#[test]
fn constant_codeword_field_is_captured_by_the_first_scale() {
    let c: Vec<f64> = (0..8).map(|i| 0.3 * i as f64 - 1.0).collect();
    let tok = hand_codebook(&c);
    let base = 4;
    let mut f = vec![0.0; 8 * base * base];
    for ch in 0..8 {
        f[ch * 16..(ch + 1) * 16].iter_mut().for_each(|v| *v = c[ch]);
    }
    let grids = tok.residual_quantize(Role::Observed, &Tensor::new(&[1, 8, base, base], f.clone())).unwrap().remove(0);
    assert_eq!(grids[0].indices, vec![5]);
    assert!(grids[1..].iter().all(|g| g.indices.iter().all(|&i| i == 0)));
    let map = MultiScaleTokenMap { frame: 1, role: Role::Observed, maps: grids };
    let lat = tok.latent_from_tokens(&map).unwrap();
    let err = lat.iter().zip(&f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn roles_use_separate_codebooks() {
    let m = micro::<f64>(4);
    let g = TokenGrid { side: 1, indices: vec![3] };
    let obs = MultiScaleTokenMap { frame: 1, role: Role::Observed, maps: vec![g.clone()] };
    let fut = MultiScaleTokenMap { frame: 2, role: Role::Future, maps: vec![g] };
    assert_ne!(m.tok.latent_from_tokens(&obs).unwrap(), m.tok.latent_from_tokens(&fut).unwrap());
    assert_ne!(m.tok.codebook(Role::Observed).data(), m.tok.codebook(Role::Future).data());
}

#[test]
fn decoding_rejects_bad_maps() {
    let m = micro::<f64>(5);
    let empty = MultiScaleTokenMap { frame: 1, role: Role::Observed, maps: vec![] };
    assert!(m.tok.decode_multiscale(&[empty]).is_err());
    assert!(m.tok.decode_multiscale(&[]).is_err());
    let bad = MultiScaleTokenMap { frame: 1, role: Role::Observed, maps: vec![TokenGrid { side: 1, indices: vec![16] }] };
    assert!(m.tok.decode_multiscale(&[bad]).is_err());
    let skipped = MultiScaleTokenMap { frame: 1, role: Role::Observed, maps: vec![TokenGrid { side: 2, indices: vec![0; 4] }] };
    assert!(m.tok.decode_multiscale(&[skipped]).is_err());
    let clip = micro_clip(&m.cfg, 1, 2);
    let x = frames_to_tensor(&[&clip.frames[1]]).unwrap();
    assert!(m.tok.encode_multiscale(&x, Role::Future, None).is_err());
}

#[test]
fn partial_decode_accepts_every_prefix() {
    let m = micro::<f64>(6);
    let clip = micro_clip(&m.cfg, 2, 1);
    let map = tokenize_clip(&m.tok, &clip.frames, 1).unwrap().remove(0);
    for k in 1..=3 {
        let p = MultiScaleTokenMap { maps: map.maps[..k].to_vec(), ..map.clone() };
        assert_eq!(m.tok.decode_multiscale(&[p]).unwrap().shape(), &[1, 3, 16, 16]);
    }
}

fn loss_with(tok: &Tokenizer<f64>, x: &Tensor<f64>, frozen: Option<&swm_core::tokenizer::Frozen<f64>>) -> (f64, f64, swm_core::tokenizer::Frozen<f64>) {
    let mut tape = Tape::new();
    let b = tok.params.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = tok.loss_parts(&mut tape, &b, Role::Observed, x, None, frozen, &mut rng).unwrap();
    (tape.value(p.loss).item(), tape.value(p.recon).item(), p.frozen)
}

#[test]
fn zero_beta_leaves_reconstruction_only() {
    let mut m = micro::<f64>(7);
    m.tok.spec.beta = 0.0;
    let clip = micro_clip(&m.cfg, 3, 2);
    let x = frames_to_tensor(&[&clip.frames[0], &clip.frames[1]]).unwrap();
    let (loss, recon, _) = loss_with(&m.tok, &x, None);
    assert_eq!(loss, recon);
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let m = micro::<f64>(8);
    let clip = micro_clip(&m.cfg, 4, 2);
    let x = frames_to_tensor(&[&clip.frames[0], &clip.frames[1]]).unwrap();
    let mut tape = Tape::new();
    let b = m.tok.params.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = m.tok.loss_parts(&mut tape, &b, Role::Observed, &x, None, None, &mut rng).unwrap();
    let mut g = tape.backward(p.loss);
    let grads = m.tok.params.gradients(&b, &mut g);
    let frozen = p.frozen;
    let enc: Vec<String> = m.tok.params.names().filter(|n| n.starts_with("obs.enc")).map(String::from).collect();
    let norm: f64 = enc.iter().filter_map(|n| grads.get(n)).flat_map(|t| t.data().iter()).map(|v| v * v).sum();
    assert!(norm > 0.0, "no gradient reaches the encoder");
    let mut tok = m.tok.cast::<f64>();
    let mut pick = ChaCha8Rng::seed_from_u64(1);
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    let mut names: BTreeSet<String> = BTreeSet::new();
    for _ in 0..40 {
        let name = &enc[pick.random_range(0..enc.len())];
        names.insert(name.clone());
        let i = pick.random_range(0..tok.params.get(name).numel());
        let orig = tok.params.get(name).data()[i];
        tok.params.get_mut(name).data_mut()[i] = orig + eps;
        let up = loss_with(&tok, &x, Some(&frozen)).0;
        tok.params.get_mut(name).data_mut()[i] = orig - eps;
        let down = loss_with(&tok, &x, Some(&frozen)).0;
        tok.params.get_mut(name).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads.get(name).map_or(0.0, |t| t.data()[i]);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
    }
    assert!(names.len() > 3);
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn training_lowers_the_loss() {
    let mut m = micro::<f32>(9);
    let clip = micro_clip(&m.cfg, 5, 4);
    let refs: Vec<&[swm_core::image::Frame]> = vec![&clip.frames[..]];
    let batch = swm_core::train::tokenizer_batch::<f32>(&refs, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    m.tok.init_codebooks(&batch, &mut rng).unwrap();
    let mut opt = swm_core::train::tokenizer_optimizer::<f32>(&m.cfg.run);
    let first = m.tok.train_step(&mut opt, &batch, 3e-3, 1.0, &mut rng).unwrap();
    let mut last = first.clone();
    for _ in 0..60 {
        last = m.tok.train_step(&mut opt, &batch, 3e-3, 1.0, &mut rng).unwrap();
    }
    assert!(last.loss < 0.5 * first.loss, "{} -> {}", first.loss, last.loss);
    assert_eq!(m.tok.steps, 61);
}

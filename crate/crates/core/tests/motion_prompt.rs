mod common;

use common::{filter_cases, filter_is_monotone, micro, micro_clip, random_tracks, tracks};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swm_core::image::Frame;
use swm_core::layout::build_layout;
use swm_core::motion::{
    assemble_dual_branch, filter_trajectories, prompt_dropout, read_trajectories, render_prompt, replicate_frames, write_trajectories,
};
use swm_core::train::tokenize_clip;
use swm_core::Role;

#[test]
fn named_filter_cases() {
    // static, 1 px per window, low confidence, 10 px jump
    assert_eq!(filter_cases(), vec![false, false, false, true]);
    let diag_threshold = 0.02 * (64.0f64 * 64.0 * 2.0).sqrt();
    assert!((diag_threshold - 1.8102).abs() < 1e-4);
}

#[test]
fn filter_boundary_and_errors() {
    let just = tracks(6, &[(&|k| (10.0 + if k >= 4 { 1.9 } else { 0.0 }, 10.0), 1.0)]);
    assert_eq!(filter_trajectories(&just, 0.5, 4, 0.02).unwrap().n, 1);
    let short = tracks(4, &[(&|_| (1.0, 1.0), 1.0)]);
    let err = filter_trajectories(&short, 0.5, 4, 0.02).unwrap_err().to_string();
    assert!(err.contains("at least 5 frames"), "{err}");
}

#[test]
fn filter_thresholds_are_monotone() {
    assert!(filter_is_monotone(200, 3));
}

proptest! {
    #[test]
    fn filter_commutes_with_permutation(seed in any::<u64>(), rot in 0usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = random_tracks(&mut rng, 20, 8);
        let perm: Vec<usize> = (0..20).map(|i| (i + rot) % 20).collect();
        let a = filter_trajectories(&set.subset(&perm), 0.4, 4, 0.02).unwrap();
        let kept = filter_trajectories(&set, 0.4, 4, 0.02).unwrap();
        let mut x: Vec<Vec<u32>> = (0..a.n).map(|i| a.points[i * 16..(i + 1) * 16].iter().map(|v| v.to_bits()).collect()).collect();
        let mut y: Vec<Vec<u32>> = (0..kept.n).map(|i| kept.points[i * 16..(i + 1) * 16].iter().map(|v| v.to_bits()).collect()).collect();
        x.sort();
        y.sort();
        prop_assert_eq!(x, y);
    }
}

#[test]
fn rendering_examples() {
    let base = Frame::filled(16, 16, [10, 20, 30]);
    let empty = tracks(3, &[]);
    assert_eq!(render_prompt(&base, &empty), base);

    let line = tracks(3, &[(&|k| (2.0 + 3.0 * k as f32, 5.5), 1.0)]);
    let out = render_prompt(&base, &line);
    for y in 0..16 {
        for x in 0..16 {
            let on = y == 5 && (2..=8).contains(&x);
            assert_eq!(out.pixel(y, x) != base.pixel(y, x), on, "pixel ({x}, {y})");
        }
    }
    assert_eq!(out.pixel(5, 2), [0, 0, 255]);
    assert_eq!(out.pixel(5, 8), [255, 0, 0]);

    let twice = line.subset(&[0, 0]);
    assert_eq!(render_prompt(&base, &twice), out);
    assert_eq!(render_prompt(&base, &line), out);
}

#[test]
fn dropout_and_replication() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!((0..100).all(|_| prompt_dropout(0.0, &mut rng).unwrap()));
    assert!((0..100).all(|_| !prompt_dropout(1.0, &mut rng).unwrap()));
    let off = (0..10_000).filter(|_| !prompt_dropout(0.5, &mut rng).unwrap()).count() as f64 / 10_000.0;
    assert!((0.47..=0.53).contains(&off), "{off}");
    assert!(prompt_dropout(1.5, &mut rng).is_err());

    assert_eq!(replicate_frames(&['a'], 4).unwrap(), vec!['a'; 4]);
    assert_eq!(replicate_frames(&['a', 'b'], 5).unwrap(), vec!['a', 'a', 'a', 'b', 'b']);
    assert_eq!(replicate_frames(&[1, 2, 3, 4, 5, 6], 4).unwrap(), vec![1, 2, 3, 4, 5, 6]);
    assert!(replicate_frames::<u8>(&[], 3).is_err());
}

#[test]
fn dual_branch_prefix() {
    let m = micro::<f64>(2);
    let clip = micro_clip(&m.cfg, 4, 3);
    let maps = tokenize_clip(&m.tok, &clip.frames, 3).unwrap();
    let obs = &maps[..2];
    let vocab = m.model.vocab;
    let plain = assemble_dual_branch(&m.model.schedule, vocab, None, obs, false).unwrap();
    let plain_layout = build_layout(&m.model.schedule, 3, 2, false).unwrap();
    assert_eq!(plain.blocks, plain_layout.blocks[..plain_layout.first_future_block()]);
    assert_eq!(plain.ids.len(), 2 * (1 + 1 + 4 + 16));
    let with = assemble_dual_branch(&m.model.schedule, vocab, Some(&maps[2]), obs, true).unwrap();
    // a START, 1 + 4 + 16 prompt tokens and one separator ahead of the frames
    assert_eq!(with.ids.len(), 1 + 21 + 1 + plain.ids.len());
    assert_eq!(with.ids[0], vocab.start());
    assert_eq!(with.ids[22], vocab.sep());
    assert_eq!(&with.ids[23..], &plain.ids[..]);
    let mut second = maps[2].clone();
    for g in second.maps.iter_mut() {
        g.indices.iter_mut().for_each(|i| *i = (*i + 5) % 16);
    }
    let other = assemble_dual_branch(&m.model.schedule, vocab, Some(&second), obs, true).unwrap();
    let diff: Vec<usize> = (0..with.ids.len()).filter(|&i| with.ids[i] != other.ids[i]).collect();
    assert!(!diff.is_empty() && diff.iter().all(|&i| (1..22).contains(&i)));
    let mut wrong = maps[2].clone();
    wrong.role = Role::Future;
    assert!(assemble_dual_branch(&m.model.schedule, vocab, Some(&wrong), obs, true).is_err());
}

#[test]
fn trajectory_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let clip = micro_clip(&common::micro_config(), 2, 6);
    let t = clip.trajectories.clone().unwrap();
    assert_eq!(t.n, 16);
    write_trajectories(&t, dir.path()).unwrap();
    assert_eq!(read_trajectories(dir.path()).unwrap(), t);
    std::fs::remove_file(dir.path().join("confidence.bin")).unwrap();
    let err = read_trajectories(dir.path()).unwrap_err().to_string();
    assert!(err.contains("confidence"), "{err}");
}

mod common;

use common::{sampler_frequencies, sampler_max_deviation};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swm_core::rollout::{argmax, sample_topk_topp, SamplingConfig};

#[test]
fn three_way_categorical_is_reproduced() {
    let dev = sampler_max_deviation(30_000, 1);
    assert!(dev < 0.02, "deviation {dev}");
}

#[test]
fn temperature_sharpens_the_distribution() {
    let logits = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
    // temperature 0.5 squares the probabilities: 25, 9, 4 over 38
    let got = sampler_frequencies(&logits, 3, 1.0, 0.5, 30_000, 9);
    for (g, w) in got.iter().zip([25.0 / 38.0, 9.0 / 38.0, 4.0 / 38.0]) {
        assert!((g - w).abs() < 0.02, "{got:?}");
    }
}

#[test]
fn argmax_breaks_ties_low_and_rejects_empty_rows() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]).unwrap(), 1);
    assert!(argmax(&[f64::NEG_INFINITY; 3]).is_err());
    assert!(argmax::<f64>(&[]).is_err());
}

#[test]
fn invalid_sampling_settings_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(sample_topk_topp(&[0.0, 1.0], 0, 0.9, 1.0, &mut rng).is_err());
    assert!(sample_topk_topp(&[0.0, 1.0], 2, 0.0, 1.0, &mut rng).is_err());
    assert!(sample_topk_topp(&[0.0, 1.0], 2, 0.9, 0.0, &mut rng).is_err());
    assert!(SamplingConfig { top_k: 0, top_p: 0.9, temperature: 1.0, greedy: false }.validate().is_err());
}

fn row() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-6.0f64..6.0, 1..20)
}

proptest! {
    #[test]
    fn top_one_is_argmax(r in row(), seed in any::<u64>(), p in 0.01f64..1.0, t in 0.1f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(sample_topk_topp(&r, 1, p, t, &mut rng).unwrap(), argmax(&r).unwrap());
    }

    #[test]
    fn tiny_nucleus_is_argmax(r in row(), seed in any::<u64>(), k in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(sample_topk_topp(&r, k, 1e-12, 1.0, &mut rng).unwrap(), argmax(&r).unwrap());
    }

    #[test]
    fn draws_stay_inside_the_top_k(r in row(), seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = sample_topk_topp(&r, k, 1.0, 1.0, &mut rng).unwrap();
        let better = r.iter().enumerate().filter(|&(i, v)| *v > r[j] || (*v == r[j] && i < j)).count();
        prop_assert!(better < k);
    }
}

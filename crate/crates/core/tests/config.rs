use proptest::prelude::*;
use swm_core::config::{load_config, scale_weights, scaled_model_config, write_config, Config, ScaleSchedule};

#[test]
fn documented_weights_and_shapes() {
    let w = scale_weights(&[1, 2, 3, 4, 5, 6]).unwrap();
    assert!((w.iter().sum::<f64>() - 6.0).abs() < 1e-9);
    assert!((w[5] - 216.0 / 91.0).abs() < 1e-9);
    for (d, width, dr, ffn) in [(12, 768, 0.05, 768), (16, 1024, 0.0667, 1024), (20, 1280, 0.0833, 1024)] {
        let m = scaled_model_config(d).unwrap();
        assert_eq!((m.width, m.heads, m.ffn_dim), (width, d, ffn));
        assert!((m.dropout - dr).abs() < 5e-5);
    }
}

#[test]
fn unknown_keys_are_rejected_by_name() {
    let mut v: serde_json::Value = serde_json::from_str(&Config::default().to_json()).unwrap();
    v["model"]["colour"] = 3.into();
    let err = Config::from_json(&v.to_string()).unwrap_err().to_string();
    assert!(err.contains("colour"), "{err}");
    let mut v: serde_json::Value = serde_json::from_str(&Config::default().to_json()).unwrap();
    v["extra"] = 1.into();
    assert!(Config::from_json(&v.to_string()).is_err());
}

fn scales() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::btree_set(1usize..40, 1..12).prop_map(|s| s.into_iter().collect())
}

proptest! {
    #[test]
    fn weights_sum_to_scale_count(s in scales()) {
        let w = scale_weights(&s).unwrap();
        prop_assert!((w.iter().sum::<f64>() - s.len() as f64).abs() < 1e-9);
        prop_assert!(w.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn scaled_config_is_monotone(d in 1usize..40) {
        let (a, b) = (scaled_model_config(d).unwrap(), scaled_model_config(d + 1).unwrap());
        prop_assert!(a.width < b.width && a.heads < b.heads && a.dropout < b.dropout);
        prop_assert!(a.ffn_dim <= b.ffn_dim);
        prop_assert_eq!(a, scaled_model_config(d).unwrap());
    }

    #[test]
    fn config_file_round_trip(seed in any::<u64>(), depth in 1usize..6, lr in 1e-5f64..1e-2) {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = Config::default();
        cfg.run.seed = seed;
        cfg.run.peak_lr = lr;
        cfg.model.depth = depth;
        let p = dir.path().join("c.json");
        write_config(&cfg, &p).unwrap();
        prop_assert_eq!(load_config(&p).unwrap(), cfg);
    }

    #[test]
    fn schedules_must_be_increasing_and_bounded(mut s in scales(), base in 1usize..40) {
        let ok = s.iter().all(|&v| v <= base) && s.contains(&base);
        let valid = ScaleSchedule::new(s.clone(), vec![s[0]], base).is_ok();
        prop_assert!(!valid || s.iter().all(|&v| v <= base));
        prop_assert!(ok || !valid || !s.contains(&base));
        s.reverse();
        if s.len() > 1 {
            prop_assert!(ScaleSchedule::new(s, vec![1], base).is_err());
        }
    }
}

//! Finite-difference checks through whole module forward passes.

mod common;

use common::grad::{detector_case, encoders_case, memnet_case, self_attention_case, Check, TOL};

const SEEDS: u64 = 10;

fn assert_passes(c: Check) -> f64 {
    assert!(c.checked > 0, "{}: nothing checked", c.label);
    assert!(c.error <= TOL, "{}: {:e} at {:?}", c.label, c.error, c.worst);
    c.error
}

#[test]
fn embed_recurrent_attention_fuse() {
    for seed in 0..SEEDS {
        assert_passes(encoders_case(seed));
    }
}

#[test]
fn self_attentive_question() {
    for seed in 0..SEEDS {
        assert_passes(self_attention_case(seed));
    }
}

#[test]
fn detector_loss_composite() {
    for seed in 0..SEEDS {
        assert_passes(detector_case(seed));
    }
}

#[test]
fn memnet_full_pipeline() {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        worst = worst.max(assert_passes(memnet_case(seed, true)));
        worst = worst.max(assert_passes(memnet_case(seed, false)));
    }
    eprintln!("memnet worst relative error {worst:e}");
}

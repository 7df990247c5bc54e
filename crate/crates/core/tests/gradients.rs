//! Central finite differences against the hand-written backward pass, in
//! double precision on a tiny encoder.

mod common;

use common::{max_relative_error, tiny, TOLERANCE};
use lpd::encoder::{Encoder, EncoderConfig};
use lpd::rng::seeded;
use lpd::tokenizer::{TokenId, PAD};
use rand::Rng;

fn check(cfg: EncoderConfig, ids: Vec<TokenId>, seed: u64, indices: Option<Vec<usize>>) {
    let worst = max_relative_error(cfg, ids, seed, indices);
    assert!(worst < TOLERANCE, "max relative error {worst}");
}

fn ids() -> Vec<TokenId> {
    vec![2, 11, 6, 14, 7, 12, 8, 19, 9, 22, 3]
}

#[test]
fn all_parameters_untied_head() {
    check(tiny(false, 0.0), ids(), 1, None);
}

#[test]
fn all_parameters_tied_head() {
    check(tiny(true, 0.0), ids(), 2, None);
}

#[test]
fn padded_keys_are_masked_in_backward_too() {
    let mut padded = ids();
    padded.extend([PAD, PAD]);
    padded.truncate(12);
    check(tiny(false, 0.0), padded, 3, None);
}

#[test]
fn with_internal_dropout() {
    check(tiny(false, 0.2), ids(), 4, None);
}

#[test]
fn two_layers_sampled() {
    let cfg = EncoderConfig {
        layers: 2,
        ..tiny(true, 0.1)
    };
    let n = Encoder::<f64>::new(cfg.clone(), 0).unwrap().num_parameters();
    let mut rng = seeded(9);
    let sample: Vec<usize> = (0..400).map(|_| rng.random_range(0..n)).collect();
    check(cfg, ids(), 5, Some(sample));
}

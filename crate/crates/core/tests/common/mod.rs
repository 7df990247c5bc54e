//! Helpers shared by several test targets.
#![allow(dead_code)]

use lpd::encoder::{Encoder, EncoderConfig, Mode};
use lpd::rng::{seeded, SeededRng};
use lpd::tokenizer::TokenId;
use rand::Rng;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;

pub fn tiny(tie: bool, dropout: f64) -> EncoderConfig {
    EncoderConfig {
        hidden: 8,
        layers: 1,
        heads: 2,
        ffn_dim: 16,
        max_length: 12,
        vocab_size: 23,
        dropout_internal: dropout,
        tie_mlm_head: tie,
        init_std: 0.3,
    }
}

/// Scalar objective touching every output: a fixed random projection of
/// all hidden states plus one of MLM logits at two positions.
struct Objective {
    ids: Vec<TokenId>,
    positions: Vec<usize>,
    w_hidden: Vec<f64>,
    w_logits: Vec<f64>,
    dropout_rng: Option<SeededRng>,
}

impl Objective {
    fn new(cfg: &EncoderConfig, ids: Vec<TokenId>, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let positions = vec![1, ids.len() - 2];
        let w_hidden = (0..ids.len() * cfg.hidden).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w_logits = (0..positions.len() * cfg.vocab_size)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let dropout_rng = (cfg.dropout_internal > 0.0).then(|| seeded(seed ^ 0xd0));
        Objective {
            ids,
            positions,
            w_hidden,
            w_logits,
            dropout_rng,
        }
    }

    fn mode(&self) -> (Option<SeededRng>, bool) {
        (self.dropout_rng.clone(), self.dropout_rng.is_some())
    }

    fn value(&self, enc: &Encoder<f64>) -> f64 {
        let (mut rng, train) = self.mode();
        let mode = if train { Mode::Train(rng.as_mut().unwrap()) } else { Mode::Eval };
        let pass = enc.forward(&self.ids, mode).unwrap();
        let logits = enc.mlm_logits(pass.hidden(), &self.positions).unwrap();
        dot(pass.hidden(), &self.w_hidden) + dot(&logits, &self.w_logits)
    }

    fn gradient(&self, enc: &Encoder<f64>) -> Vec<f64> {
        let (mut rng, train) = self.mode();
        let mode = if train { Mode::Train(rng.as_mut().unwrap()) } else { Mode::Eval };
        let pass = enc.forward(&self.ids, mode).unwrap();
        let mut grads = enc.params.zeros_like();
        let mut d_hidden = self.w_hidden.clone();
        enc.mlm_backward(pass.hidden(), &self.positions, &self.w_logits, &mut d_hidden, &mut grads)
            .unwrap();
        enc.backward(&pass, &d_hidden, &mut grads).unwrap();
        grads
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max relative error over `indices` (all parameters when `None`).
pub fn max_relative_error(cfg: EncoderConfig, ids: Vec<TokenId>, seed: u64, indices: Option<Vec<usize>>) -> f64 {
    let mut enc: Encoder<f64> = Encoder::new(cfg.clone(), seed).unwrap();
    let obj = Objective::new(&cfg, ids, seed + 100);
    let analytic = obj.gradient(&enc);
    let indices = indices.unwrap_or_else(|| (0..analytic.len()).collect());
    let mut worst: f64 = 0.0;
    for i in indices {
        let orig = enc.params.data[i];
        enc.params.data[i] = orig + STEP;
        let up = obj.value(&enc);
        enc.params.data[i] = orig - STEP;
        let down = obj.value(&enc);
        enc.params.data[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    worst
}

/// `-ln(exp(s[gold]) / sum exp(s))`, computed directly.
pub fn naive_ce(scores: &[f64], gold: usize) -> f64 {
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    -(scores[gold].exp() / z).ln()
}

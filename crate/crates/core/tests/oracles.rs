//! Loss, prototype and prediction functions against naive re-implementations
//! on random small inputs.

mod common;

use common::{dot, naive_ce};
use lpd::encoder::RelationRepresentation;
use lpd::episodic::{compute_prototypes, episode_loss, episode_loss_grad, predict, PrototypeSet};
use lpd::pretrain::{contrastive_loss, contrastive_loss_grad, mlm_loss, mlm_loss_grad};
use lpd::rng::seeded;
use lpd::tokenizer::TokenId;
use proptest::prelude::*;
use rand::Rng;

const CASES: usize = 1000;
const TOL: f64 = 1e-7;

fn vec_of(rng: &mut impl Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-scale..scale)).collect()
}

fn rep(v: Vec<f64>) -> RelationRepresentation {
    RelationRepresentation::new(v).unwrap()
}

#[test]
fn prototypes_match_summation() {
    let mut rng = seeded(1);
    for _ in 0..CASES {
        let (n, k, d) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..9));
        let reps: Vec<Vec<Vec<f64>>> = (0..n).map(|_| (0..k).map(|_| vec_of(&mut rng, d, 5.0)).collect()).collect();
        let input: Vec<Vec<RelationRepresentation>> =
            reps.iter().map(|row| row.iter().cloned().map(rep).collect()).collect();
        let protos = compute_prototypes(&input).unwrap();
        for c in 0..n {
            for j in 0..d {
                let mut s = 0.0;
                for row in &reps[c] {
                    s += row[j];
                }
                assert!((protos.vectors[c][j] - s / k as f64).abs() < TOL);
            }
        }
    }
}

#[test]
fn prototype_examples() {
    let one = compute_prototypes(&[vec![rep(vec![0.3, -1.0])]]).unwrap();
    assert_eq!(one.vectors, vec![vec![0.3, -1.0]]);
    let two = compute_prototypes(&[vec![rep(vec![1.0, 0.0]), rep(vec![0.0, 1.0])]]).unwrap();
    assert_eq!(two.vectors, vec![vec![0.5, 0.5]]);
}

#[test]
fn episode_loss_matches_log_sum_exp() {
    let mut rng = seeded(2);
    for _ in 0..CASES {
        let (n, d) = (rng.random_range(2..11), rng.random_range(1..9));
        let protos = PrototypeSet {
            vectors: (0..n).map(|_| vec_of(&mut rng, d, 2.0)).collect(),
        };
        let q = vec_of(&mut rng, d, 2.0);
        let gold = rng.random_range(0..n);
        let scores: Vec<f64> = protos.vectors.iter().map(|u| dot(&q, u)).collect();
        let got = episode_loss(&protos, &rep(q), gold).unwrap();
        assert!((got - naive_ce(&scores, gold)).abs() < TOL);
    }
}

#[test]
fn episode_loss_examples() {
    let protos = PrototypeSet {
        vectors: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
    };
    let loss = episode_loss(&protos, &rep(vec![0.5, 0.25]), 1).unwrap();
    assert!((loss - 2f64.ln()).abs() < 1e-12);
    let protos = PrototypeSet {
        vectors: vec![vec![20.0], vec![0.0], vec![0.0]],
    };
    assert!(episode_loss(&protos, &rep(vec![1.0]), 0).unwrap() < 1e-6);
}

/// The gradient with respect to the query is `(softmax - onehot)^T U`.
#[test]
fn episode_query_gradient_is_softmax_minus_onehot_times_prototypes() {
    let mut rng = seeded(3);
    for _ in 0..CASES {
        let (n, d) = (rng.random_range(2..8), rng.random_range(1..7));
        let u: Vec<Vec<f64>> = (0..n).map(|_| vec_of(&mut rng, d, 2.0)).collect();
        let q = vec_of(&mut rng, d, 2.0);
        let gold = rng.random_range(0..n);
        let scores: Vec<f64> = u.iter().map(|v| dot(&q, v)).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let protos = PrototypeSet { vectors: u.clone() };
        let g = episode_loss_grad(&protos, &rep(q.clone()), gold, 1.0).unwrap();
        for j in 0..d {
            let mut expect = 0.0;
            for c in 0..n {
                let p = scores[c].exp() / z;
                expect += (p - if c == gold { 1.0 } else { 0.0 }) * u[c][j];
            }
            assert!((g.d_query[j] - expect).abs() < TOL);
        }
        // d/du_c = (p_c - y_c) q
        for c in 0..n {
            let p = scores[c].exp() / z - if c == gold { 1.0 } else { 0.0 };
            for j in 0..d {
                assert!((g.d_prototypes[c][j] - p * q[j]).abs() < TOL);
            }
        }
    }
}

#[test]
fn temperature_scales_logits() {
    let mut rng = seeded(4);
    for _ in 0..200 {
        let n = rng.random_range(2..6);
        let u: Vec<Vec<f64>> = (0..n).map(|_| vec_of(&mut rng, 4, 3.0)).collect();
        let q = vec_of(&mut rng, 4, 3.0);
        let t = rng.random_range(0.5..5.0);
        let scores: Vec<f64> = u.iter().map(|v| dot(&q, v) / t).collect();
        let g = episode_loss_grad(&PrototypeSet { vectors: u }, &rep(q), 0, t).unwrap();
        assert!((g.loss - naive_ce(&scores, 0)).abs() < TOL);
    }
}

#[test]
fn predict_matches_exhaustive_scan() {
    let mut rng = seeded(5);
    for _ in 0..CASES {
        let d = rng.random_range(1..9);
        let u: Vec<Vec<f64>> = (0..10).map(|_| vec_of(&mut rng, d, 1.0)).collect();
        let q = vec_of(&mut rng, d, 1.0);
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (c, v) in u.iter().enumerate() {
            let s = dot(&q, v);
            if s > best.0 {
                best = (s, c);
            }
        }
        assert_eq!(predict(&rep(q), &PrototypeSet { vectors: u }).unwrap(), best.1);
    }
}

#[test]
fn predict_examples() {
    let protos = PrototypeSet {
        vectors: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
    };
    assert_eq!(predict(&rep(vec![0.9, 0.2]), &protos).unwrap(), 0);
    let tied = PrototypeSet {
        vectors: vec![vec![1.0, 1.0]; 4],
    };
    assert_eq!(predict(&rep(vec![0.3, 0.7]), &tied).unwrap(), 0);
}

#[test]
fn contrastive_matches_log_sum_exp() {
    let mut rng = seeded(6);
    for case in 0..CASES {
        let d = rng.random_range(1..9);
        let m = if case % 2 == 0 { 7 } else { rng.random_range(1..10) };
        let a = vec_of(&mut rng, d, 1.5);
        let p = vec_of(&mut rng, d, 1.5);
        let negs: Vec<Vec<f64>> = (0..m).map(|_| vec_of(&mut rng, d, 1.5)).collect();
        let mut scores = vec![dot(&a, &p)];
        scores.extend(negs.iter().map(|n| dot(&a, n)));
        let neg_reps: Vec<RelationRepresentation> = negs.into_iter().map(rep).collect();
        let refs: Vec<&RelationRepresentation> = neg_reps.iter().collect();
        let got = contrastive_loss(&rep(a), &rep(p), &refs).unwrap();
        assert!((got - naive_ce(&scores, 0)).abs() < TOL);
    }
}

#[test]
fn contrastive_gradient_matches_finite_differences() {
    let mut rng = seeded(7);
    let h = 1e-6;
    for _ in 0..100 {
        let d = rng.random_range(1..5);
        let a = vec_of(&mut rng, d, 1.0);
        let p = vec_of(&mut rng, d, 1.0);
        let n: Vec<Vec<f64>> = (0..3).map(|_| vec_of(&mut rng, d, 1.0)).collect();
        let t = rng.random_range(0.5..3.0);
        let loss = |a: &[f64], p: &[f64], n: &[Vec<f64>]| {
            let mut s = vec![dot(a, p) / t];
            s.extend(n.iter().map(|x| dot(a, x) / t));
            naive_ce(&s, 0)
        };
        let nr: Vec<RelationRepresentation> = n.iter().cloned().map(rep).collect();
        let refs: Vec<&RelationRepresentation> = nr.iter().collect();
        let g = contrastive_loss_grad(&rep(a.clone()), &rep(p.clone()), &refs, t).unwrap();
        for j in 0..d {
            let (mut up, mut dn) = (a.clone(), a.clone());
            up[j] += h;
            dn[j] -= h;
            let num = (loss(&up, &p, &n) - loss(&dn, &p, &n)) / (2.0 * h);
            assert!((g.d_anchor[j] - num).abs() < 1e-6);
            let (mut up, mut dn) = (p.clone(), p.clone());
            up[j] += h;
            dn[j] -= h;
            let num = (loss(&a, &up, &n) - loss(&a, &dn, &n)) / (2.0 * h);
            assert!((g.d_positive[j] - num).abs() < 1e-6);
            let (mut up, mut dn) = (n.clone(), n.clone());
            up[1][j] += h;
            dn[1][j] -= h;
            let num = (loss(&a, &p, &up) - loss(&a, &p, &dn)) / (2.0 * h);
            assert!((g.d_negatives[1][j] - num).abs() < 1e-6);
        }
    }
}

#[test]
fn contrastive_examples() {
    let a = rep(vec![1.0, 0.0]);
    let same = rep(vec![0.0, 3.0]);
    let negs = [&same, &same, &same, &same];
    assert!((contrastive_loss(&a, &same, &negs).unwrap() - 5f64.ln()).abs() < 1e-12);
    let p = rep(vec![20.0, 0.0]);
    let zero = rep(vec![0.0, 0.0]);
    assert!(contrastive_loss(&a, &p, &[&zero, &zero]).unwrap() < 1e-6);
}

#[test]
fn mlm_matches_per_position_softmax() {
    let mut rng = seeded(8);
    for _ in 0..CASES {
        let v = rng.random_range(2..30);
        let rows = rng.random_range(1..6);
        // f32 logits are what the encoder produces; the oracle reads the
        // same rounded values.
        let logits: Vec<f32> = (0..rows * v).map(|_| rng.random_range(-4.0f32..4.0)).collect();
        let targets: Vec<TokenId> = (0..rows).map(|_| rng.random_range(0..v) as TokenId).collect();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row: Vec<f64> = logits[r * v..(r + 1) * v].iter().map(|&x| x as f64).collect();
            total += naive_ce(&row, t as usize);
        }
        let got = mlm_loss(&logits, v, &targets).unwrap();
        assert!((got - total / rows as f64).abs() < TOL);
    }
}

#[test]
fn mlm_examples() {
    assert_eq!(mlm_loss(&[], 7, &[]).unwrap(), 0.0);
    let v = 13;
    let uniform = vec![0.25f32; 2 * v];
    assert!((mlm_loss(&uniform, v, &[3, 9]).unwrap() - (v as f64).ln()).abs() < 1e-12);
    let (_, grad) = mlm_loss_grad(&uniform, v, &[3, 9], 1.0).unwrap();
    let row_sum: f32 = grad[..v].iter().sum();
    assert!(row_sum.abs() < 1e-6);
}

proptest! {
    #[test]
    fn episode_loss_is_non_negative_and_probs_sum_to_one(
        n in 2usize..8,
        seed in any::<u64>(),
        t in 0.25f64..8.0,
    ) {
        let mut rng = seeded(seed);
        let u: Vec<Vec<f64>> = (0..n).map(|_| vec_of(&mut rng, 5, 4.0)).collect();
        let q = vec_of(&mut rng, 5, 4.0);
        let g = episode_loss_grad(&PrototypeSet { vectors: u }, &rep(q), n - 1, t).unwrap();
        prop_assert!(g.loss >= 0.0);
        prop_assert!((g.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prediction_is_shift_invariant_in_the_loss(
        seed in any::<u64>(),
        shift in -3.0f64..3.0,
    ) {
        // Adding the same vector component orthogonal to the query leaves
        // every logit, hence the loss, unchanged.
        let mut rng = seeded(seed);
        let u: Vec<Vec<f64>> = (0..4).map(|_| vec_of(&mut rng, 2, 2.0)).collect();
        let q = vec![1.0, 0.0];
        let moved: Vec<Vec<f64>> = u.iter().map(|v| vec![v[0], v[1] + shift]).collect();
        let a = episode_loss(&PrototypeSet { vectors: u }, &rep(q.clone()), 2).unwrap();
        let b = episode_loss(&PrototypeSet { vectors: moved }, &rep(q), 2).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}

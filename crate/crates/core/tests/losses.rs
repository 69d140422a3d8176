mod common;

use bevcap::config::SimilarityPooling;
use bevcap::losses::{btc_loss, btg_loss, btm_loss, combined_loss, AlignmentBatch, LossWeights};
use bevcap::Error;
use common::cases::random;
use ndarray::{array, Array2, Array3};
use proptest::prelude::*;

fn batch(queries: Vec<Array2<f64>>, texts: Array2<f64>, temperature: f64) -> AlignmentBatch {
    let b = queries.len();
    AlignmentBatch {
        query_embeddings: queries,
        pooled_text: texts,
        text_token_ids: Array2::zeros((b, 3)),
        text_mask: Array2::from_elem((b, 3), true),
        match_labels: vec![1; b],
        temperature,
        loss_weights: LossWeights::default(),
        pooling: SimilarityPooling::Max,
    }
}

fn random_batch(b: usize, nq: usize, d: usize, seed: u64) -> AlignmentBatch {
    let queries = (0..b).map(|i| random(nq, d, seed + i as u64)).collect();
    batch(queries, random(b, d, seed + 100), 0.07)
}

#[test]
fn single_pair_contrastive_loss_is_zero() {
    for seed in 0..5 {
        let l = btc_loss(&random_batch(1, 4, 6, seed)).unwrap();
        assert!(l.abs() < 1e-9, "{l}");
    }
}

#[test]
fn two_by_two_contrastive_example() {
    let b = batch(
        vec![array![[1.0, 0.0]], array![[-1.0, 0.0]]],
        array![[1.0, 0.0], [-1.0, 0.0]],
        1.0,
    );
    let expected = (1.0 + (-2.0f64).exp()).ln();
    assert!((btc_loss(&b).unwrap() - expected).abs() < 1e-12);
    assert!((expected - 0.1269).abs() < 1e-4);
}

#[test]
fn uniform_generation_logits_give_ln_v() {
    for v in [2, 4, 37, 500] {
        let logits = Array3::zeros((2, 3, v));
        let targets = Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) % v);
        let mask = Array2::from_elem((2, 3), true);
        let l = btg_loss(&logits, &targets, &mask).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
    }
    let l = btg_loss(&Array3::zeros((1, 1, 4)), &array![[3]], &array![[true]]).unwrap();
    assert!((l - 1.3863).abs() < 1e-4);
}

#[test]
fn confident_generation_logits_vanish() {
    let mut logits = Array3::zeros((1, 2, 3));
    logits[[0, 0, 1]] = 80.0;
    logits[[0, 1, 2]] = 80.0;
    let l = btg_loss(&logits, &array![[1, 2]], &array![[true, true]]).unwrap();
    assert!(l < 1e-30);
}

#[test]
fn generation_loss_contract() {
    let logits = Array3::zeros((1, 2, 3));
    assert!(matches!(
        btg_loss(&logits, &array![[0, 0]], &array![[false, false]]),
        Err(Error::InputDomain(_))
    ));
    assert!(btg_loss(&logits, &array![[0, 3]], &array![[true, true]]).is_err());
    assert!(matches!(
        btg_loss(&logits, &array![[0]], &array![[true]]),
        Err(Error::Shape(_))
    ));
}

#[test]
fn matching_calibration() {
    assert!((btm_loss(&[0.0; 5], &[1, 0, 1, 1, 0]).unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!((btm_loss(&[0.0, 0.0], &[1, 0]).unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!(btm_loss(&[50.0], &[1]).unwrap() < 1e-20);
    assert!(btm_loss(&[0.0], &[2]).is_err());
    assert!(matches!(btm_loss(&[0.0], &[1, 0]), Err(Error::Shape(_))));
}

#[test]
fn weights_select_terms() {
    let mut b = random_batch(3, 2, 4, 7);
    b.text_token_ids = array![[0, 1, 2], [2, 1, 0], [1, 1, 1]];
    let logits = Array3::from_shape_fn((3, 3, 3), |(i, j, k)| ((i * 9 + j * 3 + k) as f64 * 0.7).sin());
    let match_logits = [0.3, -1.2, 2.0];

    b.loss_weights = LossWeights { btc: 1.0, btg: 0.0, btm: 0.0 };
    let only_btc = combined_loss(&b, &logits, &match_logits).unwrap();
    assert_eq!(only_btc.total, btc_loss(&b).unwrap());

    b.loss_weights = LossWeights { btc: 0.0, btg: 0.0, btm: 1.0 };
    let zero = combined_loss(&b, &logits, &[0.0; 3]).unwrap();
    assert!((zero.total - 2f64.ln()).abs() < 1e-15);

    b.loss_weights = LossWeights::default();
    let all = combined_loss(&b, &logits, &match_logits).unwrap();
    let flat = logits.to_shape((9, 3)).unwrap().to_owned();
    let ids: Vec<usize> = b.text_token_ids.iter().copied().collect();
    let btg = common::cross_entropy_oracle(&flat, &ids, &[true; 9]);
    let btm = common::bce_oracle(&match_logits, &b.match_labels);
    let expected = btc_loss(&b).unwrap() + btg + btm;
    assert!((all.total - expected).abs() < 1e-9);
    assert!((all.btg - btg).abs() < 1e-9 && (all.btm - btm).abs() < 1e-9);
}

#[test]
fn contrastive_loss_sharpens_on_a_separable_batch() {
    let queries = vec![array![[1.0, 0.1, 0.0]], array![[0.0, 1.0, 0.1]], array![[0.1, 0.0, 1.0]]];
    let texts = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut last = f64::INFINITY;
    for t in [1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01] {
        let l = btc_loss(&batch(queries.clone(), texts.clone(), t)).unwrap();
        assert!(l < last || l == 0.0, "τ={t}: {l} ≥ {last}");
        last = l;
    }
    assert!(last < 1e-20);
}

proptest! {
    #[test]
    fn losses_are_non_negative(seed in 0u64..300, b in 1usize..5) {
        let batch = random_batch(b, 3, 5, seed);
        prop_assert!(btc_loss(&batch).unwrap() >= 0.0);
        let logits = random(b * 4, 6, seed + 7).into_shape_with_order((b, 4, 6)).unwrap();
        let targets = Array2::from_shape_fn((b, 4), |(i, j)| (i + j + seed as usize) % 6);
        prop_assert!(btg_loss(&logits, &targets, &Array2::from_elem((b, 4), true)).unwrap() >= 0.0);
        let z: Vec<f64> = random(1, b, seed + 9).iter().map(|x| x * 5.0).collect();
        let labels: Vec<u8> = (0..b).map(|i| (i % 2) as u8).collect();
        prop_assert!(btm_loss(&z, &labels).unwrap() >= 0.0);
    }

    #[test]
    fn contrastive_loss_ignores_batch_order(seed in 0u64..300) {
        let b = random_batch(4, 3, 5, seed);
        let perm = [2, 0, 3, 1];
        let mut p = b.clone();
        p.query_embeddings = perm.iter().map(|&i| b.query_embeddings[i].clone()).collect();
        p.pooled_text = Array2::from_shape_fn((4, 5), |(i, j)| b.pooled_text[[perm[i], j]]);
        prop_assert!((btc_loss(&b).unwrap() - btc_loss(&p).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn contrastive_loss_ignores_scale(seed in 0u64..300, c in 0.01f64..100.0) {
        let b = random_batch(3, 2, 4, seed);
        let mut s = b.clone();
        s.query_embeddings.iter_mut().for_each(|q| *q *= c);
        s.pooled_text *= c;
        prop_assert!((btc_loss(&b).unwrap() - btc_loss(&s).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn generation_loss_matches_the_oracle(seed in 0u64..300, b in 1usize..4, l in 1usize..6, v in 2usize..9) {
        let logits = (random(b * l, v, seed) * 3.0).into_shape_with_order((b, l, v)).unwrap();
        let targets = Array2::from_shape_fn((b, l), |(i, j)| (i * 7 + j * 3 + seed as usize) % v);
        let keep = (seed as usize % l) + 1;
        let mask = Array2::from_shape_fn((b, l), |(_, j)| j < keep);
        let flat = logits.to_shape((b * l, v)).unwrap().to_owned();
        let t: Vec<usize> = targets.iter().copied().collect();
        let m: Vec<bool> = mask.iter().copied().collect();
        let expected = common::cross_entropy_oracle(&flat, &t, &m);
        prop_assert!((btg_loss(&logits, &targets, &mask).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn matching_loss_matches_the_oracle(z in proptest::collection::vec(-30.0f64..30.0, 1..8)) {
        let labels: Vec<u8> = z.iter().enumerate().map(|(i, _)| (i % 2) as u8).collect();
        prop_assert!((btm_loss(&z, &labels).unwrap() - common::bce_oracle(&z, &labels)).abs() < 1e-9);
    }
}

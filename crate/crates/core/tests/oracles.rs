mod common;

use std::collections::HashSet;

use proptest::prelude::*;

use common::{auc_oracle, metric_oracle_gap, mrr_oracle, ndcg_oracle, topk_oracle_mismatches};
use unirec::encoders::{
    basis_attention, compose_recall_all, compose_recall_top, BasisMemory, TopWeighting,
};
use unirec::evaluation::{brute_force_topk, recall_at_k};
use unirec::numerics::softmax;
use unirec::numerics::Tensor;

#[test]
fn ranking_metrics_agree_with_exhaustive_oracles() {
    assert!(metric_oracle_gap(500, 11) <= 1e-12);
}

#[test]
fn topk_agrees_with_full_sort() {
    assert_eq!(topk_oracle_mismatches(200, 12), 0);
}

#[test]
fn oracles_on_hand_examples() {
    assert_eq!(auc_oracle(&[0.9, 0.1, 0.5], &[1, 0, 0]), Some(1.0));
    assert_eq!(auc_oracle(&[0.5, 0.5], &[1, 0]), Some(0.5));
    assert_eq!(mrr_oracle(&[0.1, 0.9, 0.5], &[1, 0, 0]), Some(1.0 / 3.0));
    let n = ndcg_oracle(&[0.1, 0.9, 0.5], &[1, 0, 0], 10).unwrap();
    assert!((n - 0.5).abs() < 1e-15);
}

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_shift_invariant(x in vec_strategy(6), c in -50.0f64..50.0) {
        let a = softmax(&Tensor::vector(x.clone())).unwrap();
        let b = softmax(&Tensor::vector(x.iter().map(|v| v + c).collect())).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
        prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn basis_slot_permutation_leaves_recall_embedding_unchanged(
        keys in prop::collection::vec(vec_strategy(3), 5),
        values in prop::collection::vec(vec_strategy(3), 5),
        u in vec_strategy(3),
        shift in 1usize..5,
    ) {
        let a = BasisMemory::from_rows(&keys, &values).unwrap();
        let rot = |v: &Vec<Vec<f64>>| {
            let mut v = v.clone();
            v.rotate_left(shift);
            v
        };
        let b = BasisMemory::from_rows(&rot(&keys), &rot(&values)).unwrap();
        let ua = compose_recall_all(&basis_attention(&u, &a).unwrap(), &a).unwrap();
        let ub = compose_recall_all(&basis_attention(&u, &b).unwrap(), &b).unwrap();
        for (x, y) in ua.iter().zip(&ub) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_form_a_distribution(
        keys in prop::collection::vec(vec_strategy(4), 1..12),
        u in vec_strategy(4),
    ) {
        let values = keys.clone();
        let mem = BasisMemory::from_rows(&keys, &values).unwrap();
        let w = basis_attention(&u, &mem).unwrap();
        prop_assert!((w.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(w.alpha.iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn top_one_returns_the_argmax_value(
        keys in prop::collection::vec(vec_strategy(3), 2..8),
        u in vec_strategy(3),
    ) {
        let values: Vec<Vec<f64>> = keys.iter().map(|k| k.iter().map(|x| x * 2.0 + 1.0).collect()).collect();
        let mem = BasisMemory::from_rows(&keys, &values).unwrap();
        let w = basis_attention(&u, &mem).unwrap();
        let best = (0..w.alpha.len()).fold(0, |b, i| if w.alpha[i] > w.alpha[b] { i } else { b });
        let (u_re, _) = compose_recall_top(&w, &mem, 1, TopWeighting::Probabilities).unwrap();
        prop_assert_eq!(u_re, values[best].clone());
    }

    #[test]
    fn recall_is_monotone_in_k(
        pool in prop::collection::vec(-1.0f64..1.0, 40),
        query in vec_strategy(2),
        clicked in prop::collection::hash_set(0usize..20, 1..6),
    ) {
        let clicked: Vec<usize> = clicked.into_iter().collect();
        let mut last = 0.0;
        for k in 0..=20 {
            let top = brute_force_topk(&query, &pool, k, &HashSet::new()).unwrap();
            let r = recall_at_k(&top.ids, &clicked).unwrap();
            prop_assert!(r >= last);
            last = r;
        }
        prop_assert_eq!(last, 1.0);
    }
}

use std::collections::BTreeSet;

use super::*;
use crate::dataset::Dataset;
use crate::fixtures;
use crate::inference::{log_likelihood, Evaluator};
use crate::oracle::{enumerate_subtrees, mixture_eval, DEFAULT_SUBTREE_LIMIT};
use crate::{evaluate, Domain, SpgmMixture};

fn unit(data: &Dataset, alpha: f64) -> WeightedDataset {
    data.weighted(alpha)
}

fn tree_edges(sub: &crate::oracle::Subtree) -> BTreeSet<(usize, usize)> {
    sub.factors
        .iter()
        .filter_map(|f| f.parent.map(|(p, _)| (p.0.min(f.var.0), p.0.max(f.var.0))))
        .collect()
}

/// Three variables where `MI(A,B) > MI(B,C) > MI(A,C)`.
fn chain_data() -> Dataset {
    let pattern: [([u8; 3], usize); 8] = [
        ([0, 0, 0], 30),
        ([1, 1, 1], 30),
        ([0, 0, 1], 8),
        ([1, 1, 0], 8),
        ([0, 1, 1], 6),
        ([1, 0, 0], 6),
        ([0, 1, 0], 1),
        ([1, 0, 1], 1),
    ];
    let mut rows = Vec::new();
    for (r, n) in pattern {
        rows.extend(std::iter::repeat_n(r.to_vec(), n));
    }
    Dataset::from_rows(&rows).unwrap()
}

#[test]
fn no_insertions_is_the_chow_liu_tree() {
    let data = fixtures::random_tree_data(6, 300, 3);
    let cfg = LearnConfig {
        max_insertions: 0,
        ..LearnConfig::default()
    };
    let learned = learn_spgm(&unit(&data, cfg.alpha), &cfg).unwrap();
    assert_eq!(learned.spgm, learned.base_tree);
    assert_eq!(learned.spgm, chow_liu(&unit(&data, cfg.alpha)).unwrap());
    assert_eq!(learned.trace.len(), 1);
}

#[test]
fn one_insertion_adds_exactly_the_swapped_tree() {
    let data = chain_data();
    let w = unit(&data, 0.0);
    let mi = mutual_information(&w).unwrap();
    let base = chow_liu(&w).unwrap();
    for mode in [WeightMode::Em, WeightMode::MiProportional] {
        let s = insert_edge(&base, &base, (0, 2), &mi, mode, &w).unwrap();
        s.ensure_valid().unwrap();
        let subs = enumerate_subtrees(&s, DEFAULT_SUBTREE_LIMIT).unwrap();
        let trees: BTreeSet<_> = subs.iter().map(tree_edges).collect();
        let expected: BTreeSet<BTreeSet<(usize, usize)>> = [
            [(0, 1), (1, 2)].into_iter().collect(),
            [(0, 1), (0, 2)].into_iter().collect(),
        ]
        .into_iter()
        .collect();
        assert_eq!(trees, expected, "{mode}");
    }
}

#[test]
fn repeated_insertion_leaves_the_structure_alone() {
    let data = chain_data();
    let w = unit(&data, 0.01);
    let mi = mutual_information(&w).unwrap();
    let base = chow_liu(&w).unwrap();
    let once = insert_edge(&base, &base, (0, 2), &mi, WeightMode::MiProportional, &w).unwrap();
    let twice = insert_edge(&once, &base, (0, 2), &mi, WeightMode::MiProportional, &w).unwrap();
    assert_eq!(once, twice);
    assert!(matches!(
        insert_edge(&once, &base, (1, 0), &mi, WeightMode::Em, &w),
        Err(Error::EdgeInTree(0, 1))
    ));
}

#[test]
fn insertions_keep_old_trees_and_evaluate_as_their_mixture() {
    let data = fixtures::random_tree_data(6, 400, 11);
    let w = unit(&data, 0.01);
    let mi = mutual_information(&w).unwrap();
    let base = chow_liu(&w).unwrap();
    let tree = RootedTree::of_spgm(&base).unwrap();
    let mut s = base.clone();
    let mut previous: BTreeSet<BTreeSet<(usize, usize)>> =
        [tree.edges().into_iter().collect()].into_iter().collect();
    for (a, b) in [(0, 1), (2, 5), (1, 4), (3, 4), (0, 5), (2, 3)] {
        if tree.has_edge(a, b) {
            continue;
        }
        s = insert_edge(&s, &base, (a, b), &mi, WeightMode::MiProportional, &w).unwrap();
        let trees: BTreeSet<_> = enumerate_subtrees(&s, DEFAULT_SUBTREE_LIMIT)
            .unwrap()
            .iter()
            .map(tree_edges)
            .collect();
        assert!(previous.is_subset(&trees));
        assert!(trees.iter().any(|t| t.contains(&(a, b))));
        previous = trees;
        let ev = crate::Evidence::from_row(&s.model_variables(), data.row(0));
        let direct = evaluate(&s, &ev, Domain::Linear).unwrap();
        let oracle = mixture_eval(&s, &ev, DEFAULT_SUBTREE_LIMIT).unwrap();
        assert!((direct - oracle).abs() <= 1e-12 * direct);
    }
}

#[test]
fn em_insertions_never_lower_the_likelihood() {
    for seed in 0..4 {
        let data = fixtures::random_tree_data(7, 250, seed);
        let cfg = LearnConfig {
            max_insertions: 8,
            weight_mode: WeightMode::Em,
            alpha: 0.01,
        };
        let learned = learn_spgm(&unit(&data, cfg.alpha), &cfg).unwrap();
        for pair in learned.trace.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9, "seed {seed}: {:?}", learned.trace);
        }
        learned.spgm.ensure_valid().unwrap();
    }
}

#[test]
fn learning_is_deterministic() {
    let data = fixtures::random_tree_data(8, 300, 5);
    let cfg = LearnConfig::default();
    let a = learn_spgm(&unit(&data, cfg.alpha), &cfg).unwrap();
    let b = learn_spgm(&unit(&data, cfg.alpha), &cfg).unwrap();
    assert_eq!(a.spgm, b.spgm);
    assert_eq!(a.inserted, b.inserted);
}

#[test]
fn single_component_mixture_is_the_learned_model() {
    let data = fixtures::random_tree_data(6, 200, 8);
    let cfg = EmConfig {
        max_iters: 5,
        ..EmConfig::default()
    };
    let fit = em_mixture(&data, 1, &cfg, None).unwrap();
    let direct = learn_spgm(&unit(&data, cfg.learn.alpha), &cfg.learn).unwrap();
    assert_eq!(fit.mixture.lambdas, vec![1.0]);
    assert_eq!(fit.mixture.components[0], direct.spgm);
}

#[test]
fn identical_components_split_responsibility_evenly() {
    let data = fixtures::random_tree_data(5, 50, 2);
    let tree = chow_liu(&unit(&data, 0.1)).unwrap();
    let mixture = SpgmMixture::new(vec![tree.clone(), tree], vec![0.5, 0.5]).unwrap();
    for g in responsibilities(&mixture, &data).unwrap() {
        assert_eq!(g, vec![0.5, 0.5]);
    }
}

#[test]
fn mixture_em_is_monotone_under_both_weight_modes() {
    let data = fixtures::two_cluster_data(6, 300, 4);
    for mode in [WeightMode::Em, WeightMode::MiProportional] {
        let cfg = EmConfig {
            max_iters: 8,
            tol: 0.0,
            seed: 3,
            learn: LearnConfig {
                max_insertions: 4,
                weight_mode: mode,
                alpha: 0.01,
            },
        };
        let fit = em_mixture(&data, 3, &cfg, None).unwrap();
        for pair in fit.trace.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9, "{mode}: {:?}", fit.trace);
        }
    }
}

#[test]
fn two_clusters_beat_one_component() {
    let train = fixtures::two_cluster_data(8, 1500, 1);
    let test = fixtures::two_cluster_data(8, 1500, 2);
    let cfg = EmConfig {
        learn: LearnConfig {
            max_insertions: 0,
            ..LearnConfig::default()
        },
        ..EmConfig::default()
    };
    let one = em_mixture(&train, 1, &cfg, None).unwrap();
    let two = em_mixture(&train, 2, &cfg, None).unwrap();
    let l1 = log_likelihood(&one.mixture, &test).unwrap().mean;
    let l2 = log_likelihood(&two.mixture, &test).unwrap().mean;
    assert!(l2 > l1 + 0.01, "{l1} vs {l2}");
}

#[test]
fn fine_tune_step_is_monotone_and_maps_back() {
    let data = fixtures::random_tree_data(6, 300, 9);
    let cfg = EmConfig {
        max_iters: 2,
        learn: LearnConfig {
            max_insertions: 3,
            ..LearnConfig::default()
        },
        ..EmConfig::default()
    };
    let fit = em_mixture(&data, 2, &cfg, None).unwrap();
    let tuned = fine_tune(
        &fit.mixture,
        &data,
        None,
        &FineTuneConfig {
            max_iters: 1,
            ..FineTuneConfig::default()
        },
    )
    .unwrap();
    assert_eq!(tuned.trace.len(), 2);
    assert!(tuned.trace[1] >= tuned.trace[0] - 1e-9);
    let after = log_likelihood(&tuned.mixture, &data).unwrap().mean;
    assert!((after - tuned.trace[1]).abs() < 1e-12);

    // the round trip through the circuit keeps every density
    let spn = crate::spn::compile_mixture(&tuned.mixture.components, &tuned.mixture.lambdas).unwrap();
    let back = fine_tune::mixture_from_spn(&spn, &tuned.mixture).unwrap();
    assert_eq!(back, tuned.mixture);
}

#[test]
fn fine_tune_at_a_fixed_point_changes_nothing() {
    // a tree with maximum-likelihood tables is an EM fixed point
    let data = fixtures::random_tree_data(5, 200, 12);
    let tree = chow_liu(&unit(&data, 0.0)).unwrap();
    let mixture = SpgmMixture::single(tree);
    let tuned = fine_tune(
        &mixture,
        &data,
        None,
        &FineTuneConfig {
            max_iters: 3,
            ..FineTuneConfig::default()
        },
    )
    .unwrap();
    let (a, b) = (&mixture.components[0], &tuned.mixture.components[0]);
    for (key, cpt) in a.pairwise() {
        for (x, y) in cpt.values().iter().zip(b.pairwise()[key].values()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
    for (key, u) in a.unary() {
        for (x, y) in u.iter().zip(&b.unary()[key]) {
            assert!((x - y).abs() < 1e-9);
        }
    }
    let _ = Evaluator::new(b).unwrap();
}

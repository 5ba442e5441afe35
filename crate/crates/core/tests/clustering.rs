use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uqkit::clustering::{dbscan, make_cluster_splits, ClusterLabels, LabelSource, NOISE};
use uqkit::dataset::Dataset;

fn dist(x: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    (x.row(i) - x.row(j)).norm()
}

/// Core points by direct counting.
fn core_points(x: &DMatrix<f64>, eps: f64, min_pts: usize) -> Vec<bool> {
    (0..x.nrows())
        .map(|i| (0..x.nrows()).filter(|&j| dist(x, i, j) <= eps).count() >= min_pts)
        .collect()
}

fn dummy_dataset(n: usize) -> Dataset {
    Dataset::new(
        (0..n).map(|i| format!("r{i}")).collect(),
        DMatrix::from_fn(n, 1, |i, _| i as f64),
        vec!["x".into()],
        DVector::from_fn(n, |i, _| i as f64),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dbscan_agrees_with_brute_force_core_points(
        n in 5usize..300,
        seed in any::<u64>(),
        eps in 0.05f64..0.4,
        min_pts in 2usize..8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let labels = dbscan(&x, eps, min_pts).unwrap();
        let core = core_points(&x, eps, min_pts);
        for i in 0..n {
            if core[i] {
                prop_assert!(labels.labels[i] >= 0);
                // all core neighbours share the label
                for j in 0..n {
                    if core[j] && dist(&x, i, j) <= eps {
                        prop_assert_eq!(labels.labels[i], labels.labels[j]);
                    }
                }
            } else {
                let near_core: Vec<usize> = (0..n).filter(|&j| core[j] && dist(&x, i, j) <= eps).collect();
                if near_core.is_empty() {
                    prop_assert_eq!(labels.labels[i], NOISE);
                } else {
                    // a border point takes the label of one of its core neighbours
                    prop_assert!(near_core.iter().any(|&j| labels.labels[j] == labels.labels[i]));
                }
            }
        }
        // labels are contiguous and every cluster contains a core point
        for c in 0..labels.k as i64 {
            prop_assert!(labels.members(c).iter().any(|&i| core[i]));
        }
    }
}

#[test]
fn well_separated_blobs_give_two_clusters() {
    let eps = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = DMatrix::from_fn(80, 3, |i, _| {
        let c = if i < 40 { 0.0 } else { 10.0 * eps };
        c + (rng.random::<f64>() - 0.5) * 0.3
    });
    let labels = dbscan(&x, eps, 4).unwrap();
    assert_eq!(labels.k, 2);
    assert!(labels.labels[..40].iter().all(|&l| l == 0));
    assert!(labels.labels[40..].iter().all(|&l| l == 1));
}

fn labelled(n_per: &[usize]) -> (Dataset, ClusterLabels) {
    let mut raw = Vec::new();
    // interleave cluster membership so rows are not grouped
    let total: usize = n_per.iter().sum();
    let mut remaining = n_per.to_vec();
    let mut c = 0;
    while raw.len() < total {
        if remaining[c] > 0 {
            raw.push(c as i64);
            remaining[c] -= 1;
        }
        c = (c + 1) % n_per.len();
    }
    raw[0] = NOISE;
    (dummy_dataset(total), ClusterLabels::new(raw, LabelSource::External).unwrap())
}

#[test]
fn split_invariants_hold() {
    let (data, labels) = labelled(&[60, 45, 30, 5]);
    let splits = make_cluster_splits(&data, &labels, 20, 5, 10, 42).unwrap();
    assert_eq!(splits.len(), 3);
    let eligible: BTreeSet<i64> = splits.iter().map(|s| s.train_cluster).collect();
    for s in &splits {
        assert_eq!(s.train_idx.len(), 20);
        assert_eq!(s.valid_idx.len(), 5);
        let train: BTreeSet<usize> = s.train_idx.iter().copied().collect();
        let valid: BTreeSet<usize> = s.valid_idx.iter().copied().collect();
        let test: BTreeSet<usize> = s.test_idx.iter().copied().collect();
        assert!(train.is_disjoint(&valid) && train.is_disjoint(&test) && valid.is_disjoint(&test));
        for &i in train.iter().chain(&valid) {
            assert_eq!(labels.labels[i], s.train_cluster);
        }
        for &i in &test {
            assert_ne!(labels.labels[i], s.train_cluster);
            assert!(eligible.contains(&labels.labels[i]));
        }
        let expected_test: usize = splits
            .iter()
            .filter(|o| o.train_cluster != s.train_cluster)
            .map(|o| labels.members(o.train_cluster).len())
            .sum();
        assert_eq!(test.len(), expected_test);
        assert!(!train.contains(&0) && !test.contains(&0));
        let holdout = s.holdout_idx(&labels);
        assert_eq!(holdout.len() + 25, labels.members(s.train_cluster).len());
    }
    assert_eq!(make_cluster_splits(&data, &labels, 20, 5, 10, 42).unwrap(), splits);
}

#[test]
fn relabeling_permutes_splits_without_changing_rows() {
    let (data, labels) = labelled(&[50, 40, 30]);
    let splits = make_cluster_splits(&data, &labels, 10, 5, 1, 7).unwrap();
    let perm = [2i64, 0, 1];
    let relabeled = ClusterLabels::new(
        labels.labels.iter().map(|&l| if l < 0 { l } else { perm[l as usize] }).collect(),
        LabelSource::External,
    )
    .unwrap();
    let resplit = make_cluster_splits(&data, &relabeled, 10, 5, 1, 7).unwrap();
    let key = |s: &uqkit::clustering::SplitSpec| (s.train_idx.clone(), s.valid_idx.clone(), s.test_idx.clone());
    let a: BTreeSet<_> = splits.iter().map(key).collect();
    let b: BTreeSet<_> = resplit.iter().map(key).collect();
    assert_eq!(a, b);
}

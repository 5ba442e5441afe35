use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uqkit::dataset::{
    generate_synthetic, load_dataset, rank_correlated_features, save_dataset, standardize, CsvSchema, Dataset,
    SyntheticConfig,
};

fn random_dataset(seed: u64, n: usize, d: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 2e3 - 1e3);
    let y = DVector::from_fn(n, |i, _| x[(i, 0)] * 0.5 + rng.random::<f64>() * 1e-7);
    Dataset::new(
        (0..n).map(|i| format!("row-{i}")).collect(),
        x,
        (0..d).map(|j| format!("x{j}")).collect(),
        y,
    )
    .unwrap()
}

#[test]
fn csv_round_trip_is_bit_identical() {
    let data = random_dataset(11, 50, 10);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    save_dataset(&data, &path).unwrap();
    let back = load_dataset(&path, &CsvSchema::default()).unwrap();
    assert_eq!(back.ids(), data.ids());
    assert_eq!(back.feature_names(), data.feature_names());
    for (a, b) in back.features().iter().zip(data.features().iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    for (a, b) in back.target().iter().zip(data.target().iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn custom_schema_columns_are_found_anywhere() {
    let csv = "x1,name,x2,y\n1,a,2,3\n4,b,5,6\n";
    let schema = CsvSchema {
        id_column: "name".into(),
        target_column: "y".into(),
    };
    let d = uqkit::dataset::read_dataset(csv.as_bytes(), &schema).unwrap();
    assert_eq!(d.feature_names(), &["x1", "x2"]);
    assert_eq!(d.features()[(1, 1)], 5.0);
    assert_eq!(d.target()[0], 3.0);
}

fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[test]
fn correlation_ranking_matches_direct_pearson() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100;
    let d = 20;
    let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>());
    let y = DVector::from_fn(n, |i, _| (0..d).map(|j| x[(i, j)] * (j as f64 - 9.5)).sum::<f64>() + rng.random::<f64>());
    let names: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    let data = Dataset::new((0..n).map(|i| i.to_string()).collect(), x.clone(), names, y.clone()).unwrap();
    let ranking = rank_correlated_features(&data, 0.0);
    assert_eq!(ranking.entries.len(), d);
    for e in &ranking.entries {
        let j: usize = e.feature[1..].parse().unwrap();
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let r = naive_pearson(&col, y.as_slice());
        assert!((r - e.pearson_r).abs() < 1e-12, "{}: {r} vs {}", e.feature, e.pearson_r);
    }
    for w in ranking.entries.windows(2) {
        assert!(w[0].pearson_r.abs() >= w[1].pearson_r.abs());
    }
    let strict = rank_correlated_features(&data, 0.3);
    assert!(strict.entries.iter().all(|e| e.pearson_r.abs() > 0.3));
    let empty = rank_correlated_features(&data, 1.0);
    assert!(empty.entries.is_empty());
}

#[test]
fn synthetic_is_seeded_and_shaped() {
    let cfg = SyntheticConfig::default();
    let (a, la) = generate_synthetic(&cfg).unwrap();
    let (b, lb) = generate_synthetic(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(a.n_rows(), 1200);
    assert_eq!(a.n_features(), 10);
    for k in 0..4 {
        assert_eq!(la.iter().filter(|&&l| l == k).count(), 300);
    }
    let (c, _) = generate_synthetic(&SyntheticConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.features(), c.features());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn standardized_columns_have_zero_mean_unit_std(
        n in 2usize..40,
        d in 1usize..6,
        seed in any::<u64>(),
        scale in 1e-3f64..1e3,
        shift in -1e3f64..1e3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| shift + scale * rng.random::<f64>());
        let data = Dataset::new(
            (0..n).map(|i| i.to_string()).collect(),
            x.clone(),
            (0..d).map(|j| format!("c{j}")).collect(),
            DVector::zeros(n),
        ).unwrap();
        let (z, params) = standardize(&data).unwrap();
        for j in 0..d {
            let col: Vec<f64> = z.features().column(j).iter().copied().collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            if params.constant[j] {
                prop_assert!(col.iter().all(|&v| v == 0.0));
            } else {
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((var - 1.0).abs() < 1e-9);
            }
        }
        let back = params.inverse_transform(z.features()).unwrap();
        for (a, b) in back.iter().zip(x.iter()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
}

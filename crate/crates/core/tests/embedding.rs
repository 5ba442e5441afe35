use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uqkit::embedding::{joint_probabilities, pca, tsne, TsneConfig};

/// Cyclic Jacobi eigenvalue iteration for a symmetric matrix.
fn jacobi_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

#[test]
fn pca_variances_match_covariance_eigenvalues() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = DMatrix::from_fn(50, 8, |_, j| rng.random::<f64>() * (1.0 + j as f64));
    let n = x.nrows() as f64;
    let mean = x.row_mean();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    let cov = c.transpose() * &c / n;
    let oracle = jacobi_eigenvalues(&cov);

    let res = pca(&x, 8).unwrap();
    for (a, b) in res.explained_variance.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
    assert!(res.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    let gram = res.basis.transpose() * &res.basis;
    assert!((gram - DMatrix::<f64>::identity(8, 8)).amax() < 1e-8);
    // total variance preserved at full rank
    let total: f64 = (0..8).map(|j| cov[(j, j)]).sum();
    assert!((res.explained_variance.iter().sum::<f64>() - total).abs() < 1e-10);
    // projection = centered data x basis
    assert!((&c * &res.basis - &res.embedding.coordinates).amax() < 1e-12);
}

pub fn two_blobs() -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    DMatrix::from_fn(20, 5, |i, _| {
        let center = if i < 10 { 0.0 } else { 20.0 };
        center + rng.random::<f64>() - 0.5
    })
}

fn kl_direct(p: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let n = y.nrows();
    let w = |i: usize, j: usize| 1.0 / (1.0 + (y.row(i) - y.row(j)).norm_squared());
    let z: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| w(i, j)).sum();
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j && p[(i, j)] > 0.0 {
                kl += p[(i, j)] * (p[(i, j)] / (w(i, j) / z)).ln();
            }
        }
    }
    kl
}

#[test]
fn tsne_separates_two_blobs() {
    let x = two_blobs();
    let cfg = TsneConfig {
        perplexity: 5.0,
        seed: 9,
        ..Default::default()
    };
    let emb = tsne(&x, &cfg).unwrap();
    let trace = &emb.objective_trace;
    assert_eq!(trace.len(), cfg.iterations + 1);
    assert!(trace.last().unwrap() < &trace[0]);

    // The recorded final KL is the KL definition evaluated on the output layout.
    let (p, _) = joint_probabilities(&x, 5.0).unwrap();
    assert!((kl_direct(&p, &emb.coordinates) - trace.last().unwrap()).abs() < 1e-10);

    let y = &emb.coordinates;
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
    for i in 0..20 {
        for j in (i + 1)..20 {
            let d = (y.row(i) - y.row(j)).norm();
            if (i < 10) == (j < 10) {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                nx += 1;
            }
        }
    }
    let ratio = (inter / nx as f64) / (intra / ni as f64);
    assert!(ratio > 2.0, "ratio {ratio}");

    let again = tsne(&x, &cfg).unwrap();
    assert_eq!(again.coordinates, emb.coordinates);
    assert_eq!(again.objective_trace, emb.objective_trace);
}

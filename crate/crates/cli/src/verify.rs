//! Recompute the report's R² matrix and removal curves from the per-point
//! CSVs with a deliberately plain implementation, and require agreement
//! with the written files to 1e-12.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use uqkit::evaluation::{read_r2_matrix_csv, read_removal_curve_csv};

use crate::error::{CliError, Result, StageContext};
use crate::pipeline::{read_rows, CrossRow, ScoreRow};

pub const TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub matrix_entries: usize,
    pub curves: usize,
    pub max_abs_deviation: f64,
}

fn plain_r2(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mut ss_tot = 0.0;
    let mut ss_res = 0.0;
    for &(y, p) in pairs {
        ss_tot += (y - mean) * (y - mean);
        ss_res += (y - p) * (y - p);
    }
    (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot)
}

/// `(fraction_removed, r2, n_remaining)` by repeatedly dropping the next
/// `ceil(step * n)` most uncertain points (earlier rows first on ties).
fn plain_curve(points: &[(f64, f64, f64)], step: f64, min_remaining: usize) -> Vec<(f64, Option<f64>, usize)> {
    let n = points.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[b].0.total_cmp(&points[a].0).then(a.cmp(&b)));
    let chunk = ((step * n as f64).ceil() as usize).max(1);
    let floor = min_remaining.max(2);
    let mut out = Vec::new();
    let mut removed = 0;
    loop {
        let mut kept: Vec<usize> = order[removed..].to_vec();
        kept.sort_unstable();
        let pairs: Vec<(f64, f64)> = kept.iter().map(|&i| (points[i].1, points[i].2)).collect();
        out.push((removed as f64 / n as f64, plain_r2(&pairs), n - removed));
        removed += chunk;
        if removed > n || n - removed < floor {
            break;
        }
    }
    out
}

fn mismatch(what: String) -> CliError {
    CliError::Verify(what)
}

fn check(label: &str, expected: Option<f64>, got: Option<f64>, worst: &mut f64) -> Result<()> {
    match (expected, got) {
        (None, None) => Ok(()),
        (Some(a), Some(b)) if (a - b).abs() <= TOLERANCE => {
            *worst = worst.max((a - b).abs());
            Ok(())
        }
        _ => Err(mismatch(format!("{label}: recomputed {expected:?}, file has {got:?}"))),
    }
}

pub fn verify_outputs(out: &Path, curves: &[&str], step: f64, min_remaining: usize) -> Result<VerifyReport> {
    const STAGE: &str = "verify";
    let eval = out.join("eval");
    let mut report = VerifyReport::default();
    let mut worst = 0.0f64;

    let matrix = read_r2_matrix_csv(eval.join("r2_matrix.csv")).stage(STAGE)?;
    let cross: Vec<CrossRow> = read_rows(&eval.join("cross_predictions.csv"), STAGE)?;
    let mut groups: BTreeMap<(usize, i64), Vec<(f64, f64)>> = BTreeMap::new();
    for r in &cross {
        groups.entry((r.split, r.eval_cluster)).or_default().push((r.y, r.yhat));
    }
    for i in 0..matrix.size() {
        for (j, &cluster) in matrix.clusters.iter().enumerate() {
            let recomputed = groups.get(&(i, cluster)).and_then(|p| plain_r2(p));
            check(&format!("r2_matrix[{i}][{j}]"), recomputed, matrix.get(i, j), &mut worst)?;
            report.matrix_entries += 1;
        }
    }

    let scores: Vec<ScoreRow> = read_rows(&eval.join("uq_scores.csv"), STAGE)?;
    let mut by_split: BTreeMap<usize, Vec<&ScoreRow>> = BTreeMap::new();
    for r in &scores {
        by_split.entry(r.split).or_default().push(r);
    }
    for (k, rows) in &by_split {
        for name in curves {
            let pts = rows
                .iter()
                .map(|r| {
                    r.curve_score(name)
                        .map(|u| (u, r.y, r.yhat))
                        .ok_or_else(|| mismatch(format!("split {k}: no {name} score for {}", r.id)))
                })
                .collect::<Result<Vec<_>>>()?;
            let expected = plain_curve(&pts, step, min_remaining);
            let path = eval.join(format!("split_{k}")).join(format!("removal_curve_{name}.csv"));
            let written = read_removal_curve_csv(&path).stage(STAGE)?;
            if written.len() != expected.len() {
                return Err(mismatch(format!(
                    "{}: {} points, recomputed {}",
                    path.display(),
                    written.len(),
                    expected.len()
                )));
            }
            for (e, w) in expected.iter().zip(&written) {
                if e.2 != w.n_remaining || e.0 != w.fraction_removed {
                    return Err(mismatch(format!("{}: removal schedule differs", path.display())));
                }
                check(&format!("{} at n={}", path.display(), e.2), e.1, Some(w.r2), &mut worst)?;
            }
            report.curves += 1;
        }
    }
    report.max_abs_deviation = worst;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_curve_matches_hand_values() {
        let pts = [(4.0, 1.0, 4.0), (3.0, 2.0, 2.5), (2.0, 3.0, 3.0), (1.0, 4.0, 4.5)];
        let c = plain_curve(&pts, 0.25, 2);
        let r2: Vec<f64> = c.iter().map(|p| p.1.unwrap()).collect();
        assert_eq!(c.len(), 3);
        assert!((r2[0] + 0.9).abs() < 1e-15);
        assert!((r2[1] - 0.75).abs() < 1e-15);
        assert!((r2[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn plain_r2_edge_cases() {
        assert_eq!(plain_r2(&[(1.0, 1.0)]), None);
        assert_eq!(plain_r2(&[(1.0, 0.0), (1.0, 2.0)]), None);
        assert_eq!(plain_r2(&[(1.0, 1.0), (2.0, 2.0)]), Some(1.0));
    }
}

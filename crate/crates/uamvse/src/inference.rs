//! View-score aggregation and the optimized matching strategy: temperature
//! scaled softmax normalization of the similarity matrix along columns
//! and/or rows, which suppresses hub candidates at inference time, plus an
//! exhaustive validation-set temperature search.
//!
//! Score matrices travel as CSV (row = image, column = caption, `f64`
//! decimal text in shortest round-trip form) for interoperability.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::loss::SimilarityTensor;
use crate::numerics::{softmax_scaled, Mat};
use crate::{Error, Result};

/// Which softmax steps run, and in what sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormOrder {
    #[default]
    RowThenCol,
    ColThenRow,
    RowOnly,
    ColOnly,
    None,
}

/// All orders, with the identity transform first so exhaustive searches
/// prefer it on ties.
pub const ALL_ORDERS: [NormOrder; 5] = [
    NormOrder::None,
    NormOrder::RowThenCol,
    NormOrder::ColThenRow,
    NormOrder::RowOnly,
    NormOrder::ColOnly,
];

/// Inference-time normalization temperatures and step order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationConfig {
    pub tau_col: f64,
    pub tau_row: f64,
    pub order: NormOrder,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        Self {
            tau_col: 20.0,
            tau_row: 170.0,
            order: NormOrder::RowThenCol,
        }
    }
}

/// Aggregated image x caption similarities; `normalized` records whether a
/// softmax step has been applied (raw cosine means lie in [-1, 1],
/// normalized entries in (0, 1)).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub values: Mat,
    pub normalized: bool,
}

/// Mean of the per-view scores: `A[i][j] = (1/K) sum_k scores[k][i][j]`.
pub fn aggregate_scores(s: &SimilarityTensor) -> ScoreMatrix {
    let (n, m, k) = (s.n_images(), s.n_texts(), s.views());
    let mut values = Mat::zeros(n, m);
    for view in 0..k {
        let slice = s.view_slice(view);
        for (o, &v) in values.data_mut().iter_mut().zip(slice) {
            *o += v;
        }
    }
    let inv = 1.0 / k as f64;
    for o in values.data_mut() {
        *o *= inv;
    }
    ScoreMatrix {
        values,
        normalized: false,
    }
}

fn softmax_rows(m: &Mat, tau: f64) -> Result<Mat> {
    let mut out = Mat::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let soft = softmax_scaled(m.row(r), tau)?;
        out.row_mut(r).copy_from_slice(&soft);
    }
    Ok(out)
}

fn softmax_cols(m: &Mat, tau: f64) -> Result<Mat> {
    let mut out = Mat::zeros(m.rows(), m.cols());
    let mut col = vec![0.0; m.rows()];
    for c in 0..m.cols() {
        for (r, v) in col.iter_mut().enumerate() {
            *v = m.get(r, c);
        }
        let soft = softmax_scaled(&col, tau)?;
        for (r, &v) in soft.iter().enumerate() {
            out.set(r, c, v);
        }
    }
    Ok(out)
}

/// Softmax normalization per the config: the column step replaces each
/// column by `softmax(column / tau_col)` over images, the row step each row
/// by `softmax(row / tau_row)` over captions, applied in `cfg.order`. Both
/// steps preserve the ordering along their own axis; the cross-axis effect
/// is what rescues positives from hub rows.
pub fn normalize_matrix(a: &ScoreMatrix, cfg: &NormalizationConfig) -> Result<ScoreMatrix> {
    if a.values.rows() == 0 || a.values.cols() == 0 {
        return Err(Error::EmptyInput {
            op: "normalize_matrix",
        });
    }
    if !(cfg.tau_col > 0.0) || !(cfg.tau_row > 0.0) {
        return Err(Error::InvalidArg {
            op: "normalize_matrix",
            msg: format!(
                "temperatures must be positive, got tau_col={} tau_row={}",
                cfg.tau_col, cfg.tau_row
            ),
        });
    }
    let values = match cfg.order {
        NormOrder::None => return Ok(a.clone()),
        NormOrder::RowOnly => softmax_rows(&a.values, cfg.tau_row)?,
        NormOrder::ColOnly => softmax_cols(&a.values, cfg.tau_col)?,
        NormOrder::RowThenCol => softmax_cols(&softmax_rows(&a.values, cfg.tau_row)?, cfg.tau_col)?,
        NormOrder::ColThenRow => softmax_rows(&softmax_cols(&a.values, cfg.tau_col)?, cfg.tau_row)?,
    };
    Ok(ScoreMatrix {
        values,
        normalized: true,
    })
}

/// Exhaustive search over `(tau_row, tau_col, order)` maximizing RSUM on a
/// validation score matrix; ties prefer the smaller row temperature, then
/// the smaller column temperature, then the earlier order in the list.
pub fn grid_search_temperatures(
    a_val: &ScoreMatrix,
    caption_to_image: &[usize],
    grid: &[f64],
    orders: &[NormOrder],
) -> Result<(NormalizationConfig, f64)> {
    if grid.is_empty() {
        return Err(Error::EmptyInput {
            op: "grid_search_temperatures",
        });
    }
    if orders.is_empty() {
        return Err(Error::EmptyInput {
            op: "grid_search_temperatures",
        });
    }
    let mut taus = grid.to_vec();
    taus.sort_by(|a, b| a.partial_cmp(b).expect("finite temperatures"));
    let mut best: Option<(NormalizationConfig, f64)> = None;
    for &tau_row in &taus {
        for &tau_col in &taus {
            for &order in orders {
                let cfg = NormalizationConfig {
                    tau_col,
                    tau_row,
                    order,
                };
                let normed = normalize_matrix(a_val, &cfg)?;
                let rsum = crate::eval::report(&normed.values, caption_to_image)?.rsum;
                let better = match &best {
                    Some((_, best_rsum)) => rsum > *best_rsum,
                    None => true,
                };
                if better {
                    best = Some((cfg, rsum));
                }
            }
        }
    }
    Ok(best.expect("grid and orders are non-empty"))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

/// Writes the matrix as comma-separated `f64` text, one image per line.
/// The default float formatting round-trips exactly.
pub fn write_scores_csv(path: &Path, scores: &ScoreMatrix) -> Result<()> {
    let mut out = String::new();
    let m = &scores.values;
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Reads a CSV score matrix; imported matrices are treated as raw.
pub fn read_scores_csv(path: &Path) -> Result<ScoreMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: path.display().to_string(),
                    msg: format!("line {}: cannot parse \"{tok}\" as a float", lineno + 1),
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    msg: format!(
                        "line {}: {} columns, expected {}",
                        lineno + 1,
                        row.len(),
                        first.len()
                    ),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            msg: "no rows".to_string(),
        });
    }
    Ok(ScoreMatrix {
        values: Mat::from_rows(&rows)?,
        normalized: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "expected {b}, got {a}");
    }

    fn tensor(views: usize, n: usize, m: usize, scores: Vec<f64>) -> SimilarityTensor {
        SimilarityTensor::new(views, n, m, scores).unwrap()
    }

    #[test]
    fn aggregate_single_view_is_identity() {
        let s = tensor(1, 2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let a = aggregate_scores(&s);
        assert_eq!(a.values.data(), &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert!(!a.normalized);
    }

    #[test]
    fn aggregate_opposite_views_cancel() {
        let x = vec![0.3, -0.4, 0.5, 0.6];
        let mut scores = x.clone();
        scores.extend(x.iter().map(|v| -v));
        let a = aggregate_scores(&tensor(2, 2, 2, scores));
        for &v in a.values.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn aggregate_two_views_averages() {
        let a = aggregate_scores(&tensor(2, 1, 1, vec![0.2, 0.6]));
        approx(a.values.get(0, 0), 0.4, 1e-15);
    }

    #[test]
    fn aggregate_is_linear() {
        let mut rng = Rng::from_seed(30);
        let scores: Vec<f64> = (0..3 * 4 * 2).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let scaled: Vec<f64> = scores.iter().map(|v| 3.5 * v).collect();
        let a = aggregate_scores(&tensor(3, 4, 2, scores));
        let b = aggregate_scores(&tensor(3, 4, 2, scaled));
        for (x, y) in a.values.data().iter().zip(b.values.data()) {
            approx(3.5 * x, *y, 1e-12);
        }
    }

    fn raw(values: Mat) -> ScoreMatrix {
        ScoreMatrix {
            values,
            normalized: false,
        }
    }

    #[test]
    fn column_normalization_derived_example() {
        // Direct softmax evaluation of [[0.9, 0.8], [0.1, 0.85]] per column
        // at tau 0.1.
        let a = raw(Mat::from_rows(&[vec![0.9, 0.8], vec![0.1, 0.85]]).unwrap());
        let cfg = NormalizationConfig {
            tau_col: 0.1,
            tau_row: 1.0,
            order: NormOrder::ColOnly,
        };
        let b = normalize_matrix(&a, &cfg).unwrap();
        let c0_top = 1.0 / (1.0 + (-8.0f64).exp());
        let c1_top = (-0.5f64).exp() / (1.0 + (-0.5f64).exp());
        approx(b.values.get(0, 0), c0_top, 1e-12);
        approx(b.values.get(1, 0), 1.0 - c0_top, 1e-12);
        approx(b.values.get(0, 1), c1_top, 1e-12);
        approx(b.values.get(1, 1), 1.0 - c1_top, 1e-12);
        approx(b.values.get(0, 0), 0.99966, 1e-4);
        approx(b.values.get(0, 1), 0.3775, 1e-4);
        approx(b.values.get(1, 1), 0.6225, 1e-4);
        assert!(b.normalized);
    }

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Mat {
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, rng.uniform(-1.0, 1.0));
            }
        }
        m
    }

    #[test]
    fn normalization_sums_and_order_preservation() {
        let mut rng = Rng::from_seed(31);
        for _ in 0..200 {
            let rows = 2 + rng.below(6);
            let cols = 2 + rng.below(6);
            let a = raw(random_matrix(&mut rng, rows, cols));
            let tau = rng.uniform(0.05, 30.0);
            let col = normalize_matrix(
                &a,
                &NormalizationConfig {
                    tau_col: tau,
                    tau_row: 1.0,
                    order: NormOrder::ColOnly,
                },
            )
            .unwrap();
            for c in 0..cols {
                let sum: f64 = (0..rows).map(|r| col.values.get(r, c)).sum();
                approx(sum, 1.0, 1e-12);
                for r1 in 0..rows {
                    for r2 in 0..rows {
                        if a.values.get(r1, c) > a.values.get(r2, c) {
                            assert!(col.values.get(r1, c) > col.values.get(r2, c));
                        }
                    }
                }
            }
            let row = normalize_matrix(
                &a,
                &NormalizationConfig {
                    tau_col: 1.0,
                    tau_row: tau,
                    order: NormOrder::RowOnly,
                },
            )
            .unwrap();
            for r in 0..rows {
                let sum: f64 = row.values.row(r).iter().sum();
                approx(sum, 1.0, 1e-12);
            }
            // Entries stay inside (0, 1) and finite.
            for &v in col.values.data().iter().chain(row.values.data()) {
                assert!(v.is_finite() && v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn equal_inputs_normalize_to_uniform() {
        let a = raw(Mat::from_rows(&[vec![0.5; 4]; 5]).unwrap());
        let b = normalize_matrix(
            &a,
            &NormalizationConfig {
                tau_col: 2.0,
                tau_row: 1.0,
                order: NormOrder::ColOnly,
            },
        )
        .unwrap();
        for &v in b.values.data() {
            approx(v, 0.2, 1e-15);
        }
    }

    #[test]
    fn order_none_is_identity() {
        let mut rng = Rng::from_seed(32);
        let a = raw(random_matrix(&mut rng, 3, 4));
        let cfg = NormalizationConfig {
            order: NormOrder::None,
            ..NormalizationConfig::default()
        };
        let b = normalize_matrix(&a, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn normalize_rejects_degenerate_inputs() {
        let empty = raw(Mat::zeros(0, 3));
        assert!(normalize_matrix(&empty, &NormalizationConfig::default()).is_err());
        let a = raw(Mat::zeros(2, 2));
        let bad = NormalizationConfig {
            tau_col: 0.0,
            ..NormalizationConfig::default()
        };
        assert!(normalize_matrix(&a, &bad).is_err());
    }

    /// Within-row rank of the diagonal entry, 1-based, ties to lower column.
    fn row_rank_of_diagonal(m: &Mat, row: usize) -> usize {
        let pos = m.get(row, row);
        1 + (0..m.cols())
            .filter(|&c| {
                c != row && (m.get(row, c) > pos || (m.get(row, c) == pos && c < row))
            })
            .count()
    }

    pub(crate) fn hub_fixture() -> Mat {
        // Row 0 is a hub: inflated similarity to every caption, swamping its
        // own positive. Other rows have clean diagonals.
        let mut m = Mat::zeros(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                m.set(i, j, if i == j { 0.9 } else { 0.1 });
            }
        }
        for j in 1..5 {
            m.set(0, j, 0.92);
        }
        m
    }

    #[test]
    fn column_normalization_rescues_hub_row_positive() {
        let a = raw(hub_fixture());
        let before = row_rank_of_diagonal(&a.values, 0);
        assert_eq!(before, 5);
        let b = normalize_matrix(
            &a,
            &NormalizationConfig {
                tau_col: 0.1,
                tau_row: 1.0,
                order: NormOrder::ColOnly,
            },
        )
        .unwrap();
        let after = row_rank_of_diagonal(&b.values, 0);
        assert!(
            after < before,
            "rank did not improve: {before} -> {after}"
        );
        assert_eq!(after, 1);
    }

    #[test]
    fn grid_search_singleton_returns_that_point() {
        let a = raw(Mat::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap());
        let (cfg, rsum) =
            grid_search_temperatures(&a, &[0, 1], &[7.5], &[NormOrder::ColOnly]).unwrap();
        assert_eq!(cfg.tau_row, 7.5);
        assert_eq!(cfg.tau_col, 7.5);
        assert_eq!(cfg.order, NormOrder::ColOnly);
        assert_eq!(rsum, 600.0);
    }

    #[test]
    fn grid_search_prefers_none_when_nothing_helps() {
        // Perfect diagonal ranking: every config ties at RSUM 600, so the
        // tie-break lands on the identity transform listed first.
        let mut m = Mat::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                m.set(i, j, if i == j { 0.9 } else { 0.1 });
            }
        }
        let (cfg, rsum) =
            grid_search_temperatures(&raw(m), &[0, 1, 2, 3], &[0.1, 1.0, 20.0], &ALL_ORDERS)
                .unwrap();
        assert_eq!(rsum, 600.0);
        assert_eq!(cfg.order, NormOrder::None);
        assert_eq!(cfg.tau_row, 0.1);
        assert_eq!(cfg.tau_col, 0.1);
    }

    #[test]
    fn grid_search_improves_hub_matrix() {
        let a = raw(hub_fixture());
        let gt: Vec<usize> = (0..5).collect();
        let raw_rsum = crate::eval::report(&a.values, &gt).unwrap().rsum;
        let (best_cfg, best_rsum) = grid_search_temperatures(
            &a,
            &gt,
            &[0.01, 0.1, 1.0, 10.0, 20.0, 170.0, 200.0],
            &ALL_ORDERS,
        )
        .unwrap();
        assert!(best_rsum >= raw_rsum);
        assert!(best_rsum > raw_rsum, "expected strict gain, got {best_cfg:?}");
    }

    #[test]
    fn grid_search_rejects_empty_grid() {
        let a = raw(Mat::zeros(2, 2));
        assert!(grid_search_temperatures(&a, &[0, 1], &[], &ALL_ORDERS).is_err());
    }

    #[test]
    fn csv_round_trip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::from_seed(33);
        let a = raw(random_matrix(&mut rng, 4, 7));
        let path = dir.path().join("scores.csv");
        write_scores_csv(&path, &a).unwrap();
        let b = read_scores_csv(&path).unwrap();
        for (x, y) in a.values.data().iter().zip(b.values.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // Re-writing the parsed matrix reproduces the file byte for byte.
        let path2 = dir.path().join("scores2.csv");
        write_scores_csv(&path2, &b).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn csv_rejects_ragged_and_garbage_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "1.0,2.0\n3.0\n").unwrap();
        assert!(read_scores_csv(&path).is_err());
        std::fs::write(&path, "1.0,abc\n").unwrap();
        assert!(read_scores_csv(&path).is_err());
    }
}

//! Bidirectional retrieval metrics over a score matrix with multiple
//! captions per image: Recall@{1,5,10}, RSUM, and median ranks.
//!
//! Ranks are 1-based. Ties break by ascending candidate index so results
//! are deterministic and platform-stable. An image query succeeds when any
//! of its captions ranks inside the cutoff; a caption query when its
//! ground-truth image does. Report JSON:
//! `{"i2t": {"r1", "r5", "r10", "medr"}, "t2i": {...}, "rsum"}`.

use serde::{Deserialize, Serialize};

use crate::numerics::Mat;
use crate::{Error, Result};

/// Recalls (percentages) and median rank for one retrieval direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub medr: f64,
}

/// The full bidirectional report; `rsum` is the sum of all six recalls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub i2t: DirectionReport,
    pub t2i: DirectionReport,
    pub rsum: f64,
}

fn validate(a: &Mat, caption_to_image: &[usize]) -> Result<()> {
    if caption_to_image.len() != a.cols() {
        return Err(Error::InvalidArg {
            op: "eval",
            msg: format!(
                "caption_to_image has {} entries for {} caption columns",
                caption_to_image.len(),
                a.cols()
            ),
        });
    }
    let mut owned = vec![false; a.rows()];
    for (cap, &img) in caption_to_image.iter().enumerate() {
        if img >= a.rows() {
            return Err(Error::DataInvariant {
                msg: format!("caption {cap} maps to missing image row {img}"),
            });
        }
        owned[img] = true;
    }
    if let Some(img) = owned.iter().position(|&o| !o) {
        return Err(Error::DataInvariant {
            msg: format!("image row {img} has no captions"),
        });
    }
    Ok(())
}

/// 1-based rank of `target` among the row's columns, descending score,
/// ties to the lower index.
fn rank_in_row(a: &Mat, row: usize, target: usize) -> usize {
    let score = a.get(row, target);
    let mut ahead = 0;
    for c in 0..a.cols() {
        if c == target {
            continue;
        }
        let v = a.get(row, c);
        if v > score || (v == score && c < target) {
            ahead += 1;
        }
    }
    ahead + 1
}

/// 1-based rank of `target` among the column's rows.
fn rank_in_col(a: &Mat, col: usize, target: usize) -> usize {
    let score = a.get(target, col);
    let mut ahead = 0;
    for r in 0..a.rows() {
        if r == target {
            continue;
        }
        let v = a.get(r, col);
        if v > score || (v == score && r < target) {
            ahead += 1;
        }
    }
    ahead + 1
}

/// Per image, the best rank achieved by any of its captions.
fn i2t_ranks(a: &Mat, caption_to_image: &[usize]) -> Vec<usize> {
    let mut best = vec![usize::MAX; a.rows()];
    for (cap, &img) in caption_to_image.iter().enumerate() {
        let r = rank_in_row(a, img, cap);
        if r < best[img] {
            best[img] = r;
        }
    }
    best
}

/// Per caption, the rank of its ground-truth image.
fn t2i_ranks(a: &Mat, caption_to_image: &[usize]) -> Vec<usize> {
    caption_to_image
        .iter()
        .enumerate()
        .map(|(cap, &img)| rank_in_col(a, cap, img))
        .collect()
}

fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    100.0 * hits as f64 / ranks.len() as f64
}

fn median_rank(ranks: &[usize]) -> f64 {
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

/// Image-to-text Recall@K: the percentage of images with any own caption
/// ranked within the top `k` of the row.
pub fn recall_i2t(a: &Mat, caption_to_image: &[usize], k: usize) -> Result<f64> {
    validate(a, caption_to_image)?;
    Ok(recall_from_ranks(&i2t_ranks(a, caption_to_image), k))
}

/// Text-to-image Recall@K: the percentage of captions whose ground-truth
/// image ranks within the top `k` of the column.
pub fn recall_t2i(a: &Mat, caption_to_image: &[usize], k: usize) -> Result<f64> {
    validate(a, caption_to_image)?;
    Ok(recall_from_ranks(&t2i_ranks(a, caption_to_image), k))
}

/// All six recalls (K in {1, 5, 10}; a K beyond the candidate count can
/// only saturate at 100), RSUM, and median ranks.
pub fn report(a: &Mat, caption_to_image: &[usize]) -> Result<RetrievalReport> {
    validate(a, caption_to_image)?;
    let i2t = i2t_ranks(a, caption_to_image);
    let t2i = t2i_ranks(a, caption_to_image);
    let i2t_report = DirectionReport {
        r1: recall_from_ranks(&i2t, 1),
        r5: recall_from_ranks(&i2t, 5),
        r10: recall_from_ranks(&i2t, 10),
        medr: median_rank(&i2t),
    };
    let t2i_report = DirectionReport {
        r1: recall_from_ranks(&t2i, 1),
        r5: recall_from_ranks(&t2i, 5),
        r10: recall_from_ranks(&t2i, 10),
        medr: median_rank(&t2i),
    };
    let rsum = i2t_report.r1
        + i2t_report.r5
        + i2t_report.r10
        + t2i_report.r1
        + t2i_report.r5
        + t2i_report.r10;
    Ok(RetrievalReport {
        i2t: i2t_report,
        t2i: t2i_report,
        rsum,
    })
}

/// Five-fold style evaluation: each fold names a subset of image rows; the
/// submatrix of those rows and their captions is scored and all fields are
/// averaged across folds.
pub fn report_over_folds(
    a: &Mat,
    caption_to_image: &[usize],
    folds: &[Vec<usize>],
) -> Result<RetrievalReport> {
    if folds.is_empty() {
        return Err(Error::EmptyInput {
            op: "report_over_folds",
        });
    }
    validate(a, caption_to_image)?;
    let mut acc: Option<RetrievalReport> = None;
    for fold in folds {
        let mut row_of = vec![usize::MAX; a.rows()];
        for (new_row, &img) in fold.iter().enumerate() {
            if img >= a.rows() {
                return Err(Error::DataInvariant {
                    msg: format!("fold references missing image row {img}"),
                });
            }
            row_of[img] = new_row;
        }
        let mut cols = Vec::new();
        let mut sub_map = Vec::new();
        for (cap, &img) in caption_to_image.iter().enumerate() {
            if row_of[img] != usize::MAX {
                cols.push(cap);
                sub_map.push(row_of[img]);
            }
        }
        let mut sub = Mat::zeros(fold.len(), cols.len());
        for (new_row, &img) in fold.iter().enumerate() {
            for (new_col, &cap) in cols.iter().enumerate() {
                sub.set(new_row, new_col, a.get(img, cap));
            }
        }
        let r = report(&sub, &sub_map)?;
        acc = Some(match acc {
            None => r,
            Some(prev) => RetrievalReport {
                i2t: DirectionReport {
                    r1: prev.i2t.r1 + r.i2t.r1,
                    r5: prev.i2t.r5 + r.i2t.r5,
                    r10: prev.i2t.r10 + r.i2t.r10,
                    medr: prev.i2t.medr + r.i2t.medr,
                },
                t2i: DirectionReport {
                    r1: prev.t2i.r1 + r.t2i.r1,
                    r5: prev.t2i.r5 + r.t2i.r5,
                    r10: prev.t2i.r10 + r.t2i.r10,
                    medr: prev.t2i.medr + r.t2i.medr,
                },
                rsum: prev.rsum + r.rsum,
            },
        });
    }
    let sum = acc.expect("at least one fold");
    let n = folds.len() as f64;
    Ok(RetrievalReport {
        i2t: DirectionReport {
            r1: sum.i2t.r1 / n,
            r5: sum.i2t.r5 / n,
            r10: sum.i2t.r10 / n,
            medr: sum.i2t.medr / n,
        },
        t2i: DirectionReport {
            r1: sum.t2i.r1 / n,
            r5: sum.t2i.r5 / n,
            r10: sum.t2i.r10 / n,
            medr: sum.t2i.medr / n,
        },
        rsum: sum.rsum / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    /// Block matrix: every image's own captions strictly above the rest.
    fn perfect_matrix(images: usize, caps_per: usize) -> (Mat, Vec<usize>) {
        let mut a = Mat::zeros(images, images * caps_per);
        let mut map = Vec::new();
        for img in 0..images {
            for c in 0..caps_per {
                map.push(img);
                for row in 0..images {
                    a.set(row, img * caps_per + c, if row == img { 0.9 } else { 0.1 });
                }
            }
        }
        (a, map)
    }

    #[test]
    fn perfect_matrix_scores_100_everywhere() {
        let (a, map) = perfect_matrix(4, 5);
        assert_eq!(recall_i2t(&a, &map, 1).unwrap(), 100.0);
        assert_eq!(recall_t2i(&a, &map, 1).unwrap(), 100.0);
        let r = report(&a, &map).unwrap();
        assert_eq!(r.rsum, 600.0);
        assert_eq!(r.i2t.medr, 1.0);
        assert_eq!(r.t2i.medr, 1.0);
    }

    #[test]
    fn reversed_matrix_scores_zero_at_k1() {
        // Own captions strictly lowest; at least one non-match above.
        let (mut a, map) = perfect_matrix(4, 5);
        for img in 0..4 {
            for cap in 0..20 {
                a.set(img, cap, if map[cap] == img { 0.1 } else { 0.9 });
            }
        }
        assert_eq!(recall_i2t(&a, &map, 1).unwrap(), 0.0);
        assert_eq!(recall_t2i(&a, &map, 1).unwrap(), 0.0);
    }

    #[test]
    fn hand_built_two_image_example() {
        // Image 0's best own caption ranks 2nd; image 1's ranks 1st.
        let a = Mat::from_rows(&[
            vec![0.5, 0.6, 0.9, 0.1],
            vec![0.2, 0.1, 0.3, 0.95],
        ])
        .unwrap();
        let map = vec![0, 0, 1, 1];
        assert_eq!(recall_i2t(&a, &map, 1).unwrap(), 50.0);
        assert_eq!(recall_i2t(&a, &map, 5).unwrap(), 100.0);
    }

    #[test]
    fn uniform_matrix_t2i_follows_tie_break() {
        // All ties resolve to image 0, so only its captions hit at k=1.
        let b = 4;
        let a = Mat::from_rows(&[vec![0.5; 2 * b]; b]).unwrap();
        let map: Vec<usize> = (0..b).flat_map(|i| [i, i]).collect();
        let r1 = recall_t2i(&a, &map, 1).unwrap();
        assert_eq!(r1, 100.0 / b as f64);
    }

    #[test]
    fn k_saturation_hits_100() {
        let mut rng = Rng::from_seed(40);
        let mut a = Mat::zeros(3, 6);
        for r in 0..3 {
            for c in 0..6 {
                a.set(r, c, rng.uniform(-1.0, 1.0));
            }
        }
        let map = vec![0, 0, 1, 1, 2, 2];
        assert_eq!(recall_t2i(&a, &map, 3).unwrap(), 100.0);
        assert_eq!(recall_i2t(&a, &map, 6).unwrap(), 100.0);
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let mut rng = Rng::from_seed(41);
        let mut a = Mat::zeros(6, 12);
        for r in 0..6 {
            for c in 0..12 {
                a.set(r, c, rng.uniform(-1.0, 1.0));
            }
        }
        let map: Vec<usize> = (0..6).flat_map(|i| [i, i]).collect();
        let r = report(&a, &map).unwrap();
        assert!(r.i2t.r1 <= r.i2t.r5 && r.i2t.r5 <= r.i2t.r10);
        assert!(r.t2i.r1 <= r.t2i.r5 && r.t2i.r5 <= r.t2i.r10);
        let total = r.i2t.r1 + r.i2t.r5 + r.i2t.r10 + r.t2i.r1 + r.t2i.r5 + r.t2i.r10;
        assert_eq!(r.rsum, total);
    }

    /// Fully independent oracle: explicit sorted candidate lists.
    pub(crate) fn oracle_report(a: &Mat, map: &[usize]) -> RetrievalReport {
        let sort_desc = |scores: Vec<(usize, f64)>| -> Vec<usize> {
            let mut s = scores;
            s.sort_by(|x, y| {
                y.1.partial_cmp(&x.1)
                    .unwrap()
                    .then(x.0.cmp(&y.0))
            });
            s.into_iter().map(|(i, _)| i).collect()
        };
        let mut i2t_ranks = Vec::new();
        for img in 0..a.rows() {
            let order = sort_desc((0..a.cols()).map(|c| (c, a.get(img, c))).collect());
            let best = order
                .iter()
                .position(|&c| map[c] == img)
                .expect("image owns a caption")
                + 1;
            i2t_ranks.push(best);
        }
        let mut t2i_ranks = Vec::new();
        for (cap, &img) in map.iter().enumerate() {
            let order = sort_desc((0..a.rows()).map(|r| (r, a.get(r, cap))).collect());
            let rank = order.iter().position(|&r| r == img).unwrap() + 1;
            t2i_ranks.push(rank);
        }
        let recall = |ranks: &[usize], k: usize| {
            100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
        };
        let median = |ranks: &[usize]| {
            let mut s = ranks.to_vec();
            s.sort_unstable();
            if s.len() % 2 == 1 {
                s[s.len() / 2] as f64
            } else {
                (s[s.len() / 2 - 1] + s[s.len() / 2]) as f64 / 2.0
            }
        };
        let i2t = DirectionReport {
            r1: recall(&i2t_ranks, 1),
            r5: recall(&i2t_ranks, 5),
            r10: recall(&i2t_ranks, 10),
            medr: median(&i2t_ranks),
        };
        let t2i = DirectionReport {
            r1: recall(&t2i_ranks, 1),
            r5: recall(&t2i_ranks, 5),
            r10: recall(&t2i_ranks, 10),
            medr: median(&t2i_ranks),
        };
        RetrievalReport {
            i2t,
            t2i,
            rsum: i2t.r1 + i2t.r5 + i2t.r10 + t2i.r1 + t2i.r5 + t2i.r10,
        }
    }

    #[test]
    fn matches_brute_force_oracle_on_random_matrices() {
        let mut rng = Rng::from_seed(42);
        for _ in 0..100 {
            let images = 2 + rng.below(19);
            let caps_per = 1 + rng.below(5);
            let cols = images * caps_per;
            let mut a = Mat::zeros(images, cols);
            for r in 0..images {
                for c in 0..cols {
                    a.set(r, c, rng.uniform(-1.0, 1.0));
                }
            }
            let map: Vec<usize> = (0..images)
                .flat_map(|i| std::iter::repeat(i).take(caps_per))
                .collect();
            let ours = report(&a, &map).unwrap();
            let oracle = oracle_report(&a, &map);
            assert_eq!(ours, oracle);
        }
    }

    #[test]
    fn invariant_under_increasing_transform_and_permutation() {
        let mut rng = Rng::from_seed(43);
        let images = 5;
        let cols = 10;
        let mut a = Mat::zeros(images, cols);
        for r in 0..images {
            for c in 0..cols {
                a.set(r, c, rng.uniform(-1.0, 1.0));
            }
        }
        let map: Vec<usize> = (0..images).flat_map(|i| [i, i]).collect();
        let base = report(&a, &map).unwrap();

        // Strictly increasing transform of all scores.
        let mut warped = Mat::zeros(images, cols);
        for r in 0..images {
            for c in 0..cols {
                let v = a.get(r, c);
                warped.set(r, c, (2.0 * v).tanh() * 3.0 + 7.0);
            }
        }
        assert_eq!(report(&warped, &map).unwrap(), base);

        // Relabel images 0<->3 together with their caption columns.
        let perm = [3usize, 1, 2, 0, 4];
        let mut permuted = Mat::zeros(images, cols);
        let mut new_map = vec![0; cols];
        for r in 0..images {
            for c in 0..cols {
                permuted.set(perm[r], c, a.get(r, c));
            }
        }
        for (c, &img) in map.iter().enumerate() {
            new_map[c] = perm[img];
        }
        assert_eq!(report(&permuted, &new_map).unwrap(), base);
    }

    #[test]
    fn fold_averaging_matches_manual_mean() {
        let (a, map) = perfect_matrix(6, 2);
        let folds = vec![vec![0, 1, 2], vec![3, 4, 5]];
        let avg = report_over_folds(&a, &map, &folds).unwrap();
        assert_eq!(avg.rsum, 600.0);
        assert!(report_over_folds(&a, &map, &[]).is_err());
    }

    #[test]
    fn eval_rejects_inconsistent_inputs() {
        let a = Mat::zeros(2, 3);
        // Dangling caption mapping.
        assert!(recall_t2i(&a, &[0, 1, 7], 1).is_err());
        // Image 1 owns no caption.
        assert!(recall_i2t(&a, &[0, 0, 0], 1).is_err());
        // Wrong mapping length.
        assert!(report(&a, &[0, 1]).is_err());
    }
}

//! Per-view similarity tensors, uncertainty weights derived from the spread
//! of negative-pair similarities, and the weighted bidirectional objectives
//! (hardest-negative triplet as the primary loss, a global-softmax negative
//! log-likelihood as the variant).
//!
//! Weights are constants of the forward pass: they scale loss terms but no
//! gradient flows through their computation, otherwise training would be
//! rewarded for shrinking negative-pair variance instead of separating
//! positives.

use serde::{Deserialize, Serialize};

use crate::numerics::{dot, logsumexp, population_variance, softmax_scaled, Mat};
use crate::{Error, Result};

/// Per-view image x text similarity scores for a batch:
/// `score(k, i, j)` is the cosine between view `k` of image `i` and text `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTensor {
    views: usize,
    n_images: usize,
    n_texts: usize,
    scores: Vec<f64>,
}

impl SimilarityTensor {
    pub fn new(views: usize, n_images: usize, n_texts: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != views * n_images * n_texts {
            return Err(Error::InvalidArg {
                op: "SimilarityTensor::new",
                msg: format!(
                    "expected {} scores for {views}x{n_images}x{n_texts}, got {}",
                    views * n_images * n_texts,
                    scores.len()
                ),
            });
        }
        Ok(Self {
            views,
            n_images,
            n_texts,
            scores,
        })
    }

    /// Builds the tensor from unit-norm embeddings: one `k x d_emb` matrix
    /// per image and one `n_texts x d_emb` matrix of text embeddings.
    pub fn from_embeddings(view_embs: &[Mat], text_embs: &Mat) -> Result<Self> {
        let first = view_embs.first().ok_or(Error::EmptyInput {
            op: "similarity_tensor",
        })?;
        let (views, d_emb) = (first.rows(), first.cols());
        for m in view_embs.iter() {
            if m.rows() != views || m.cols() != d_emb {
                return Err(Error::ShapeMismatch {
                    op: "similarity_tensor",
                    left: (m.rows(), m.cols()),
                    right: (views, d_emb),
                });
            }
        }
        if text_embs.cols() != d_emb {
            return Err(Error::ShapeMismatch {
                op: "similarity_tensor",
                left: (text_embs.rows(), text_embs.cols()),
                right: (view_embs.len(), d_emb),
            });
        }
        let n_images = view_embs.len();
        let n_texts = text_embs.rows();
        let mut scores = vec![0.0; views * n_images * n_texts];
        for k in 0..views {
            for (i, emb) in view_embs.iter().enumerate() {
                let v = emb.row(k);
                for j in 0..n_texts {
                    scores[(k * n_images + i) * n_texts + j] = dot(v, text_embs.row(j));
                }
            }
        }
        Ok(Self {
            views,
            n_images,
            n_texts,
            scores,
        })
    }

    #[inline]
    pub fn score(&self, k: usize, i: usize, j: usize) -> f64 {
        debug_assert!(k < self.views && i < self.n_images && j < self.n_texts);
        self.scores[(k * self.n_images + i) * self.n_texts + j]
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn n_texts(&self) -> usize {
        self.n_texts
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// All scores of view `k` as an `n_images x n_texts` slice.
    pub fn view_slice(&self, k: usize) -> &[f64] {
        let len = self.n_images * self.n_texts;
        &self.scores[k * len..(k + 1) * len]
    }

    fn require_square_batch(&self, op: &'static str) -> Result<usize> {
        if self.n_images != self.n_texts {
            return Err(Error::ShapeMismatch {
                op,
                left: (self.n_images, self.n_texts),
                right: (self.n_images, self.n_images),
            });
        }
        if self.n_images < 2 {
            return Err(Error::InvalidArg {
                op,
                msg: format!("need a batch of at least 2, got {}", self.n_images),
            });
        }
        Ok(self.n_images)
    }
}

/// Which spread statistic enters the softmax over views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightStat {
    /// Standard deviation of the negative-pair similarities (default).
    #[default]
    Std,
    /// Raw variance.
    Variance,
}

/// Per-anchor, per-view, per-direction loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyWeights {
    /// B x K, anchor images.
    pub img_to_txt: Mat,
    /// B x K, anchor texts.
    pub txt_to_img: Mat,
}

impl UncertaintyWeights {
    /// Neutral weights (all ones), used when weighting is disabled.
    pub fn ones(batch: usize, views: usize) -> Self {
        let ones = Mat::new(batch, views, vec![1.0; batch * views]).expect("sized");
        Self {
            img_to_txt: ones.clone(),
            txt_to_img: ones,
        }
    }
}

/// Reciprocal softmax of per-view spread values for one anchor: low spread
/// means high confidence and a large weight. Every weight exceeds 1 for
/// K >= 2 and equals K exactly when all spreads coincide.
pub fn view_weights(spreads: &[f64]) -> Result<Vec<f64>> {
    let probs = softmax_scaled(spreads, 1.0)?;
    Ok(probs.into_iter().map(|p| 1.0 / p).collect())
}

/// Uncertainty weights with the default (standard deviation) statistic.
pub fn uncertainty_weights(s: &SimilarityTensor) -> Result<UncertaintyWeights> {
    uncertainty_weights_with(s, WeightStat::Std)
}

/// Per anchor and view, the spread of that view's similarities to all
/// mismatched candidates in the batch becomes a softmax over views whose
/// reciprocal is the weight. Rows (anchor images) use the off-diagonal row
/// entries; columns (anchor texts) the off-diagonal column entries.
pub fn uncertainty_weights_with(
    s: &SimilarityTensor,
    stat: WeightStat,
) -> Result<UncertaintyWeights> {
    let b = s.require_square_batch("uncertainty_weights")?;
    let k = s.views();
    let mut img_to_txt = Mat::zeros(b, k);
    let mut txt_to_img = Mat::zeros(b, k);
    let mut negatives = Vec::with_capacity(b - 1);
    let mut spreads = vec![0.0; k];
    for anchor in 0..b {
        for (view, spread) in spreads.iter_mut().enumerate() {
            negatives.clear();
            negatives.extend((0..b).filter(|&j| j != anchor).map(|j| s.score(view, anchor, j)));
            let var = population_variance(&negatives);
            *spread = match stat {
                WeightStat::Std => var.sqrt(),
                WeightStat::Variance => var,
            };
        }
        let w = view_weights(&spreads)?;
        img_to_txt.row_mut(anchor).copy_from_slice(&w);
    }
    for anchor in 0..b {
        for (view, spread) in spreads.iter_mut().enumerate() {
            negatives.clear();
            negatives.extend((0..b).filter(|&i| i != anchor).map(|i| s.score(view, i, anchor)));
            let var = population_variance(&negatives);
            *spread = match stat {
                WeightStat::Std => var.sqrt(),
                WeightStat::Variance => var,
            };
        }
        let w = view_weights(&spreads)?;
        txt_to_img.row_mut(anchor).copy_from_slice(&w);
    }
    Ok(UncertaintyWeights {
        img_to_txt,
        txt_to_img,
    })
}

/// Margin and weighting switch for the triplet objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletConfig {
    pub margin: f64,
    pub weighting: bool,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            weighting: true,
        }
    }
}

/// One hinge term's frozen state: the hardest-negative index chosen at the
/// forward point, whether the hinge was strictly positive, and the detached
/// weight that scaled it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermRecord {
    pub hardest: usize,
    pub active: bool,
    pub weight: f64,
}

/// Everything the backward pass (and the frozen finite-difference forward)
/// needs to replay the triplet loss on the same piecewise-linear branch.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletActiveSet {
    /// Indexed `view * batch + anchor_image`.
    pub i2t: Vec<TermRecord>,
    /// Indexed `view * batch + anchor_text`.
    pub t2i: Vec<TermRecord>,
}

fn check_weight_shape(w: &Mat, b: usize, k: usize, op: &'static str) -> Result<()> {
    if w.rows() != b || w.cols() != k {
        return Err(Error::ShapeMismatch {
            op,
            left: (w.rows(), w.cols()),
            right: (b, k),
        });
    }
    Ok(())
}

/// Bidirectional hardest-negative triplet loss with per-anchor view weights:
/// for each view and anchor, the hinge `[margin - s_pos + s_hardest]+`
/// scaled by the anchor's weight; both directions summed, divided by the
/// batch size. The diagonal is the positive; argmax ties break to the
/// lowest index; a hinge exactly at zero is inactive.
pub fn weighted_triplet_loss(
    s: &SimilarityTensor,
    w: &UncertaintyWeights,
    cfg: &TripletConfig,
) -> Result<(f64, TripletActiveSet)> {
    let b = s.require_square_batch("weighted_triplet_loss")?;
    let k = s.views();
    if cfg.margin < 0.0 {
        return Err(Error::InvalidArg {
            op: "weighted_triplet_loss",
            msg: format!("margin must be nonnegative, got {}", cfg.margin),
        });
    }
    check_weight_shape(&w.img_to_txt, b, k, "weighted_triplet_loss")?;
    check_weight_shape(&w.txt_to_img, b, k, "weighted_triplet_loss")?;
    let mut i2t_records = Vec::with_capacity(k * b);
    let mut t2i_records = Vec::with_capacity(k * b);
    let mut i2t_sum = 0.0;
    for view in 0..k {
        for i in 0..b {
            let mut hardest = usize::MAX;
            let mut best = f64::NEG_INFINITY;
            for j in 0..b {
                if j != i && s.score(view, i, j) > best {
                    best = s.score(view, i, j);
                    hardest = j;
                }
            }
            let weight = if cfg.weighting {
                w.img_to_txt.get(i, view)
            } else {
                1.0
            };
            let arg = cfg.margin - s.score(view, i, i) + best;
            let active = arg > 0.0;
            if active {
                i2t_sum += weight * arg;
            }
            i2t_records.push(TermRecord {
                hardest,
                active,
                weight,
            });
        }
    }
    let mut t2i_sum = 0.0;
    for view in 0..k {
        for j in 0..b {
            let mut hardest = usize::MAX;
            let mut best = f64::NEG_INFINITY;
            for i in 0..b {
                if i != j && s.score(view, i, j) > best {
                    best = s.score(view, i, j);
                    hardest = i;
                }
            }
            let weight = if cfg.weighting {
                w.txt_to_img.get(j, view)
            } else {
                1.0
            };
            let arg = cfg.margin - s.score(view, j, j) + best;
            let active = arg > 0.0;
            if active {
                t2i_sum += weight * arg;
            }
            t2i_records.push(TermRecord {
                hardest,
                active,
                weight,
            });
        }
    }
    let loss = (i2t_sum + t2i_sum) / b as f64;
    Ok((
        loss,
        TripletActiveSet {
            i2t: i2t_records,
            t2i: t2i_records,
        },
    ))
}

/// Global-softmax negative log-likelihood: for each view the positive's
/// score against the log-partition over the entire batch matrix, weighted
/// per anchor in both directions, averaged over the batch. Adding any
/// constant to all scores leaves the value unchanged.
pub fn global_nll_loss(s: &SimilarityTensor, w: &UncertaintyWeights) -> Result<f64> {
    let b = s.require_square_batch("global_nll_loss")?;
    let k = s.views();
    check_weight_shape(&w.img_to_txt, b, k, "global_nll_loss")?;
    check_weight_shape(&w.txt_to_img, b, k, "global_nll_loss")?;
    let mut sum = 0.0;
    for view in 0..k {
        let lse = logsumexp(s.view_slice(view))?;
        for anchor in 0..b {
            let weight = w.img_to_txt.get(anchor, view) + w.txt_to_img.get(anchor, view);
            sum += weight * (lse - s.score(view, anchor, anchor));
        }
    }
    Ok(sum / b as f64)
}

/// Returns the hard-max hinge and its LogSumExp relaxation for one score
/// row with a designated positive: `(triplet, lse_form)` where
/// `triplet <= lse_form` and the LSE exceeds the max by at most `ln(m - 1)`.
pub fn lse_hinge_equivalence_check(
    scores_row: &[f64],
    positive: usize,
    margin: f64,
) -> Result<(f64, f64)> {
    if scores_row.len() < 2 {
        return Err(Error::InvalidArg {
            op: "lse_hinge_equivalence_check",
            msg: format!("need at least 2 scores, got {}", scores_row.len()),
        });
    }
    if positive >= scores_row.len() {
        return Err(Error::IndexOutOfRange {
            op: "lse_hinge_equivalence_check",
            index: positive,
            len: scores_row.len(),
        });
    }
    let s_pos = scores_row[positive];
    let negatives: Vec<f64> = scores_row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != positive)
        .map(|(_, &v)| v)
        .collect();
    let max_neg = negatives.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse_neg = logsumexp(&negatives)?;
    let triplet = (margin - s_pos + max_neg).max(0.0);
    let lse_form = (margin - s_pos + lse_neg).max(0.0);
    Ok((triplet, lse_form))
}

//! Glue between the dataset, encoder, and scoring: encodes every image and
//! caption of a split and aggregates the per-view similarities into one raw
//! score matrix with a split-local caption-to-image mapping.

use crate::data::{Dataset, Split};
use crate::inference::{aggregate_scores, ScoreMatrix};
use crate::loss::SimilarityTensor;
use crate::model::{encode_image, encode_text, ModelConfig, ModelParams};
use crate::numerics::Mat;
use crate::{Error, Result};

/// Raw aggregated scores for one split. Rows follow the split's image
/// order, columns the split's caption order; `caption_to_image` maps each
/// column to its image's row.
#[derive(Debug, Clone)]
pub struct SplitScores {
    pub matrix: ScoreMatrix,
    pub caption_to_image: Vec<usize>,
    /// Dataset-level image index per row.
    pub image_ids: Vec<usize>,
    /// Dataset-level caption index per column.
    pub caption_ids: Vec<usize>,
}

/// Encodes a split and aggregates per-view cosine scores (raw similarity,
/// no normalization).
pub fn score_split(
    ds: &Dataset,
    split: Split,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<SplitScores> {
    let image_ids = ds.splits.get(split).to_vec();
    if image_ids.is_empty() {
        return Err(Error::EmptyInput { op: "score_split" });
    }
    let caption_ids = ds.captions_in_split(split);
    let mut row_of = std::collections::HashMap::new();
    for (row, &img) in image_ids.iter().enumerate() {
        row_of.insert(img, row);
    }
    let caption_to_image: Vec<usize> = caption_ids
        .iter()
        .map(|&cap| row_of[&ds.caption_to_image[cap]])
        .collect();

    let view_embs: Vec<Mat> = image_ids
        .iter()
        .map(|&img| encode_image(&ds.images[img], params, cfg))
        .collect::<Result<_>>()?;
    let text_rows: Vec<Vec<f64>> = caption_ids
        .iter()
        .map(|&cap| encode_text(&ds.captions[cap], params, cfg))
        .collect::<Result<_>>()?;
    let text_mat = Mat::from_rows(&text_rows)?;
    let sim = SimilarityTensor::from_embeddings(&view_embs, &text_mat)?;
    Ok(SplitScores {
        matrix: aggregate_scores(&sim),
        caption_to_image,
        image_ids,
        caption_ids,
    })
}

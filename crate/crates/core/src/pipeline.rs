//! Glue between manifests, models and the evaluator.

use crate::data::Normalization;
use crate::error::Result;
use crate::eval::{evaluate, EmbeddingSet, RankingResult};
use crate::io::manifest::{Manifest, Split};
use crate::model::ReidModel;

/// Descriptors for every image of `split`, in manifest order.
pub fn embed_split(
    model: &ReidModel,
    manifest: &Manifest,
    split: Split,
    norm: &Normalization,
    batch: usize,
) -> Result<EmbeddingSet> {
    let (set, x) = crate::io::manifest::load_split_batch(manifest, split, model.config().backbone.input_hw, norm)?;
    let d = model.embed(&x, batch)?;
    EmbeddingSet::new(d, set.pids, set.camids, manifest.paths(split))
}

/// Query-vs-gallery evaluation straight from a manifest.
pub fn evaluate_manifest(
    model: &ReidModel,
    manifest: &Manifest,
    norm: &Normalization,
    batch: usize,
    max_rank: usize,
) -> Result<(EmbeddingSet, EmbeddingSet, RankingResult)> {
    let q = embed_split(model, manifest, Split::Query, norm, batch)?;
    let g = embed_split(model, manifest, Split::Gallery, norm, batch)?;
    let r = evaluate(&q, &g, max_rank)?;
    Ok((q, g, r))
}

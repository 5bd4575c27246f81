//! Cross-modal retrieval metrics, distance distributions and mining
//! diagnostics.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, MiningKind, Modality, TrainConfig, Tracklet, WeightedPositiveSet};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::mining::cosine_sim;
use crate::prototyping::tracklet_embedding;

pub const DEFAULT_MAX_RANK: usize = 20;
pub const HISTOGRAM_BINS: usize = 40;
/// Cosine distances lie in `[0, 2]`.
pub const HISTOGRAM_RANGE: (f64, f64) = (0.0, 2.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "IR->VIS")]
    IrToVis,
    #[serde(rename = "VIS->IR")]
    VisToIr,
}

impl Direction {
    /// `(query, gallery)` modalities.
    pub fn modalities(self) -> (Modality, Modality) {
        match self {
            Direction::IrToVis => (Modality::Ir, Modality::Vis),
            Direction::VisToIr => (Modality::Vis, Modality::Ir),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledEmbedding {
    pub vector: Vec<f64>,
    pub identity: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub direction: Direction,
    /// `cmc[k - 1]` is the rank-k accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub n_query: usize,
    pub n_gallery: usize,
}

impl RetrievalResult {
    /// Rank-k accuracy; ranks beyond the table saturate at its last entry.
    pub fn rank(&self, k: usize) -> f64 {
        assert!(k >= 1);
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }
}

/// Test-time tracklet feature, built exactly like a prototype.
pub fn embed_tracklet(params: &EncoderParams, tracklet: &Tracklet, cfg: &TrainConfig) -> Result<Vec<f64>> {
    tracklet_embedding(params, tracklet, 0, cfg)
}

/// Gallery indices of one query, most similar first; ties keep gallery order.
fn ranking(query: &[f64], gallery: &[LabeledEmbedding]) -> Result<Vec<usize>> {
    let sims = gallery
        .iter()
        .map(|g| cosine_sim(query, &g.vector))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
    Ok(order)
}

/// CMC and mAP of `queries` against `gallery` by cosine similarity.
pub fn evaluate_retrieval(
    direction: Direction,
    queries: &[LabeledEmbedding],
    gallery: &[LabeledEmbedding],
    max_rank: usize,
) -> Result<RetrievalResult> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("no queries"));
    }
    if max_rank == 0 {
        return Err(Error::OutOfRange("max_rank must be >= 1".into()));
    }
    for q in queries {
        if !gallery.iter().any(|g| g.identity == q.identity) {
            return Err(Error::QueryIdentityAbsent(q.identity));
        }
    }
    // (first relevant rank, average precision) per query
    let per_query = queries
        .par_iter()
        .map(|q| {
            let order = ranking(&q.vector, gallery)?;
            let mut hits = 0usize;
            let mut precision_sum = 0.0;
            let mut first = None;
            for (pos, &g) in order.iter().enumerate() {
                if gallery[g].identity == q.identity {
                    hits += 1;
                    precision_sum += hits as f64 / (pos + 1) as f64;
                    first.get_or_insert(pos);
                }
            }
            Ok((first.expect("identity present"), precision_sum / hits as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = queries.len() as f64;
    let cmc = (0..max_rank)
        .map(|k| per_query.iter().filter(|(first, _)| *first <= k).count() as f64 / n)
        .collect();
    let map = per_query.iter().map(|(_, ap)| ap).sum::<f64>() / n;
    Ok(RetrievalResult {
        direction,
        cmc,
        map,
        n_query: queries.len(),
        n_gallery: gallery.len(),
    })
}

/// Feature of one tracklet, with its metadata, as exported in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub tracklet_id: String,
    pub modality: Modality,
    pub camera_id: u32,
    pub gt_identity: Option<u32>,
    pub vector: Vec<f64>,
}

/// Embeds every tracklet of `dataset` in dataset order.
pub fn embed_dataset(params: &EncoderParams, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<EmbeddingRecord>> {
    dataset
        .tracklets()
        .par_iter()
        .map(|t| {
            Ok(EmbeddingRecord {
                tracklet_id: t.tracklet_id.clone(),
                modality: t.modality,
                camera_id: t.camera_id,
                gt_identity: t.gt_identity,
                vector: embed_tracklet(params, t, cfg)?,
            })
        })
        .collect()
}

/// True when every tracklet carries an identity label.
pub fn has_labels(dataset: &Dataset) -> bool {
    dataset.tracklets().iter().all(|t| t.gt_identity.is_some())
}

/// Labelled copies of `records`, optionally restricted to one modality.
pub fn labeled_embeddings(records: &[EmbeddingRecord], modality: Option<Modality>) -> Result<Vec<LabeledEmbedding>> {
    records
        .iter()
        .filter(|r| modality.is_none_or(|m| r.modality == m))
        .map(|r| {
            Ok(LabeledEmbedding {
                vector: r.vector.clone(),
                identity: r.gt_identity.ok_or(Error::MissingLabels)?,
            })
        })
        .collect()
}

/// Retrieval in both directions, IR->VIS first.
pub fn evaluate_embeddings(records: &[EmbeddingRecord], max_rank: usize) -> Result<[RetrievalResult; 2]> {
    let run = |direction: Direction| {
        let (q, g) = direction.modalities();
        evaluate_retrieval(
            direction,
            &labeled_embeddings(records, Some(q))?,
            &labeled_embeddings(records, Some(g))?,
            max_rank,
        )
    };
    Ok([run(Direction::IrToVis)?, run(Direction::VisToIr)?])
}

/// Embeds `dataset` and evaluates both retrieval directions.
pub fn evaluate_dataset(
    params: &EncoderParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    max_rank: usize,
) -> Result<[RetrievalResult; 2]> {
    evaluate_embeddings(&embed_dataset(params, dataset, cfg)?, max_rank)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges over [`HISTOGRAM_RANGE`].
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn of(values: &[f64], bins: usize) -> Self {
        let (lo, hi) = HISTOGRAM_RANGE;
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0u64; bins];
        for v in values {
            let b = ((v - lo) / width).floor().clamp(0.0, (bins - 1) as f64) as usize;
            counts[b] += 1;
        }
        Histogram { edges, counts }
    }
}

/// Sampled cosine distances `1 - cos` of same-identity and
/// different-identity pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceDistribution {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    pub positive_hist: Histogram,
    pub negative_hist: Histogram,
}

/// Draws `n_pairs` positive and `n_pairs` negative pairs uniformly (with
/// replacement) from all unordered pairs of distinct embeddings.
pub fn distance_distribution<R: Rng + ?Sized>(
    embeddings: &[LabeledEmbedding],
    n_pairs: usize,
    rng: &mut R,
) -> Result<DistanceDistribution> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            if embeddings[i].identity == embeddings[j].identity {
                pos.push((i, j));
            } else {
                neg.push((i, j));
            }
        }
    }
    if pos.is_empty() {
        return Err(Error::NotEnoughPairs("positive"));
    }
    if neg.is_empty() {
        return Err(Error::NotEnoughPairs("negative"));
    }
    let mut draw = |pairs: &[(usize, usize)]| -> Result<Vec<f64>> {
        (0..n_pairs)
            .map(|_| {
                let (i, j) = pairs[rng.random_range(0..pairs.len())];
                Ok(1.0 - cosine_sim(&embeddings[i].vector, &embeddings[j].vector)?)
            })
            .collect()
    };
    let positive = draw(&pos)?;
    let negative = draw(&neg)?;
    Ok(DistanceDistribution {
        positive_hist: Histogram::of(&positive, HISTOGRAM_BINS),
        negative_hist: Histogram::of(&negative, HISTOGRAM_BINS),
        positive,
        negative,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningQuality {
    pub kind: MiningKind,
    pub source_modality: Modality,
    pub n_accepted: usize,
    pub n_correct: usize,
    /// Source/target-camera combinations where a same-identity prototype exists.
    pub n_available: usize,
    /// `None` when nothing was accepted.
    pub precision: Option<f64>,
    pub recall: f64,
}

/// Precision and recall of one family of positive sets against the dataset
/// labels. Sets must refer to a store built from `dataset`.
pub fn mining_quality(sets: &[WeightedPositiveSet], dataset: &Dataset) -> Result<MiningQuality> {
    let identity = |m: Modality, camera: u32, index: usize| -> Result<u32> {
        let members = dataset.camera_tracklets(m, camera);
        let t = members
            .get(index)
            .ok_or_else(|| Error::StalePositive(format!("{m} camera {camera} index {index}")))?;
        dataset.tracklets()[*t].gt_identity.ok_or(Error::MissingLabels)
    };
    let (kind, source_modality) = match sets.first() {
        Some(s) => (s.kind, s.source.modality),
        None => {
            return Err(Error::EmptyInput("no positive sets to score"));
        }
    };
    let target_modality = match kind {
        MiningKind::IntraModal => source_modality,
        MiningKind::CrossModal => source_modality.other(),
    };
    let (mut n_accepted, mut n_correct, mut n_available) = (0, 0, 0);
    for set in sets {
        let src = set.source;
        let id = identity(src.modality, src.camera, src.index)?;
        for camera in 0..dataset.n_cameras(target_modality) {
            if kind == MiningKind::IntraModal && camera == src.camera {
                continue;
            }
            let members = dataset.camera_tracklets(target_modality, camera);
            for index in 0..members.len() {
                if identity(target_modality, camera, index)? == id {
                    n_available += 1;
                    break;
                }
            }
        }
        for e in &set.entries {
            n_accepted += 1;
            if identity(e.target.modality, e.target.camera, e.target.index)? == id {
                n_correct += 1;
            }
        }
    }
    Ok(MiningQuality {
        kind,
        source_modality,
        n_accepted,
        n_correct,
        n_available,
        precision: (n_accepted > 0).then(|| n_correct as f64 / n_accepted as f64),
        recall: if n_available > 0 {
            n_correct as f64 / n_available as f64
        } else {
            0.0
        },
    })
}

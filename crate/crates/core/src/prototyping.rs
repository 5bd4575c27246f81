//! Sub-tracklet partitioning and per-camera prototype construction.

use ndarray::Array1;
use rayon::prelude::*;

use crate::datamodel::{
    normalize_in_place, Dataset, Prototype, PrototypeStore, SubTracklet, TrainConfig, Tracklet,
};
use crate::encoder::{encode, select_frames, EncoderParams, ForwardCache};
use crate::error::Result;

/// Splits `len` frames into `min(k, len)` contiguous, covering sub-tracklets.
/// The first `len % k_eff` parts take one extra frame.
pub fn partition_tracklet(parent: usize, len: usize, k: usize) -> Vec<SubTracklet> {
    assert!(len >= 1 && k >= 1, "partition needs len >= 1 and k >= 1");
    let k_eff = k.min(len);
    let base = len / k_eff;
    let extra = len % k_eff;
    let mut start = 0;
    (0..k_eff)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let sub = SubTracklet {
                parent,
                k: i,
                start,
                end: start + size,
            };
            start += size;
            sub
        })
        .collect()
}

/// Partition table of a whole dataset, indexed like `dataset.tracklets()`.
pub fn partition_dataset(dataset: &Dataset, k: usize) -> Vec<Vec<SubTracklet>> {
    dataset
        .tracklets()
        .iter()
        .enumerate()
        .map(|(i, t)| partition_tracklet(i, t.len(), k))
        .collect()
}

/// Encodes one sub-tracklet after frame selection.
pub fn encode_sub_tracklet(
    params: &EncoderParams,
    tracklet: &Tracklet,
    sub: &SubTracklet,
) -> Result<(Array1<f64>, ForwardCache)> {
    let view = tracklet.frames.slice(ndarray::s![sub.start..sub.end, ..]);
    let frames = select_frames(view, params.dims.seq_len);
    encode(params, &frames)
}

/// Mean of the sub-tracklet embeddings, re-normalized when
/// `cfg.normalize_prototypes` is set.
pub fn tracklet_embedding(
    params: &EncoderParams,
    tracklet: &Tracklet,
    parent: usize,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let subs = partition_tracklet(parent, tracklet.len(), cfg.k);
    let embeddings = subs
        .iter()
        .map(|sub| encode_sub_tracklet(params, tracklet, sub).map(|(e, _)| e))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate_prototype(&embeddings, cfg.normalize_prototypes))
}

/// Mean of `embeddings`, optionally scaled to unit length.
pub fn aggregate_prototype(embeddings: &[Array1<f64>], normalize: bool) -> Vec<f64> {
    assert!(!embeddings.is_empty());
    let mut mean = vec![0.0; embeddings[0].len()];
    for e in embeddings {
        mean.iter_mut().zip(e.iter()).for_each(|(m, x)| *m += x);
    }
    let n = embeddings.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    if normalize {
        normalize_in_place(&mut mean);
    }
    mean
}

/// Builds one prototype per tracklet with a frozen encoder, grouped by
/// (modality, camera) in dataset order.
pub fn build_prototypes(
    params: &EncoderParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<PrototypeStore> {
    let vectors: Vec<Vec<f64>> = dataset
        .tracklets()
        .par_iter()
        .enumerate()
        .map(|(i, t)| tracklet_embedding(params, t, i, cfg))
        .collect::<Result<_>>()?;
    let mut store = PrototypeStore::new(
        dataset.n_cameras(crate::datamodel::Modality::Vis) as usize,
        dataset.n_cameras(crate::datamodel::Modality::Ir) as usize,
    );
    for (t, vector) in dataset.tracklets().iter().zip(vectors) {
        store.cameras[t.modality.index()][t.camera_id as usize].push(Prototype {
            tracklet_id: t.tracklet_id.clone(),
            modality: t.modality,
            camera_id: t.camera_id,
            vector,
        });
    }
    Ok(store)
}

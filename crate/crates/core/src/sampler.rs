//! `C` cameras x `P` tracklets x `S` sub-tracklets batch construction.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, Modality, ProtoRef, SubTracklet, TrainConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub sub: SubTracklet,
    /// Prototype of the sub-tracklet's parent tracklet.
    pub source: ProtoRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub modality: Modality,
    pub entries: Vec<BatchEntry>,
}

/// `count` indices from `0..n`, without replacement when `n >= count`.
fn pick<R: Rng + ?Sized>(rng: &mut R, n: usize, count: usize) -> Vec<usize> {
    if n >= count {
        sample(rng, n, count).into_vec()
    } else {
        (0..count).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Samples one batch of `modality`. Falls back to sampling with replacement
/// whenever fewer cameras, tracklets or sub-tracklets exist than requested.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    partitions: &[Vec<SubTracklet>],
    modality: Modality,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<BatchSpec> {
    let cameras = dataset.populated_cameras(modality);
    if cameras.is_empty() {
        return Err(Error::EmptyInput("modality has no tracklets to sample"));
    }
    let mut entries = Vec::with_capacity(cfg.batch_size());
    for ci in pick(rng, cameras.len(), cfg.cameras_per_batch) {
        let camera = cameras[ci];
        let members = dataset.camera_tracklets(modality, camera);
        for index in pick(rng, members.len(), cfg.tracklets_per_camera) {
            let subs = &partitions[members[index]];
            for k in pick(rng, subs.len(), cfg.subs_per_tracklet) {
                entries.push(BatchEntry {
                    sub: subs[k],
                    source: ProtoRef {
                        modality,
                        camera,
                        index,
                    },
                });
            }
        }
    }
    Ok(BatchSpec { modality, entries })
}

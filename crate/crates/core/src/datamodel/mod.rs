//! Domain types shared by every stage, plus the on-disk dataset and
//! checkpoint formats.

mod checkpoint;
mod config;
mod dataset;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use dataset::{load_dataset, save_dataset, Dataset, Manifest, ManifestEntry, Tracklet};

/// Sensing spectrum of a camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "VIS")]
    Vis,
    #[serde(rename = "IR")]
    Ir,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Vis, Modality::Ir];

    pub fn index(self) -> usize {
        match self {
            Modality::Vis => 0,
            Modality::Ir => 1,
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Vis => Modality::Ir,
            Modality::Ir => Modality::Vis,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Vis => "VIS",
            Modality::Ir => "IR",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A contiguous half-open frame range `[start, end)` of a tracklet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTracklet {
    /// Index of the parent tracklet in its dataset.
    pub parent: usize,
    /// Partition index in `[0, K_eff)`.
    pub k: usize,
    pub start: usize,
    pub end: usize,
}

impl SubTracklet {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Address of one prototype inside a [`PrototypeStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProtoRef {
    pub modality: Modality,
    pub camera: u32,
    pub index: usize,
}

/// Unit-norm identity anchor of one tracklet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub tracklet_id: String,
    pub modality: Modality,
    pub camera_id: u32,
    pub vector: Vec<f64>,
}

/// Per-(modality, camera) ordered prototype lists.
///
/// `cameras[m][c][i]` is the prototype of the `i`-th tracklet of camera `c`
/// in modality `m`, in dataset order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrototypeStore {
    pub cameras: [Vec<Vec<Prototype>>; 2],
}

impl PrototypeStore {
    pub fn new(n_cameras_vis: usize, n_cameras_ir: usize) -> Self {
        PrototypeStore {
            cameras: [vec![Vec::new(); n_cameras_vis], vec![Vec::new(); n_cameras_ir]],
        }
    }

    pub fn n_cameras(&self, modality: Modality) -> usize {
        self.cameras[modality.index()].len()
    }

    pub fn camera(&self, modality: Modality, camera: u32) -> &[Prototype] {
        self.cameras[modality.index()]
            .get(camera as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn get(&self, r: ProtoRef) -> Option<&Prototype> {
        self.cameras[r.modality.index()]
            .get(r.camera as usize)?
            .get(r.index)
    }

    pub fn get_mut(&mut self, r: ProtoRef) -> Option<&mut Prototype> {
        self.cameras[r.modality.index()]
            .get_mut(r.camera as usize)?
            .get_mut(r.index)
    }

    /// Number of prototypes of one modality.
    pub fn len(&self, modality: Modality) -> usize {
        self.cameras[modality.index()].iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        Modality::ALL.iter().all(|&m| self.len(m) == 0)
    }

    /// Every prototype reference of `modality`, camera-major.
    pub fn refs(&self, modality: Modality) -> Vec<ProtoRef> {
        let mut out = Vec::with_capacity(self.len(modality));
        for (c, protos) in self.cameras[modality.index()].iter().enumerate() {
            for index in 0..protos.len() {
                out.push(ProtoRef {
                    modality,
                    camera: c as u32,
                    index,
                });
            }
        }
        out
    }

    /// Position of `r` in [`PrototypeStore::refs`] order.
    pub fn flat_index(&self, r: ProtoRef) -> Option<usize> {
        let cams = &self.cameras[r.modality.index()];
        let cam = cams.get(r.camera as usize)?;
        if r.index >= cam.len() {
            return None;
        }
        let before: usize = cams[..r.camera as usize].iter().map(Vec::len).sum();
        Some(before + r.index)
    }
}

/// Which family of positives a set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MiningKind {
    /// Other cameras of the source modality.
    IntraModal,
    /// All cameras of the opposite modality.
    CrossModal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositiveEntry {
    pub target: ProtoRef,
    /// Cosine similarity between source and target at mining time.
    pub sim: f64,
    pub weight: f64,
}

/// Accepted positives of one source prototype with their soft weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedPositiveSet {
    pub source: ProtoRef,
    pub kind: MiningKind,
    pub entries: Vec<PositiveEntry>,
}

impl WeightedPositiveSet {
    pub fn empty(source: ProtoRef, kind: MiningKind) -> Self {
        WeightedPositiveSet {
            source,
            kind,
            entries: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Euclidean norm.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `v` to unit length in place; zero vectors are left untouched.
pub fn normalize_in_place(v: &mut [f64]) {
    let n = l2_norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

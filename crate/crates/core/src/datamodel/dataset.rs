use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Modality;
use crate::error::{Error, Result};

/// One camera/modality-tagged sequence of frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub tracklet_id: String,
    pub modality: Modality,
    pub camera_id: u32,
    /// `L x D_in` frame features.
    pub frames: Array2<f32>,
    /// Identity label; read only by evaluation and data generation.
    pub gt_identity: Option<u32>,
}

impl Tracklet {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }
}

/// Immutable in-memory dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    d_in: usize,
    n_cameras: [u32; 2],
    tracklets: Vec<Tracklet>,
    /// `groups[m][c]` = dataset indices of the tracklets of camera `c`, in order.
    groups: [Vec<Vec<usize>>; 2],
}

impl Dataset {
    pub fn new(
        d_in: usize,
        n_cameras_vis: u32,
        n_cameras_ir: u32,
        tracklets: Vec<Tracklet>,
    ) -> Result<Self> {
        let n_cameras = [n_cameras_vis, n_cameras_ir];
        let mut groups = [
            vec![Vec::new(); n_cameras_vis as usize],
            vec![Vec::new(); n_cameras_ir as usize],
        ];
        let mut seen = HashSet::with_capacity(tracklets.len());
        for (i, t) in tracklets.iter().enumerate() {
            if !seen.insert(t.tracklet_id.as_str()) {
                return Err(Error::DuplicateTracklet(t.tracklet_id.clone()));
            }
            if t.frames.nrows() == 0 {
                return Err(Error::InvalidManifest(format!(
                    "tracklet {} has no frames",
                    t.tracklet_id
                )));
            }
            if t.frames.ncols() != d_in {
                return Err(Error::DimensionMismatch {
                    tracklet: t.tracklet_id.clone(),
                    expected: t.frames.nrows() * d_in,
                    found: t.frames.len(),
                });
            }
            let m = t.modality.index();
            if t.camera_id >= n_cameras[m] {
                return Err(Error::InvalidManifest(format!(
                    "tracklet {} uses camera {} but {} declares {} cameras",
                    t.tracklet_id, t.camera_id, t.modality, n_cameras[m]
                )));
            }
            groups[m][t.camera_id as usize].push(i);
        }
        Ok(Dataset {
            d_in,
            n_cameras,
            tracklets,
            groups,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn n_cameras(&self, modality: Modality) -> u32 {
        self.n_cameras[modality.index()]
    }

    pub fn tracklets(&self) -> &[Tracklet] {
        &self.tracklets
    }

    pub fn len(&self) -> usize {
        self.tracklets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracklets.is_empty()
    }

    /// Dataset indices of the tracklets of one camera, in dataset order.
    pub fn camera_tracklets(&self, modality: Modality, camera: u32) -> &[usize] {
        self.groups[modality.index()]
            .get(camera as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Cameras of `modality` that hold at least one tracklet.
    pub fn populated_cameras(&self, modality: Modality) -> Vec<u32> {
        self.groups[modality.index()]
            .iter()
            .enumerate()
            .filter(|(_, g)| !g.is_empty())
            .map(|(c, _)| c as u32)
            .collect()
    }

    pub fn modality_len(&self, modality: Modality) -> usize {
        self.groups[modality.index()].iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub tracklet_id: String,
    pub modality: Modality,
    pub camera_id: u32,
    pub n_frames: usize,
    /// Payload path, relative to the manifest directory.
    pub feature_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_identity: Option<u32>,
}

/// `manifest.json` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub d_in: usize,
    pub n_cameras_vis: u32,
    pub n_cameras_ir: u32,
    pub tracklets: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn read_payload(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    if bytes.len() % 4 != 0 {
        return Err(Error::InvalidManifest(format!(
            "{} is not a whole number of f32 values",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Loads `manifest.json` (or the given manifest path) and every payload it lists.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let mut path = manifest_path.as_ref().to_path_buf();
    if path.is_dir() {
        path = path.join(MANIFEST_FILE);
    }
    let text = fs::read_to_string(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.clone())
        } else {
            Error::io(&path, e)
        }
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut tracklets = Vec::with_capacity(manifest.tracklets.len());
    for entry in &manifest.tracklets {
        if entry.n_frames == 0 {
            return Err(Error::InvalidManifest(format!(
                "tracklet {} declares zero frames",
                entry.tracklet_id
            )));
        }
        let data = read_payload(&root.join(&entry.feature_file))?;
        let expected = entry.n_frames * manifest.d_in;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                tracklet: entry.tracklet_id.clone(),
                expected,
                found: data.len(),
            });
        }
        let frames = Array2::from_shape_vec((entry.n_frames, manifest.d_in), data)
            .expect("length checked above");
        tracklets.push(Tracklet {
            tracklet_id: entry.tracklet_id.clone(),
            modality: entry.modality,
            camera_id: entry.camera_id,
            frames,
            gt_identity: entry.gt_identity,
        });
    }
    Dataset::new(
        manifest.d_in,
        manifest.n_cameras_vis,
        manifest.n_cameras_ir,
        tracklets,
    )
}

fn payload_name(id: &str) -> Result<String> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::InvalidManifest(format!(
            "tracklet id {id:?} cannot name a payload file"
        )));
    }
    Ok(format!("{id}.f32"))
}

/// Writes `manifest.json` plus one little-endian `<tracklet_id>.f32` payload
/// per tracklet into `dir`. Returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for t in dataset.tracklets() {
        let name = payload_name(&t.tracklet_id)?;
        let mut bytes = Vec::with_capacity(t.frames.len() * 4);
        for row in t.frames.rows() {
            for v in row {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let p = dir.join(&name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        entries.push(ManifestEntry {
            tracklet_id: t.tracklet_id.clone(),
            modality: t.modality,
            camera_id: t.camera_id,
            n_frames: t.len(),
            feature_file: name,
            gt_identity: t.gt_identity,
        });
    }
    let manifest = Manifest {
        d_in: dataset.d_in(),
        n_cameras_vis: dataset.n_cameras(Modality::Vis),
        n_cameras_ir: dataset.n_cameras(Modality::Ir),
        tracklets: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

//! `checkpoint.hpt`: an 8-byte magic, a little-endian `u64` header length, a
//! JSON header, then the binary sections the header describes.
//!
//! Encoder tensors are stored as `f32` (the parameters live on the `f32`
//! grid, so this is lossless); prototype vectors are stored as `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Modality, Prototype, PrototypeStore, TrainConfig};
use crate::encoder::{EncoderDims, EncoderParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HPTCKPT\0";

/// Trained state: encoder, prototype memory and the epoch reached.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub store: PrototypeStore,
    pub epoch: usize,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Section {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraHeader {
    modality: Modality,
    camera_id: u32,
    tracklet_ids: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    epoch: usize,
    config: TrainConfig,
    encoder: EncoderDims,
    n_cameras: [usize; 2],
    cameras: Vec<CameraHeader>,
    sections: Vec<Section>,
    payload_len: usize,
}

impl Section {
    fn len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype.width()
    }
}

pub fn save_checkpoint(
    params: &EncoderParams,
    store: &PrototypeStore,
    epoch: usize,
    config: &TrainConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut payload = Vec::new();
    let mut sections = Vec::new();
    for (name, t) in params.tensors() {
        sections.push(Section {
            name,
            dtype: Dtype::F32,
            shape: t.shape.clone(),
            offset: payload.len(),
        });
        for &v in t.data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut cameras = Vec::new();
    for m in Modality::ALL {
        for (c, protos) in store.cameras[m.index()].iter().enumerate() {
            let dim = protos.first().map_or(0, |p| p.vector.len());
            sections.push(Section {
                name: format!("proto.{}.{}", m.as_str(), c),
                dtype: Dtype::F64,
                shape: vec![protos.len(), dim],
                offset: payload.len(),
            });
            for p in protos {
                if p.vector.len() != dim {
                    return Err(Error::ShapeMismatch(format!(
                        "prototype {} has width {}, camera uses {}",
                        p.tracklet_id,
                        p.vector.len(),
                        dim
                    )));
                }
                for &v in &p.vector {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
            cameras.push(CameraHeader {
                modality: m,
                camera_id: c as u32,
                tracklet_ids: protos.iter().map(|p| p.tracklet_id.clone()).collect(),
            });
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        epoch,
        config: config.clone(),
        encoder: params.dims,
        n_cameras: [store.n_cameras(Modality::Vis), store.n_cameras(Modality::Ir)],
        cameras,
        sections,
        payload_len: payload.len(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn read_f32(bytes: &[u8]) -> impl Iterator<Item = f64> + '_ {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
}

fn read_f64(bytes: &[u8]) -> impl Iterator<Item = f64> + '_ {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: header.version,
        });
    }
    let payload = &bytes[header_end..];
    if payload.len() != header.payload_len {
        return Err(corrupt(format!(
            "payload holds {} bytes, header declares {}",
            payload.len(),
            header.payload_len
        )));
    }
    let section_bytes = |s: &Section| -> Result<&[u8]> {
        payload
            .get(s.offset..s.offset + s.len())
            .ok_or_else(|| corrupt(format!("section {} out of bounds", s.name)))
    };

    let mut params = EncoderParams::zeros(header.encoder);
    let shapes = params.shapes();
    if header.sections.len() < shapes.len() {
        return Err(corrupt("missing encoder sections"));
    }
    for ((section, (name, shape)), dst) in header
        .sections
        .iter()
        .zip(&shapes)
        .zip(params.tensors_mut())
    {
        if &section.name != name || &section.shape != shape || section.dtype != Dtype::F32 {
            return Err(corrupt(format!("unexpected section {}", section.name)));
        }
        dst.iter_mut()
            .zip(read_f32(section_bytes(section)?))
            .for_each(|(d, v)| *d = v);
    }

    let mut store = PrototypeStore::new(header.n_cameras[0], header.n_cameras[1]);
    let proto_sections = &header.sections[shapes.len()..];
    if proto_sections.len() != header.cameras.len() {
        return Err(corrupt("prototype sections do not match camera list"));
    }
    for (section, cam) in proto_sections.iter().zip(&header.cameras) {
        let [n, dim] = section.shape[..] else {
            return Err(corrupt(format!("bad shape for {}", section.name)));
        };
        if n != cam.tracklet_ids.len() || section.dtype != Dtype::F64 {
            return Err(corrupt(format!("bad section {}", section.name)));
        }
        let values: Vec<f64> = read_f64(section_bytes(section)?).collect();
        let slot = store.cameras[cam.modality.index()]
            .get_mut(cam.camera_id as usize)
            .ok_or_else(|| corrupt(format!("camera {} out of range", cam.camera_id)))?;
        for (i, id) in cam.tracklet_ids.iter().enumerate() {
            slot.push(Prototype {
                tracklet_id: id.clone(),
                modality: cam.modality,
                camera_id: cam.camera_id,
                vector: values[i * dim..(i + 1) * dim].to_vec(),
            });
        }
    }
    Ok(Checkpoint {
        params,
        store,
        epoch: header.epoch,
        config: header.config,
    })
}

//! Toy-scale temporal feature encoder.
//!
//! Frames are projected to the embedding width, refined by up to two
//! single-head transformer layers (post-norm, ReLU feed-forward), pooled by a
//! learned frame-weighting head and finally L2-normalized. The backward pass
//! in [`backward`] is derived by hand and checked against central finite
//! differences in [`gradcheck`].

mod backward;
mod forward;
pub mod gradcheck;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::TrainConfig;
use crate::error::{Error, Result};

pub use backward::encode_backward;
pub use forward::{encode, ForwardCache, LayerCache};

/// Maximum number of temporal layers.
pub const MAX_TTE_LAYERS: usize = 2;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Architecture of an encoder instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub d_in: usize,
    pub d: usize,
    pub d_ff: usize,
    pub d_h: usize,
    pub seq_len: usize,
    pub n_layers: usize,
    /// Whether the pooled feature is L2-normalized.
    pub normalize: bool,
    /// Whether a learned per-position vector is added after projection.
    pub positional: bool,
}

impl EncoderDims {
    pub(crate) fn pos_rows(&self) -> usize {
        if self.positional {
            self.seq_len
        } else {
            0
        }
    }

    pub fn from_config(d_in: usize, cfg: &TrainConfig) -> Self {
        EncoderDims {
            d_in,
            d: cfg.d,
            d_ff: cfg.d_ff,
            d_h: cfg.d_h(),
            seq_len: cfg.seq_len,
            n_layers: cfg.n_tte_layers,
            normalize: cfg.normalize_embeddings,
            positional: cfg.positional_embedding,
        }
    }
}

/// One transformer temporal layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TteLayer {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub w_ff1: Array2<f64>,
    pub w_ff2: Array2<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
}

/// Frame-weighting head: `score_t = w2 . relu(W1^T f_t + b1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AfmHead {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
}

/// Every trainable tensor of the encoder. Also used as the gradient and
/// momentum container, since those mirror the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub w_proj: Array2<f64>,
    /// Learned additive positional embedding, `seq_len x d`
    /// (`0 x d` when disabled).
    pub pos: Array2<f64>,
    pub layers: Vec<TteLayer>,
    pub afm: AfmHead,
}

impl EncoderParams {
    /// All-zero tensors with the shapes implied by `dims`.
    pub fn zeros(dims: EncoderDims) -> Self {
        let EncoderDims {
            d_in,
            d,
            d_ff,
            d_h,
            n_layers,
            ..
        } = dims;
        let layer = TteLayer {
            w_q: Array2::zeros((d, d)),
            w_k: Array2::zeros((d, d)),
            w_v: Array2::zeros((d, d)),
            w_o: Array2::zeros((d, d)),
            w_ff1: Array2::zeros((d, d_ff)),
            w_ff2: Array2::zeros((d_ff, d)),
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
        };
        EncoderParams {
            dims,
            w_proj: Array2::zeros((d_in, d)),
            pos: Array2::zeros((dims.pos_rows(), d)),
            layers: vec![layer; n_layers],
            afm: AfmHead {
                w1: Array2::zeros((d, d_h)),
                b1: Array1::zeros(d_h),
                w2: Array1::zeros(d_h),
            },
        }
    }

    /// `(name, shape)` of every tensor in canonical order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.tensors()
            .into_iter()
            .map(|(name, t)| (name, t.shape))
            .collect()
    }

    /// Read-only view of every tensor in canonical order.
    pub fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        fn m(a: &Array2<f64>) -> TensorRef<'_> {
            TensorRef {
                shape: a.shape().to_vec(),
                data: a.as_slice().expect("standard layout"),
            }
        }
        fn v(a: &Array1<f64>) -> TensorRef<'_> {
            TensorRef {
                shape: a.shape().to_vec(),
                data: a.as_slice().expect("standard layout"),
            }
        }
        let mut out = vec![("w_proj".to_string(), m(&self.w_proj)), ("pos".to_string(), m(&self.pos))];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("tte{i}.w_q"), m(&l.w_q)));
            out.push((format!("tte{i}.w_k"), m(&l.w_k)));
            out.push((format!("tte{i}.w_v"), m(&l.w_v)));
            out.push((format!("tte{i}.w_o"), m(&l.w_o)));
            out.push((format!("tte{i}.w_ff1"), m(&l.w_ff1)));
            out.push((format!("tte{i}.w_ff2"), m(&l.w_ff2)));
            out.push((format!("tte{i}.ln1_gain"), v(&l.ln1_gain)));
            out.push((format!("tte{i}.ln1_bias"), v(&l.ln1_bias)));
            out.push((format!("tte{i}.ln2_gain"), v(&l.ln2_gain)));
            out.push((format!("tte{i}.ln2_bias"), v(&l.ln2_bias)));
        }
        out.push(("afm.w1".to_string(), m(&self.afm.w1)));
        out.push(("afm.b1".to_string(), v(&self.afm.b1)));
        out.push(("afm.w2".to_string(), v(&self.afm.w2)));
        out
    }

    /// Mutable flat slices of every tensor, same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        fn s2(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        fn s1(a: &mut Array1<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut out = vec![s2(&mut self.w_proj), s2(&mut self.pos)];
        for l in self.layers.iter_mut() {
            out.push(s2(&mut l.w_q));
            out.push(s2(&mut l.w_k));
            out.push(s2(&mut l.w_v));
            out.push(s2(&mut l.w_o));
            out.push(s2(&mut l.w_ff1));
            out.push(s2(&mut l.w_ff2));
            out.push(s1(&mut l.ln1_gain));
            out.push(s1(&mut l.ln1_bias));
            out.push(s1(&mut l.ln2_gain));
            out.push(s1(&mut l.ln2_bias));
        }
        out.push(s2(&mut self.afm.w1));
        out.push(s1(&mut self.afm.b1));
        out.push(s1(&mut self.afm.w2));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }

    /// `self += other`. Panics on shape mismatch.
    pub fn add_assign(&mut self, other: &EncoderParams) {
        assert_eq!(self.dims, other.dims, "parameter shapes differ");
        let src: Vec<&[f64]> = other.tensors().into_iter().map(|(_, t)| t.data).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Rounds every value to the nearest `f32`, the storage precision.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    pub fn check_dims(&self, dims: &EncoderDims) -> Result<()> {
        if &self.dims != dims {
            return Err(Error::ShapeMismatch(format!(
                "expected {:?}, found {:?}",
                dims, self.dims
            )));
        }
        Ok(())
    }
}

/// Borrowed tensor with its logical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRef<'a> {
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl<'a> TensorRef<'a> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

fn glorot<R: Rng>(rng: &mut R, shape: (usize, usize)) -> Array2<f64> {
    let r = (6.0 / (shape.0 + shape.1) as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || rng.random_range(-r..=r) as f32 as f64)
}

/// Deterministic uniform initialization in `+-sqrt(6 / (fan_in + fan_out))`.
/// Layer-norm gains start at one, all biases at zero.
pub fn encoder_init(dims: EncoderDims, seed: u64) -> Result<EncoderParams> {
    let EncoderDims {
        d_in,
        d,
        d_ff,
        d_h,
        seq_len,
        n_layers,
        ..
    } = dims;
    if [d_in, d, d_ff, d_h, seq_len].contains(&0) {
        return Err(Error::InvalidConfig("encoder dimensions must be >= 1".into()));
    }
    if n_layers > MAX_TTE_LAYERS {
        return Err(Error::InvalidConfig(format!(
            "{n_layers} temporal layers requested, at most {MAX_TTE_LAYERS} supported"
        )));
    }
    let mut rng = crate::rng::stream(seed, 0xE4C0, 0);
    let w_proj = glorot(&mut rng, (d_in, d));
    // zero start keeps the encoder symmetric in frame order until trained
    let pos = Array2::zeros((dims.pos_rows(), d));
    let layers = (0..n_layers)
        .map(|_| TteLayer {
            w_q: glorot(&mut rng, (d, d)),
            w_k: glorot(&mut rng, (d, d)),
            w_v: glorot(&mut rng, (d, d)),
            w_o: glorot(&mut rng, (d, d)),
            w_ff1: glorot(&mut rng, (d, d_ff)),
            w_ff2: glorot(&mut rng, (d_ff, d)),
            ln1_gain: Array1::ones(d),
            ln1_bias: Array1::zeros(d),
            ln2_gain: Array1::ones(d),
            ln2_bias: Array1::zeros(d),
        })
        .collect();
    let w1 = glorot(&mut rng, (d, d_h));
    let w2 = glorot(&mut rng, (d_h, 1)).into_shape_with_order(d_h).expect("column");
    Ok(EncoderParams {
        dims,
        w_proj,
        pos,
        layers,
        afm: AfmHead {
            w1,
            b1: Array1::zeros(d_h),
            w2,
        },
    })
}

/// Frame indices fed to the encoder for a sub-tracklet of `len` frames:
/// evenly spaced `round(j (len - 1) / (seq_len - 1))` when `len >= seq_len`,
/// cyclic repetition otherwise.
pub fn select_frame_indices(len: usize, seq_len: usize) -> Vec<usize> {
    assert!(len >= 1 && seq_len >= 1);
    if len >= seq_len {
        if seq_len == 1 {
            return vec![0];
        }
        let den = seq_len - 1;
        // round half up, in integers
        (0..seq_len)
            .map(|j| (2 * j * (len - 1) + den) / (2 * den))
            .collect()
    } else {
        (0..seq_len).map(|j| j % len).collect()
    }
}

/// Gathers the selected frames as a `seq_len x D_in` matrix.
pub fn select_frames(frames: ArrayView2<'_, f32>, seq_len: usize) -> Array2<f64> {
    let idx = select_frame_indices(frames.nrows(), seq_len);
    let mut out = Array2::zeros((seq_len, frames.ncols()));
    for (row, &i) in idx.iter().enumerate() {
        out.row_mut(row)
            .iter_mut()
            .zip(frames.row(i))
            .for_each(|(o, &x)| *o = x as f64);
    }
    out
}

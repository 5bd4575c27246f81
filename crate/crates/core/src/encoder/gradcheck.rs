//! Central finite-difference verification of [`encode_backward`].

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::Serialize;

use super::{encode, encode_backward, encoder_init, EncoderDims, EncoderParams};
use crate::error::Result;

/// Denominator floor of the relative error, so parameters whose true
/// gradient is numerically zero are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub n_layers: usize,
    pub n_params: usize,
    pub max_rel_error: f64,
    pub tensors: Vec<TensorCheck>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn objective(params: &EncoderParams, frames: &Array2<f64>, upstream: &Array1<f64>) -> Result<f64> {
    Ok(encode(params, frames)?.0.dot(upstream))
}

/// Compares every analytic parameter gradient of `upstream . encode(frames)`
/// against a central difference with the given step.
pub fn check_params(
    params: &EncoderParams,
    frames: &Array2<f64>,
    upstream: &Array1<f64>,
    step: f64,
) -> Result<GradCheckReport> {
    let (_, cache) = encode(params, frames)?;
    let analytic = encode_backward(params, &cache, upstream)?;
    let analytic: Vec<(String, Vec<f64>)> = analytic
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.data.to_vec()))
        .collect();

    let mut probe = params.clone();
    let mut tensors = Vec::with_capacity(analytic.len());
    for (ti, (name, grads)) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        let mut biggest = 0.0f64;
        for (i, &a) in grads.iter().enumerate() {
            let orig = probe.tensors_mut()[ti][i];
            probe.tensors_mut()[ti][i] = orig + step;
            let up = objective(&probe, frames, upstream)?;
            probe.tensors_mut()[ti][i] = orig - step;
            let down = objective(&probe, frames, upstream)?;
            probe.tensors_mut()[ti][i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(a, numeric));
            biggest = biggest.max(a.abs());
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            max_rel_error: worst,
            max_abs_grad: biggest,
        });
    }
    Ok(GradCheckReport {
        n_layers: params.dims.n_layers,
        n_params: params.param_count(),
        max_rel_error: tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max),
        tensors,
    })
}

/// Random instance: initialized encoder with jittered layer-norm and bias
/// terms (so they are not at their symmetric starting values), random
/// frames, random upstream gradient.
pub fn random_instance(
    dims: EncoderDims,
    seed: u64,
) -> Result<(EncoderParams, Array2<f64>, Array1<f64>)> {
    let mut params = encoder_init(dims, seed)?;
    let mut rng = crate::rng::stream(seed, 0x6C4E, 0);
    for l in params.layers.iter_mut() {
        for v in [&mut l.ln1_gain, &mut l.ln1_bias, &mut l.ln2_gain, &mut l.ln2_bias] {
            v.mapv_inplace(|x| x + rng.random_range(-0.2..0.2));
        }
    }
    params.afm.b1.mapv_inplace(|_| rng.random_range(-0.2..0.2));
    params.pos.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    let frames = Array2::from_shape_simple_fn((dims.seq_len, dims.d_in), || rng.random_range(-1.0..1.0));
    let upstream = Array1::from_shape_simple_fn(dims.d, || rng.random_range(-1.0..1.0));
    Ok((params, frames, upstream))
}

/// Small instance used by the `gradcheck` command and the acceptance suite:
/// `D_in = 4, D = 8, seq_len = 3`.
pub fn small_dims(n_layers: usize) -> EncoderDims {
    EncoderDims {
        d_in: 4,
        d: 8,
        d_ff: 16,
        d_h: 8,
        seq_len: 3,
        n_layers,
        normalize: true,
        positional: true,
    }
}

/// Runs the check for 0, 1 and 2 temporal layers.
pub fn run_suite(seed: u64, step: f64) -> Result<Vec<GradCheckReport>> {
    (0..=super::MAX_TTE_LAYERS)
        .map(|n| {
            let (p, x, g) = random_instance(small_dims(n), seed.wrapping_add(n as u64))?;
            check_params(&p, &x, &g, step)
        })
        .collect()
}

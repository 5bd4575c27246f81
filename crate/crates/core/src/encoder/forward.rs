use ndarray::{Array1, Array2};

use super::{EncoderParams, TteLayer, LN_EPS};
use crate::error::{Error, Result};

/// Activations of one temporal layer kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Row-softmaxed attention matrix.
    pub attn: Array2<f64>,
    pub ctx: Array2<f64>,
    pub xhat1: Array2<f64>,
    pub inv_std1: Array1<f64>,
    pub norm1: Array2<f64>,
    pub ff_pre: Array2<f64>,
    pub ff_act: Array2<f64>,
    pub xhat2: Array2<f64>,
    pub inv_std2: Array1<f64>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub frames: Array2<f64>,
    pub layers: Vec<LayerCache>,
    /// Enhanced frame features fed to the pooling head.
    pub enhanced: Array2<f64>,
    pub afm_pre: Array2<f64>,
    pub afm_act: Array2<f64>,
    /// Frame weights, sum to one.
    pub alpha: Array1<f64>,
    pub pooled: Array1<f64>,
    pub pooled_norm: f64,
    pub embedding: Array1<f64>,
}

fn finite(a: &Array2<f64>, stage: &'static str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericFailure { stage })
    }
}

pub(crate) fn softmax(scores: &Array1<f64>) -> Array1<f64> {
    let max = scores.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut e = scores.mapv(|x| (x - max).exp());
    let sum = e.sum();
    e /= sum;
    e
}

/// Row-wise layer norm; returns `(y, xhat, 1/std)`.
fn layer_norm(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        row *= *s;
    }
    let y = &xhat * gain + bias;
    (y, xhat, inv_std)
}

fn layer_forward(layer: &TteLayer, h: &Array2<f64>) -> (Array2<f64>, LayerCache) {
    let d = h.ncols() as f64;
    let q = h.dot(&layer.w_q);
    let k = h.dot(&layer.w_k);
    let v = h.dot(&layer.w_v);
    let mut attn = q.dot(&k.t()) / d.sqrt();
    for mut row in attn.rows_mut() {
        let s = softmax(&row.to_owned());
        row.assign(&s);
    }
    let ctx = attn.dot(&v);
    let res1 = h + &ctx.dot(&layer.w_o);
    let (norm1, xhat1, inv_std1) = layer_norm(&res1, &layer.ln1_gain, &layer.ln1_bias);
    let ff_pre = norm1.dot(&layer.w_ff1);
    let ff_act = ff_pre.mapv(|x| x.max(0.0));
    let res2 = &norm1 + &ff_act.dot(&layer.w_ff2);
    let (out, xhat2, inv_std2) = layer_norm(&res2, &layer.ln2_gain, &layer.ln2_bias);
    let cache = LayerCache {
        input: h.clone(),
        q,
        k,
        v,
        attn,
        ctx,
        xhat1,
        inv_std1,
        norm1,
        ff_pre,
        ff_act,
        xhat2,
        inv_std2,
    };
    (out, cache)
}

/// Encodes one `seq_len x D_in` clip into an embedding.
///
/// project -> (+ positional) -> temporal layers -> frame weights
/// `alpha = softmax(w2 . relu(W1^T f_t + b1))` -> `sum_t alpha_t f_t` -> L2 normalize.
pub fn encode(params: &EncoderParams, frames: &Array2<f64>) -> Result<(Array1<f64>, ForwardCache)> {
    let dims = params.dims;
    if frames.nrows() != dims.seq_len || frames.ncols() != dims.d_in {
        return Err(Error::ShapeMismatch(format!(
            "encoder expects {}x{} frames, got {}x{}",
            dims.seq_len,
            dims.d_in,
            frames.nrows(),
            frames.ncols()
        )));
    }
    finite(frames, "input")?;

    let mut h = frames.dot(&params.w_proj);
    if dims.positional {
        h += &params.pos;
    }
    finite(&h, "projection")?;

    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (out, cache) = layer_forward(layer, &h);
        finite(&out, "temporal layer")?;
        layers.push(cache);
        h = out;
    }
    let enhanced = h;

    let afm_pre = enhanced.dot(&params.afm.w1) + &params.afm.b1;
    let afm_act = afm_pre.mapv(|x| x.max(0.0));
    let scores = afm_act.dot(&params.afm.w2);
    let alpha = softmax(&scores);
    if !alpha.iter().all(|x| x.is_finite()) {
        return Err(Error::NumericFailure { stage: "frame weighting" });
    }
    let pooled = enhanced.t().dot(&alpha);
    let pooled_norm = pooled.dot(&pooled).sqrt();
    let embedding = if dims.normalize {
        if !(pooled_norm > 0.0 && pooled_norm.is_finite()) {
            return Err(Error::NumericFailure { stage: "normalization" });
        }
        &pooled / pooled_norm
    } else {
        pooled.clone()
    };
    if !embedding.iter().all(|x| x.is_finite()) {
        return Err(Error::NumericFailure { stage: "pooling" });
    }
    let cache = ForwardCache {
        frames: frames.clone(),
        layers,
        enhanced,
        afm_pre,
        afm_act,
        alpha,
        pooled,
        pooled_norm,
        embedding: embedding.clone(),
    };
    Ok((embedding, cache))
}

use ndarray::{Array1, Array2, Axis};

use super::{EncoderParams, ForwardCache, LayerCache, TteLayer};
use crate::error::{Error, Result};

/// Backward through a row-wise layer norm; returns `(dx, dgain, dbias)`.
fn layer_norm_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    inv_std: &Array1<f64>,
    gain: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dgain = (dy * xhat).sum_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let g = dxhat.row(r);
        let xh = xhat.row(r);
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        let s = inv_std[r];
        dx.row_mut(r)
            .iter_mut()
            .zip(g.iter().zip(xh.iter()))
            .for_each(|(o, (&gi, &xi))| *o = s * (gi - mean_g - xi * mean_gx));
    }
    (dx, dgain, dbias)
}

fn relu_mask(pre: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let mut out = grad.clone();
    out.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    out
}

fn layer_backward(
    layer: &TteLayer,
    c: &LayerCache,
    dout: &Array2<f64>,
    grad: &mut TteLayer,
) -> Array2<f64> {
    let (dres2, dg2, db2) = layer_norm_backward(dout, &c.xhat2, &c.inv_std2, &layer.ln2_gain);
    grad.ln2_gain = dg2;
    grad.ln2_bias = db2;

    grad.w_ff2 = c.ff_act.t().dot(&dres2);
    let dff_pre = relu_mask(&c.ff_pre, &dres2.dot(&layer.w_ff2.t()));
    grad.w_ff1 = c.norm1.t().dot(&dff_pre);
    let dnorm1 = dres2 + dff_pre.dot(&layer.w_ff1.t());

    let (dres1, dg1, db1) = layer_norm_backward(&dnorm1, &c.xhat1, &c.inv_std1, &layer.ln1_gain);
    grad.ln1_gain = dg1;
    grad.ln1_bias = db1;

    grad.w_o = c.ctx.t().dot(&dres1);
    let dctx = dres1.dot(&layer.w_o.t());
    let dattn = dctx.dot(&c.v.t());
    let dv = c.attn.t().dot(&dctx);

    let scale = 1.0 / (c.input.ncols() as f64).sqrt();
    let mut dscores = Array2::zeros(dattn.raw_dim());
    for r in 0..dattn.nrows() {
        let a = c.attn.row(r);
        let da = dattn.row(r);
        let inner = a.dot(&da);
        dscores
            .row_mut(r)
            .iter_mut()
            .zip(a.iter().zip(da.iter()))
            .for_each(|(o, (&ai, &dai))| *o = ai * (dai - inner) * scale);
    }
    let dq = dscores.dot(&c.k);
    let dk = dscores.t().dot(&c.q);

    grad.w_q = c.input.t().dot(&dq);
    grad.w_k = c.input.t().dot(&dk);
    grad.w_v = c.input.t().dot(&dv);

    dres1 + dq.dot(&layer.w_q.t()) + dk.dot(&layer.w_k.t()) + dv.dot(&layer.w_v.t())
}

/// Gradient of `grad_embedding . embedding` with respect to every parameter.
pub fn encode_backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    grad_embedding: &Array1<f64>,
) -> Result<EncoderParams> {
    let dims = params.dims;
    if cache.layers.len() != params.layers.len()
        || cache.frames.dim() != (dims.seq_len, dims.d_in)
        || cache.enhanced.ncols() != dims.d
        || cache.afm_pre.ncols() != dims.d_h
        || grad_embedding.len() != dims.d
    {
        return Err(Error::ShapeMismatch(
            "forward cache does not belong to these parameters".into(),
        ));
    }
    let mut grads = EncoderParams::zeros(dims);

    let dpooled = if dims.normalize {
        let e = &cache.embedding;
        (grad_embedding - &(e * e.dot(grad_embedding))) / cache.pooled_norm
    } else {
        grad_embedding.clone()
    };

    let fe = &cache.enhanced;
    let alpha = &cache.alpha;
    let dalpha = fe.dot(&dpooled);
    let mut dfe = outer(alpha, &dpooled);

    let inner = alpha.dot(&dalpha);
    let dscores = alpha * &(dalpha - inner);

    grads.afm.w2 = cache.afm_act.t().dot(&dscores);
    let dact = outer(&dscores, &params.afm.w2);
    let dpre = relu_mask(&cache.afm_pre, &dact);
    grads.afm.w1 = fe.t().dot(&dpre);
    grads.afm.b1 = dpre.sum_axis(Axis(0));
    dfe += &dpre.dot(&params.afm.w1.t());

    let mut dh = dfe;
    for ((layer, c), g) in params
        .layers
        .iter()
        .zip(&cache.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        dh = layer_backward(layer, c, &dh, g);
    }

    if dims.positional {
        grads.pos = dh.clone();
    }
    grads.w_proj = cache.frames.t().dot(&dh);
    Ok(grads)
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

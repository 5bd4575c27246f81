//! Prototype-contrastive losses, stage gating and the EMA prototype update.
//!
//! Prototypes are constants under differentiation: every gradient here is
//! with respect to the batch embeddings only. Each loss is averaged over the
//! batch of one modality; the trainer sums the visible and infrared batches.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    normalize_in_place, MiningKind, ProtoRef, Prototype, PrototypeStore, TrainConfig,
    WeightedPositiveSet,
};
use crate::error::{Error, Result};

/// One batch embedding and the prototype of the tracklet it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub embedding: Array1<f64>,
    pub source: ProtoRef,
}

/// Loss value and its gradient with respect to every query embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<Array1<f64>>,
}

impl LossValue {
    fn zeros(queries: &[Query]) -> Self {
        LossValue {
            value: 0.0,
            grads: queries
                .iter()
                .map(|q| Array1::zeros(q.embedding.len()))
                .collect(),
        }
    }
}

/// Adds `-weight * log softmax_k(q . p_k / tau)[target]` over the prototypes
/// of one camera to `grad`; returns the loss contribution.
fn softmax_ce(
    q: &Array1<f64>,
    camera: &[Prototype],
    target: usize,
    weight: f64,
    tau: f64,
    grad: &mut Array1<f64>,
) -> f64 {
    let logits: Vec<f64> = camera
        .iter()
        .map(|p| q.iter().zip(&p.vector).map(|(a, b)| a * b).sum::<f64>() / tau)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    for (p, e) in camera.iter().zip(&exps) {
        let coef = weight * e / sum / tau;
        grad.iter_mut().zip(&p.vector).for_each(|(g, x)| *g += coef * x);
    }
    grad.iter_mut()
        .zip(&camera[target].vector)
        .for_each(|(g, x)| *g -= weight / tau * x);
    weight * (lse - logits[target])
}

/// Cross-entropy of every query against its own prototype, with the
/// prototypes of the query's camera as the softmax support.
pub fn loss_intra_camera(queries: &[Query], store: &PrototypeStore, tau: f64) -> Result<LossValue> {
    let mut out = LossValue::zeros(queries);
    if queries.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / queries.len() as f64;
    for (q, grad) in queries.iter().zip(out.grads.iter_mut()) {
        let camera = store.camera(q.source.modality, q.source.camera);
        if q.source.index >= camera.len() {
            return Err(Error::StalePositive(format!("{:?}", q.source)));
        }
        out.value += softmax_ce(&q.embedding, camera, q.source.index, 1.0, tau, grad);
    }
    finish(out, scale)
}

fn finish(mut out: LossValue, scale: f64) -> Result<LossValue> {
    out.value *= scale;
    for g in out.grads.iter_mut() {
        *g *= scale;
    }
    Ok(out)
}

fn weighted_positive_loss(
    queries: &[Query],
    store: &PrototypeStore,
    positives: &[&WeightedPositiveSet],
    tau: f64,
    kind: MiningKind,
) -> Result<LossValue> {
    if positives.len() != queries.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} queries but {} positive sets",
            queries.len(),
            positives.len()
        )));
    }
    let mut out = LossValue::zeros(queries);
    if queries.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / queries.len() as f64;
    for ((q, set), grad) in queries.iter().zip(positives).zip(out.grads.iter_mut()) {
        if set.kind != kind {
            return Err(Error::StalePositive(format!(
                "expected {kind:?} positives, got {:?}",
                set.kind
            )));
        }
        for entry in &set.entries {
            let t = entry.target;
            let wrong_modality = match kind {
                MiningKind::IntraModal => t.modality != q.source.modality,
                MiningKind::CrossModal => t.modality == q.source.modality,
            };
            let camera = store.camera(t.modality, t.camera);
            if wrong_modality || t.index >= camera.len() {
                return Err(Error::StalePositive(format!("{t:?}")));
            }
            out.value += softmax_ce(&q.embedding, camera, t.index, entry.weight, tau, grad);
        }
    }
    finish(out, scale)
}

/// Weighted cross-entropy towards each intra-modality cross-camera positive,
/// normalized over the positive's own camera.
pub fn loss_imcc(
    queries: &[Query],
    store: &PrototypeStore,
    positives: &[&WeightedPositiveSet],
    tau: f64,
) -> Result<LossValue> {
    weighted_positive_loss(queries, store, positives, tau, MiningKind::IntraModal)
}

/// Weighted cross-entropy towards each cross-modality positive, normalized
/// over the positive's own camera in the other modality.
pub fn loss_cross_modal(
    queries: &[Query],
    store: &PrototypeStore,
    positives: &[&WeightedPositiveSet],
    tau: f64,
) -> Result<LossValue> {
    weighted_positive_loss(queries, store, positives, tau, MiningKind::CrossModal)
}

/// One modality's share of an iteration.
#[derive(Debug, Clone, Copy)]
pub struct ModalityBatch<'a> {
    pub queries: &'a [Query],
    pub intra: &'a [&'a WeightedPositiveSet],
    pub cross: &'a [&'a WeightedPositiveSet],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ic: f64,
    pub l_imcc: f64,
    pub l_cm: f64,
    pub l_total: f64,
    pub imcc_active: bool,
    pub cm_active: bool,
    /// Gradient per query, batches concatenated in input order.
    #[serde(skip)]
    pub grads: Vec<Array1<f64>>,
}

/// `(imcc_active, cm_active)` at epoch `e`.
pub fn stage_gates(e: usize, cfg: &TrainConfig) -> (bool, bool) {
    let imcc = cfg.use_imcc && (!cfg.use_hls || e >= cfg.e_intra);
    let cm = cfg.use_cm && (!cfg.use_hls || e >= cfg.e_cross);
    (imcc, cm)
}

/// `L_ic + [e >= e_intra] L_imcc + [e >= e_cross] L_cm`, each term summed
/// over the given modality batches. Inactive terms are not evaluated and
/// contribute neither value nor gradient.
pub fn total_loss(e: usize, batches: &[ModalityBatch<'_>], store: &PrototypeStore, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let (imcc_active, cm_active) = stage_gates(e, cfg);
    let mut out = LossBreakdown {
        l_ic: 0.0,
        l_imcc: 0.0,
        l_cm: 0.0,
        l_total: 0.0,
        imcc_active,
        cm_active,
        grads: Vec::new(),
    };
    for b in batches {
        let mut part = loss_intra_camera(b.queries, store, cfg.tau)?;
        out.l_ic += part.value;
        if imcc_active {
            let l = loss_imcc(b.queries, store, b.intra, cfg.tau)?;
            out.l_imcc += l.value;
            part.grads.iter_mut().zip(&l.grads).for_each(|(g, x)| *g += x);
        }
        if cm_active {
            let l = loss_cross_modal(b.queries, store, b.cross, cfg.tau)?;
            out.l_cm += l.value;
            part.grads.iter_mut().zip(&l.grads).for_each(|(g, x)| *g += x);
        }
        out.grads.extend(part.grads);
    }
    out.l_total = out.l_ic;
    if imcc_active {
        out.l_total += out.l_imcc;
    }
    if cm_active {
        out.l_total += out.l_cm;
    }
    Ok(out)
}

fn ema_one(p: &mut Prototype, q: &Array1<f64>, alpha: f64, renormalize: bool) {
    p.vector
        .iter_mut()
        .zip(q.iter())
        .for_each(|(v, x)| *v = (1.0 - alpha) * *v + alpha * x);
    if renormalize {
        normalize_in_place(&mut p.vector);
    }
}

/// `p <- (1 - alpha) p + alpha q` for each query's own prototype and every
/// accepted intra- and cross-modality target, in batch order.
pub fn ema_update(
    store: &mut PrototypeStore,
    queries: &[Query],
    intra: &[&WeightedPositiveSet],
    cross: &[&WeightedPositiveSet],
    alpha: f64,
    renormalize: bool,
) -> Result<()> {
    for (i, q) in queries.iter().enumerate() {
        let mut targets = vec![q.source];
        for family in [intra, cross] {
            if let Some(set) = family.get(i) {
                targets.extend(set.entries.iter().map(|e| e.target));
            }
        }
        for t in targets {
            let p = store
                .get_mut(t)
                .ok_or_else(|| Error::StalePositive(format!("{t:?}")))?;
            ema_one(p, &q.embedding, alpha, renormalize);
        }
    }
    Ok(())
}

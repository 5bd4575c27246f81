//! Cross-camera and cross-modality positive mining between prototypes.
//!
//! For every source prototype the best-matching prototype of each target
//! camera is found by cosine similarity. The per-camera bests are accepted
//! when their similarity reaches the source's own threshold
//! `h_i = rho(e) * s_max`, where `s_max` is the best of those bests and
//! `rho` decays linearly over training. Accepted positives are weighted by a
//! temperature softmax over their similarities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    MiningKind, Modality, PositiveEntry, ProtoRef, Prototype, PrototypeStore, TrainConfig,
    WeightedPositiveSet,
};
use crate::error::{Error, Result};

/// `a . b / (|a| |b|)`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine of vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot / (na * nb))
}

/// Linearly decaying threshold ratio:
/// `rho_init + (rho_final - rho_init) * e / e_total`.
pub fn rho_schedule(e: usize, cfg: &TrainConfig) -> Result<f64> {
    if e > cfg.e_total {
        return Err(Error::OutOfRange(format!(
            "epoch {e} beyond e_total = {}",
            cfg.e_total
        )));
    }
    if cfg.e_total == 0 {
        return Ok(cfg.rho_init);
    }
    Ok(cfg.rho_init + (cfg.rho_final - cfg.rho_init) * e as f64 / cfg.e_total as f64)
}

/// Temperature softmax `exp(s_j / tau_w) / sum_j' exp(s_j' / tau_w)`.
pub fn soft_weights(sims: &[f64], tau_w: f64) -> Result<Vec<f64>> {
    if sims.is_empty() {
        return Err(Error::EmptyInput("soft_weights needs at least one similarity"));
    }
    if tau_w.is_nan() || tau_w <= 0.0 {
        return Err(Error::InvalidConfig("tau_w must be > 0".into()));
    }
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| ((s - max) / tau_w).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// How the acceptance threshold and weights are derived for one mining pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningRule {
    /// `Some(rho)` for the dynamic threshold, `None` for a fixed threshold.
    pub rho: Option<f64>,
    pub fixed_threshold: f64,
    pub soft: bool,
    pub tau_w: f64,
}

impl MiningRule {
    pub fn from_config(e: usize, cfg: &TrainConfig) -> Result<Self> {
        Ok(MiningRule {
            rho: if cfg.use_dts {
                Some(rho_schedule(e, cfg)?)
            } else {
                None
            },
            fixed_threshold: cfg.fixed_threshold,
            soft: cfg.use_swa,
            tau_w: cfg.tau_w,
        })
    }

    pub fn dynamic(rho: f64, tau_w: f64) -> Self {
        MiningRule {
            rho: Some(rho),
            fixed_threshold: 0.0,
            soft: true,
            tau_w,
        }
    }
}

/// Best prototype of one target camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub target: ProtoRef,
    pub sim: f64,
}

/// Mining diagnostics of one source prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub source: ProtoRef,
    pub s_max: Option<f64>,
    pub threshold: Option<f64>,
    pub candidates: Vec<Candidate>,
    pub accepted: Vec<PositiveEntry>,
}

/// Diagnostics of one mining pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub kind: MiningKind,
    pub source_modality: Modality,
    pub rho: Option<f64>,
    pub sources: Vec<SourceReport>,
    pub mean_set_size: f64,
    /// Fraction of accepted pairs sharing the source identity, when labels
    /// are available.
    pub precision: Option<f64>,
}

impl MiningReport {
    pub fn positive_sets(&self) -> Vec<WeightedPositiveSet> {
        self.sources
            .iter()
            .map(|s| WeightedPositiveSet {
                source: s.source,
                kind: self.kind,
                entries: s.accepted.clone(),
            })
            .collect()
    }
}

fn mine_source(
    source: ProtoRef,
    vector: &[f64],
    targets: &[(ProtoRef, &[Prototype])],
    rule: &MiningRule,
) -> Result<SourceReport> {
    let mut candidates = Vec::with_capacity(targets.len());
    for (cam, protos) in targets {
        let mut best: Option<(usize, f64)> = None;
        for (j, p) in protos.iter().enumerate() {
            let s = cosine_sim(vector, &p.vector)?;
            // strict comparison: the lowest index wins ties
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        if let Some((index, sim)) = best {
            candidates.push(Candidate {
                target: ProtoRef { index, ..*cam },
                sim,
            });
        }
    }
    let s_max = candidates
        .iter()
        .map(|c| c.sim)
        .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))));
    let threshold = match (rule.rho, s_max) {
        (Some(_), Some(s)) if s <= 0.0 => None,
        (Some(rho), Some(s)) => Some(rho * s),
        (None, Some(_)) => Some(rule.fixed_threshold),
        (_, None) => None,
    };
    let kept: Vec<&Candidate> = match threshold {
        Some(h) => candidates.iter().filter(|c| c.sim >= h).collect(),
        None => Vec::new(),
    };
    let accepted = if kept.is_empty() {
        Vec::new()
    } else {
        let weights = if rule.soft {
            soft_weights(&kept.iter().map(|c| c.sim).collect::<Vec<_>>(), rule.tau_w)?
        } else {
            vec![1.0 / kept.len() as f64; kept.len()]
        };
        kept.iter()
            .zip(weights)
            .map(|(c, weight)| PositiveEntry {
                target: c.target,
                sim: c.sim,
                weight,
            })
            .collect()
    };
    Ok(SourceReport {
        source,
        s_max,
        threshold,
        candidates,
        accepted,
    })
}

/// Runs one mining pass for every prototype of `source_modality` and keeps
/// the full diagnostics.
pub fn mine_report(
    store: &PrototypeStore,
    source_modality: Modality,
    kind: MiningKind,
    rule: &MiningRule,
) -> Result<MiningReport> {
    let target_modality = match kind {
        MiningKind::IntraModal => source_modality,
        MiningKind::CrossModal => source_modality.other(),
    };
    let n_target = store.n_cameras(target_modality);
    let sources = store.refs(source_modality);
    let reports: Vec<SourceReport> = sources
        .par_iter()
        .map(|&src| {
            let targets: Vec<(ProtoRef, &[Prototype])> = (0..n_target as u32)
                .filter(|&c| kind == MiningKind::CrossModal || c != src.camera)
                .map(|c| {
                    (
                        ProtoRef {
                            modality: target_modality,
                            camera: c,
                            index: 0,
                        },
                        store.camera(target_modality, c),
                    )
                })
                .collect();
            let vector = &store.get(src).expect("ref from store").vector;
            mine_source(src, vector, &targets, rule)
        })
        .collect::<Result<_>>()?;
    let mean_set_size = if reports.is_empty() {
        0.0
    } else {
        reports.iter().map(|r| r.accepted.len()).sum::<usize>() as f64 / reports.len() as f64
    };
    Ok(MiningReport {
        kind,
        source_modality,
        rho: rule.rho,
        sources: reports,
        mean_set_size,
        precision: None,
    })
}

/// Weighted positive sets of every prototype of `source_modality`, in
/// [`PrototypeStore::refs`] order.
pub fn mine_positive_sets(
    store: &PrototypeStore,
    source_modality: Modality,
    kind: MiningKind,
    e: usize,
    cfg: &TrainConfig,
) -> Result<Vec<WeightedPositiveSet>> {
    if kind == MiningKind::CrossModal && store.len(source_modality.other()) == 0 {
        return Err(Error::EmptyInput("cross-modal mining needs prototypes in both modalities"));
    }
    let rule = MiningRule::from_config(e, cfg)?;
    Ok(mine_report(store, source_modality, kind, &rule)?.positive_sets())
}

//! Epoch loop: rebuild prototypes with the frozen encoder, mine positives,
//! then run SGD iterations with EMA prototype updates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    Checkpoint, Dataset, MiningKind, Modality, PrototypeStore, TrainConfig, WeightedPositiveSet,
};
use crate::encoder::{encode_backward, encoder_init, EncoderDims, EncoderParams, ForwardCache};
use crate::error::{Error, Result};
use crate::evaluator::{has_labels, mining_quality, MiningQuality};
use crate::mining::{mine_positive_sets, MiningRule};
use crate::objective::{ema_update, stage_gates, total_loss, ModalityBatch, Query};
use crate::prototyping::{build_prototypes, encode_sub_tracklet, partition_dataset};
use crate::sampler::{sample_batch, BatchSpec};

const DOMAIN_EPOCH: u64 = 0x7452_0001;

/// SGD momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub velocity: EncoderParams,
    pub lr: f64,
    pub momentum: f64,
    pub step: u64,
}

impl OptState {
    pub fn new(dims: EncoderDims, lr: f64, momentum: f64) -> Self {
        OptState {
            velocity: EncoderParams::zeros(dims),
            lr,
            momentum,
            step: 0,
        }
    }
}

/// `v <- mu v + g; theta <- theta - lr v`.
pub fn sgd_step(params: &mut EncoderParams, grads: &EncoderParams, opt: &mut OptState) -> Result<()> {
    grads.check_dims(&params.dims)?;
    opt.velocity.check_dims(&params.dims)?;
    let grads: Vec<&[f64]> = grads.tensors().into_iter().map(|(_, t)| t.data).collect();
    for ((theta, v), g) in params
        .tensors_mut()
        .into_iter()
        .zip(opt.velocity.tensors_mut())
        .zip(grads)
    {
        for ((t, v), g) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = opt.momentum * *v + g;
            *t -= opt.lr * *v;
        }
    }
    opt.step += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub l_ic: f64,
    pub l_imcc: f64,
    pub l_cm: f64,
    pub l_total: f64,
}

/// Mean positive-set size of one mined family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyStats {
    pub kind: MiningKind,
    pub source_modality: Modality,
    pub mean_set_size: f64,
    pub quality: Option<MiningQuality>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// `None` under the fixed threshold.
    pub rho: Option<f64>,
    pub imcc_active: bool,
    pub cm_active: bool,
    pub mean_l_ic: f64,
    pub mean_l_imcc: f64,
    pub mean_l_cm: f64,
    pub mean_l_total: f64,
    pub mining: Vec<FamilyStats>,
    pub iterations: Vec<IterationLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub param_count: usize,
    pub epochs: Vec<EpochRecord>,
}

/// Positive sets of one modality, indexed like `PrototypeStore::refs`.
#[derive(Default)]
struct Positives {
    intra: Vec<WeightedPositiveSet>,
    cross: Vec<WeightedPositiveSet>,
}

fn mine_epoch(
    store: &PrototypeStore,
    dataset: &Dataset,
    e: usize,
    cfg: &TrainConfig,
    labelled: bool,
) -> Result<([Positives; 2], Vec<FamilyStats>)> {
    let mut positives: [Positives; 2] = Default::default();
    let mut stats = Vec::new();
    for m in Modality::ALL {
        let families = [
            (MiningKind::IntraModal, cfg.use_imcc),
            (MiningKind::CrossModal, cfg.use_cm),
        ];
        for (kind, enabled) in families {
            if !enabled {
                continue;
            }
            let sets = mine_positive_sets(store, m, kind, e, cfg)?;
            let mean_set_size = if sets.is_empty() {
                0.0
            } else {
                sets.iter().map(|s| s.entries.len()).sum::<usize>() as f64 / sets.len() as f64
            };
            let quality = if labelled && !sets.is_empty() {
                Some(mining_quality(&sets, dataset)?)
            } else {
                None
            };
            stats.push(FamilyStats {
                kind,
                source_modality: m,
                mean_set_size,
                quality,
            });
            match kind {
                MiningKind::IntraModal => positives[m.index()].intra = sets,
                MiningKind::CrossModal => positives[m.index()].cross = sets,
            }
        }
    }
    Ok((positives, stats))
}

struct EncodedBatch {
    queries: Vec<Query>,
    caches: Vec<ForwardCache>,
}

fn encode_batch(params: &EncoderParams, dataset: &Dataset, batch: &BatchSpec) -> Result<EncodedBatch> {
    let encoded = batch
        .entries
        .par_iter()
        .map(|entry| {
            let t = &dataset.tracklets()[entry.sub.parent];
            encode_sub_tracklet(params, t, &entry.sub)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut queries = Vec::with_capacity(encoded.len());
    let mut caches = Vec::with_capacity(encoded.len());
    for ((embedding, cache), entry) in encoded.into_iter().zip(&batch.entries) {
        queries.push(Query {
            embedding,
            source: entry.source,
        });
        caches.push(cache);
    }
    Ok(EncodedBatch { queries, caches })
}

/// Positive sets of each query's source prototype, or nothing when the
/// family is gated off.
fn sets_for<'a>(
    queries: &[Query],
    store: &PrototypeStore,
    family: &'a [WeightedPositiveSet],
    active: bool,
) -> Vec<&'a WeightedPositiveSet> {
    if !active {
        return Vec::new();
    }
    queries
        .iter()
        .map(|q| &family[store.flat_index(q.source).expect("sampled from the store's dataset")])
        .collect()
}

fn diverged(epoch: usize, iteration: usize, detail: impl Into<String>) -> Error {
    Error::Diverged {
        epoch,
        iteration,
        detail: detail.into(),
    }
}

/// Runs the full training schedule and returns the final encoder, the
/// prototype memory at the end of the last epoch and per-epoch metrics.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, MetricsReport)> {
    train_with_progress(dataset, cfg, |_| {})
}

/// [`train`], calling `on_epoch` after every finished epoch.
pub fn train_with_progress(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, MetricsReport)> {
    cfg.validate()?;
    for m in Modality::ALL {
        if dataset.modality_len(m) == 0 {
            return Err(Error::EmptyInput("training needs tracklets in both modalities"));
        }
    }
    let labelled = has_labels(dataset);
    let dims = EncoderDims::from_config(dataset.d_in(), cfg);
    let mut params = encoder_init(dims, cfg.seed)?;
    let mut opt = OptState::new(dims, cfg.lr, cfg.sgd_momentum);
    let partitions = partition_dataset(dataset, cfg.k);
    let mut epochs = Vec::with_capacity(cfg.e_total);
    let mut store = build_prototypes(&params, dataset, cfg)?;

    for e in 0..cfg.e_total {
        opt.lr = cfg.lr_at(e);
        if e > 0 {
            store = build_prototypes(&params, dataset, cfg)?;
        }
        let (positives, mining) = mine_epoch(&store, dataset, e, cfg, labelled)?;
        let (imcc_active, cm_active) = stage_gates(e, cfg);
        let mut rng = crate::rng::stream(cfg.seed, DOMAIN_EPOCH, e as u64);
        let mut iterations = Vec::with_capacity(cfg.iters_per_epoch);

        for it in 0..cfg.iters_per_epoch {
            let mut encoded = Vec::with_capacity(2);
            for m in Modality::ALL {
                let spec = sample_batch(dataset, &partitions, m, cfg, &mut rng)?;
                encoded.push(encode_batch(&params, dataset, &spec)?);
            }
            let intra: Vec<Vec<&WeightedPositiveSet>> = Modality::ALL
                .iter()
                .zip(&encoded)
                .map(|(m, b)| sets_for(&b.queries, &store, &positives[m.index()].intra, imcc_active))
                .collect();
            let cross: Vec<Vec<&WeightedPositiveSet>> = Modality::ALL
                .iter()
                .zip(&encoded)
                .map(|(m, b)| sets_for(&b.queries, &store, &positives[m.index()].cross, cm_active))
                .collect();
            let batches: Vec<ModalityBatch<'_>> = encoded
                .iter()
                .enumerate()
                .map(|(i, b)| ModalityBatch {
                    queries: &b.queries,
                    intra: &intra[i],
                    cross: &cross[i],
                })
                .collect();
            let loss = total_loss(e, &batches, &store, cfg)?;
            if !loss.l_total.is_finite() {
                return Err(diverged(e, it, format!("loss is {}", loss.l_total)));
            }

            let caches: Vec<&ForwardCache> = encoded.iter().flat_map(|b| &b.caches).collect();
            let per_query = caches
                .par_iter()
                .zip(loss.grads.par_iter())
                .map(|(cache, g)| encode_backward(&params, cache, g))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = EncoderParams::zeros(dims);
            for g in &per_query {
                grads.add_assign(g);
            }
            if !grads.is_finite() {
                return Err(diverged(e, it, "non-finite gradient"));
            }
            sgd_step(&mut params, &grads, &mut opt)?;
            params.round_to_f32();
            if !params.is_finite() {
                return Err(diverged(e, it, "non-finite parameters"));
            }

            for (i, b) in encoded.iter().enumerate() {
                ema_update(&mut store, &b.queries, &intra[i], &cross[i], cfg.alpha, cfg.ema_renormalize)?;
            }
            iterations.push(IterationLog {
                iteration: it,
                l_ic: loss.l_ic,
                l_imcc: loss.l_imcc,
                l_cm: loss.l_cm,
                l_total: loss.l_total,
            });
        }

        let mean = |f: fn(&IterationLog) -> f64| {
            if iterations.is_empty() {
                0.0
            } else {
                iterations.iter().map(f).sum::<f64>() / iterations.len() as f64
            }
        };
        epochs.push(EpochRecord {
            epoch: e,
            lr: opt.lr,
            rho: MiningRule::from_config(e, cfg)?.rho,
            imcc_active,
            cm_active,
            mean_l_ic: mean(|l| l.l_ic),
            mean_l_imcc: mean(|l| l.l_imcc),
            mean_l_cm: mean(|l| l.l_cm),
            mean_l_total: mean(|l| l.l_total),
            mining,
            iterations,
        });
        on_epoch(epochs.last().expect("just pushed"));
    }

    let report = MetricsReport {
        seed: cfg.seed,
        param_count: params.param_count(),
        epochs,
    };
    let checkpoint = Checkpoint {
        params,
        store,
        epoch: cfg.e_total,
        config: cfg.clone(),
    };
    Ok((checkpoint, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_dataset, GenConfig};

    fn tiny_dims() -> EncoderDims {
        EncoderDims::from_config(
            3,
            &TrainConfig {
                d: 4,
                d_ff: 4,
                n_tte_layers: 0,
                ..Default::default()
            },
        )
    }

    fn fill(dims: EncoderDims, value: f64) -> EncoderParams {
        let mut p = EncoderParams::zeros(dims);
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|x| *x = value);
        }
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let dims = tiny_dims();
        let mut p = fill(dims, 0.5);
        let before = p.clone();
        let mut opt = OptState::new(dims, 0.1, 0.9);
        sgd_step(&mut p, &EncoderParams::zeros(dims), &mut opt).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn plain_descent_without_momentum() {
        let dims = tiny_dims();
        let mut p = fill(dims, 1.0);
        let mut opt = OptState::new(dims, 0.1, 0.0);
        sgd_step(&mut p, &fill(dims, 2.0), &mut opt).unwrap();
        sgd_step(&mut p, &fill(dims, 2.0), &mut opt).unwrap();
        assert!(p.tensors().iter().all(|(_, t)| t.data.iter().all(|&x| (x - 0.6).abs() < 1e-12)));
    }

    #[test]
    fn momentum_two_step_decrement() {
        let dims = tiny_dims();
        let mut p = fill(dims, 1.0);
        let mut opt = OptState::new(dims, 0.01, 0.9);
        let g = fill(dims, 3.0);
        sgd_step(&mut p, &g, &mut opt).unwrap();
        sgd_step(&mut p, &g, &mut opt).unwrap();
        let expect = 1.0 - 0.01 * 3.0 * 2.9;
        assert!(p.tensors().iter().all(|(_, t)| t.data.iter().all(|&x| (x - expect).abs() < 1e-12)));
    }

    #[test]
    fn mismatched_grads_are_rejected() {
        let dims = tiny_dims();
        let other = EncoderDims { d: 5, ..dims };
        let mut p = fill(dims, 1.0);
        let mut opt = OptState::new(dims, 0.1, 0.9);
        assert!(matches!(
            sgd_step(&mut p, &EncoderParams::zeros(other), &mut opt),
            Err(Error::ShapeMismatch(_))
        ));
    }

    fn small_run() -> (Dataset, TrainConfig) {
        let ds = generate_dataset(&GenConfig {
            n_identities: 4,
            d_in: 6,
            d_latent: 4,
            frame_len_min: 4,
            frame_len_max: 8,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            d: 8,
            d_ff: 8,
            seq_len: 3,
            k: 2,
            n_tte_layers: 1,
            e_intra: 1,
            e_cross: 2,
            e_total: 3,
            iters_per_epoch: 4,
            seed: 9,
            ..Default::default()
        };
        (ds, cfg)
    }

    #[test]
    fn zero_epochs_return_initial_state() {
        let (ds, cfg) = small_run();
        let cfg = TrainConfig { e_total: 0, ..cfg };
        let (ck, report) = train(&ds, &cfg).unwrap();
        assert!(report.epochs.is_empty());
        let init = encoder_init(EncoderDims::from_config(ds.d_in(), &cfg), cfg.seed).unwrap();
        assert_eq!(ck.params, init);
        assert_eq!(ck.store, build_prototypes(&init, &ds, &cfg).unwrap());
    }

    #[test]
    fn repeated_runs_are_identical_and_gated() {
        let (ds, cfg) = small_run();
        let (a, ra) = train(&ds, &cfg).unwrap();
        let (b, rb) = train(&ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.epochs.len(), 3);
        let first = &ra.epochs[0];
        assert!(!first.imcc_active && !first.cm_active);
        assert!(first.iterations.iter().all(|l| l.l_imcc == 0.0 && l.l_cm == 0.0 && l.l_total == l.l_ic));
        assert!(ra.epochs[2].imcc_active && ra.epochs[2].cm_active);
        assert_eq!(first.mining.len(), 4);
        assert!(first.mining.iter().all(|f| f.quality.is_some()));
    }

    #[test]
    fn single_modality_is_rejected() {
        let (ds, cfg) = small_run();
        let vis: Vec<_> = ds
            .tracklets()
            .iter()
            .filter(|t| t.modality == Modality::Vis)
            .cloned()
            .collect();
        let ds = Dataset::new(ds.d_in(), 2, 2, vis).unwrap();
        assert!(matches!(train(&ds, &cfg), Err(Error::EmptyInput(_))));
    }
}

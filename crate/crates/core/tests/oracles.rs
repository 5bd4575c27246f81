//! Library results against independent naive implementations.

mod common;

use common::*;
use hitpro::datamodel::{l2_norm, MiningKind, Modality, TrainConfig};
use hitpro::encoder::{encode, encoder_init, EncoderDims};
use hitpro::evaluator::{embed_tracklet, evaluate_retrieval, Direction, LabeledEmbedding};
use hitpro::mining::{mine_positive_sets, mine_report, MiningRule};
use hitpro::objective::{
    ema_update, loss_cross_modal, loss_imcc, loss_intra_camera, total_loss, LossValue, ModalityBatch, Query,
};
use hitpro::prototyping::{build_prototypes, encode_sub_tracklet, partition_tracklet};
use hitpro::synthgen::{generate_dataset, GenConfig};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dims(n_layers: usize, positional: bool, normalize: bool) -> EncoderDims {
    EncoderDims {
        d_in: 5,
        d: 8,
        d_ff: 12,
        d_h: 6,
        seq_len: 4,
        n_layers,
        normalize,
        positional,
    }
}

#[test]
fn forward_matches_naive_implementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 0..=2 {
        for (positional, normalize) in [(false, true), (true, true), (true, false)] {
            let d = dims(n, positional, normalize);
            let mut p = encoder_init(d, rng.random()).unwrap();
            // move LN and biases off their trivial initial values
            for t in p.tensors_mut() {
                t.iter_mut().for_each(|x| *x += rng.random_range(-0.2..0.2));
            }
            for _ in 0..5 {
                let frames: Vec<Vec<f64>> = (0..d.seq_len)
                    .map(|_| (0..d.d_in).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .collect();
                let arr = Array2::from_shape_fn((d.seq_len, d.d_in), |(i, j)| frames[i][j]);
                let (e, _) = encode(&p, &arr).unwrap();
                let want = naive_forward(&p, &frames);
                for (a, b) in e.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-10, "layers {n}: {a} vs {b}");
                }
            }
        }
    }
}

fn loss_instance(seed: u64) -> (hitpro::datamodel::PrototypeStore, Vec<Query>, Vec<hitpro::datamodel::WeightedPositiveSet>, Vec<hitpro::datamodel::WeightedPositiveSet>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 6;
    let cams = [rng.random_range(1..=5), rng.random_range(1..=5)];
    let store = random_store(&mut rng, cams, 4, d);
    let b = rng.random_range(1..=8);
    let queries = random_queries(&mut rng, &store, Modality::Vis, b, d);
    let intra = random_sets(&mut rng, &store, &queries, MiningKind::IntraModal, 3);
    let cross = random_sets(&mut rng, &store, &queries, MiningKind::CrossModal, 3);
    (store, queries, intra, cross)
}

/// Max-norm relative error between analytic and central-difference
/// gradients of `f`, taken over all query embeddings jointly.
fn fd_error(queries: &[Query], analytic: &LossValue, f: impl Fn(&[Query]) -> f64) -> f64 {
    let h = 1e-6;
    let (mut diff, mut scale) = (0.0f64, 1e-12f64);
    for (i, g) in analytic.grads.iter().enumerate() {
        for (j, a) in g.iter().enumerate() {
            let mut plus = queries.to_vec();
            plus[i].embedding[j] += h;
            let mut minus = queries.to_vec();
            minus[i].embedding[j] -= h;
            let n = (f(&plus) - f(&minus)) / (2.0 * h);
            diff = diff.max((a - n).abs());
            scale = scale.max(a.abs()).max(n.abs());
        }
    }
    diff / scale
}

#[test]
fn losses_match_naive_sums_and_finite_differences() {
    let tau = 0.1;
    for seed in 0..20 {
        let (store, queries, intra, cross) = loss_instance(seed);
        let ir: Vec<_> = intra.iter().collect();
        let cr: Vec<_> = cross.iter().collect();

        let ic = loss_intra_camera(&queries, &store, tau).unwrap();
        assert!((ic.value - naive_intra(&queries, &store, tau)).abs() < 1e-10);
        assert!(ic.value >= 0.0);
        let e = fd_error(&queries, &ic, |q| loss_intra_camera(q, &store, tau).unwrap().value);
        assert!(e < 1e-6, "intra fd {e}");

        let im = loss_imcc(&queries, &store, &ir, tau).unwrap();
        assert!((im.value - naive_weighted(&queries, &store, &intra, tau)).abs() < 1e-10);
        let e = fd_error(&queries, &im, |q| loss_imcc(q, &store, &ir, tau).unwrap().value);
        assert!(e < 1e-6, "imcc fd {e}");

        let cm = loss_cross_modal(&queries, &store, &cr, tau).unwrap();
        assert!((cm.value - naive_weighted(&queries, &store, &cross, tau)).abs() < 1e-10);
        let e = fd_error(&queries, &cm, |q| loss_cross_modal(q, &store, &cr, tau).unwrap().value);
        assert!(e < 1e-6, "cm fd {e}");
    }
}

#[test]
fn early_epochs_reduce_to_intra_camera_loss_bitwise() {
    let cfg = TrainConfig::default();
    for seed in 0..10 {
        let (store, queries, intra, cross) = loss_instance(100 + seed);
        let ir: Vec<_> = intra.iter().collect();
        let cr: Vec<_> = cross.iter().collect();
        let batch = [ModalityBatch { queries: &queries, intra: &ir, cross: &cr }];
        for e in 0..cfg.e_intra {
            let total = total_loss(e, &batch, &store, &cfg).unwrap();
            let alone = loss_intra_camera(&queries, &store, cfg.tau).unwrap();
            assert_eq!(total.l_total.to_bits(), alone.value.to_bits());
            assert_eq!((total.l_imcc, total.l_cm), (0.0, 0.0));
            for (a, b) in total.grads.iter().zip(&alone.grads) {
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
        let mid = total_loss(10, &batch, &store, &cfg).unwrap();
        assert!(mid.imcc_active && !mid.cm_active);
        assert_eq!(mid.l_total, mid.l_ic + mid.l_imcc);
        let late = total_loss(20, &batch, &store, &cfg).unwrap();
        assert_eq!(late.l_total, late.l_ic + late.l_imcc + late.l_cm);
    }
}

#[test]
fn mining_matches_exhaustive_search() {
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let cams = [rng.random_range(1..=4), rng.random_range(1..=4)];
        let store = random_store(&mut rng, cams, 6, 3);
        for m in Modality::ALL {
            for kind in [MiningKind::IntraModal, MiningKind::CrossModal] {
                let mut previous: Option<Vec<Vec<_>>> = None;
                for rho in [1.0, 0.95, 0.90] {
                    let got = mine_report(&store, m, kind, &MiningRule::dynamic(rho, cfg.tau_w))
                        .unwrap()
                        .positive_sets();
                    let want = brute_mine(&store, m, kind, rho, cfg.tau_w);
                    assert_eq!(got.len(), want.len());
                    for (g, w) in got.iter().zip(&want) {
                        let targets: Vec<_> = g.entries.iter().map(|e| e.target).collect();
                        assert_eq!(targets, w.iter().map(|x| x.0).collect::<Vec<_>>());
                        for (e, x) in g.entries.iter().zip(w) {
                            assert!((e.weight - x.1).abs() < 1e-12);
                        }
                    }
                    let sets: Vec<Vec<_>> = got.iter().map(|s| s.entries.iter().map(|e| e.target).collect()).collect();
                    if let Some(prev) = &previous {
                        for (small, big) in prev.iter().zip(&sets) {
                            assert!(small.iter().all(|t| big.contains(t)));
                        }
                    }
                    previous = Some(sets);
                }
            }
        }
    }
}

#[test]
fn mining_ignores_vector_scale() {
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let store = random_store(&mut rng, [3, 2], 5, 4);
    let mut scaled = store.clone();
    for cams in scaled.cameras.iter_mut() {
        for p in cams.iter_mut().flatten() {
            let s = rng.random_range(0.1..10.0);
            p.vector.iter_mut().for_each(|x| *x *= s);
        }
    }
    for m in Modality::ALL {
        for kind in [MiningKind::IntraModal, MiningKind::CrossModal] {
            let a = mine_positive_sets(&store, m, kind, 3, &cfg).unwrap();
            let b = mine_positive_sets(&scaled, m, kind, 3, &cfg).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(
                    x.entries.iter().map(|e| e.target).collect::<Vec<_>>(),
                    y.entries.iter().map(|e| e.target).collect::<Vec<_>>()
                );
            }
        }
    }
}

#[test]
fn retrieval_matches_sort_and_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let mk = |rng: &mut ChaCha8Rng, id: u32| LabeledEmbedding {
            vector: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            identity: id,
        };
        let gallery: Vec<_> = (0..20).map(|i| mk(&mut rng, i % 6)).collect();
        let queries: Vec<_> = (0..5).map(|i| mk(&mut rng, i as u32)).collect();
        let scores: Vec<Vec<f64>> = queries
            .iter()
            .map(|q| gallery.iter().map(|g| hitpro::mining::cosine_sim(&q.vector, &g.vector).unwrap()).collect())
            .collect();
        let qid: Vec<u32> = queries.iter().map(|q| q.identity).collect();
        let gid: Vec<u32> = gallery.iter().map(|g| g.identity).collect();
        let (cmc, map) = naive_retrieval(&scores, &qid, &gid, 20);
        let r = evaluate_retrieval(Direction::IrToVis, &queries, &gallery, 20).unwrap();
        assert_eq!(r.cmc, cmc);
        assert_eq!(r.map, map);
        assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        assert!(r.map <= r.cmc[19] + 1e-15 && (0.0..=1.0).contains(&r.map));

        let scale = |v: &[LabeledEmbedding], s: f64| -> Vec<LabeledEmbedding> {
            v.iter()
                .map(|e| LabeledEmbedding { vector: e.vector.iter().map(|x| x * s).collect(), identity: e.identity })
                .collect()
        };
        let r2 = evaluate_retrieval(Direction::IrToVis, &scale(&queries, 3.5), &scale(&gallery, 0.25), 20).unwrap();
        assert_eq!(r.cmc, r2.cmc);
        assert_eq!(r.map, r2.map);
    }
}

#[test]
fn tracklet_features_follow_the_prototype_recipe() {
    let ds = generate_dataset(&GenConfig {
        n_identities: 5,
        d_in: 6,
        d_latent: 4,
        frame_len_min: 3,
        frame_len_max: 10,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig { d: 8, d_ff: 8, seq_len: 3, ..Default::default() };
    let p = encoder_init(EncoderDims::from_config(6, &cfg), 2).unwrap();
    let store = build_prototypes(&p, &ds, &cfg).unwrap();
    for m in Modality::ALL {
        for r in store.refs(m) {
            let t = &ds.tracklets()[ds.camera_tracklets(m, r.camera)[r.index]];
            let e = embed_tracklet(&p, t, &cfg).unwrap();
            let proto = &store.get(r).unwrap().vector;
            assert!(e.iter().zip(proto).all(|(a, b)| (a - b).abs() < 1e-10));
            assert_eq!(e, embed_tracklet(&p, t, &cfg).unwrap());
        }
    }
    let one = TrainConfig { k: 1, ..cfg.clone() };
    let t = &ds.tracklets()[0];
    let sub = partition_tracklet(0, t.len(), 1)[0];
    let (direct, _) = encode_sub_tracklet(&p, t, &sub).unwrap();
    let via = embed_tracklet(&p, t, &one).unwrap();
    assert!(direct.iter().zip(&via).all(|(a, b)| (a - b).abs() < 1e-12));
}

proptest! {
    #[test]
    fn ema_keeps_touched_prototypes_unit(seed in any::<u64>(), alpha in 0.01f64..1.0) {
        let (mut store, queries, intra, cross) = loss_instance(seed);
        let ir: Vec<_> = intra.iter().collect();
        let cr: Vec<_> = cross.iter().collect();
        ema_update(&mut store, &queries, &ir, &cr, alpha, true).unwrap();
        for cams in &store.cameras {
            for p in cams.iter().flatten() {
                prop_assert!((l2_norm(&p.vector) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn losses_are_finite_and_non_negative(seed in any::<u64>(), tau in 0.01f64..1.0) {
        let (store, queries, intra, cross) = loss_instance(seed);
        let ir: Vec<_> = intra.iter().collect();
        let cr: Vec<_> = cross.iter().collect();
        for v in [
            loss_intra_camera(&queries, &store, tau).unwrap().value,
            loss_imcc(&queries, &store, &ir, tau).unwrap().value,
            loss_cross_modal(&queries, &store, &cr, tau).unwrap().value,
        ] {
            prop_assert!(v.is_finite() && v >= 0.0);
        }
    }
}

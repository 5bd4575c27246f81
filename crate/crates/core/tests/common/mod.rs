//! Naive reference implementations and fixed run configurations shared by
//! the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use hitpro::cli::RunConfig;
use hitpro::datamodel::{
    MiningKind, Modality, ProtoRef, Prototype, PrototypeStore, WeightedPositiveSet,
};
use hitpro::encoder::EncoderParams;
use hitpro::objective::Query;
use rand::Rng;

pub fn noisy_config() -> RunConfig {
    serde_json::from_str(include_str!("../../../../configs/noisy.json")).unwrap()
}

pub fn degenerate_config() -> RunConfig {
    serde_json::from_str(include_str!("../../../../configs/degenerate.json")).unwrap()
}

type Mat = Vec<Vec<f64>>;

fn matrix(data: &[f64], rows: usize, cols: usize) -> Mat {
    assert_eq!(data.len(), rows * cols);
    (0..rows).map(|r| data[r * cols..(r + 1) * cols].to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / sd * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

/// Straightforward triple-loop forward pass of the encoder.
pub fn naive_forward(params: &EncoderParams, frames: &Mat) -> Vec<f64> {
    let dims = params.dims;
    let t: HashMap<String, Vec<f64>> = params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.data.to_vec()))
        .collect();
    let d = dims.d;
    let mut h = matmul(frames, &matrix(&t["w_proj"], dims.d_in, d));
    if dims.positional {
        h = add(&h, &matrix(&t["pos"], dims.seq_len, d));
    }
    for l in 0..dims.n_layers {
        let g = |s: &str| t[&format!("tte{l}.{s}")].clone();
        let q = matmul(&h, &matrix(&g("w_q"), d, d));
        let k = matmul(&h, &matrix(&g("w_k"), d, d));
        let v = matmul(&h, &matrix(&g("w_v"), d, d));
        let mut ctx = vec![vec![0.0; d]; h.len()];
        for i in 0..h.len() {
            let scores: Vec<f64> = (0..h.len())
                .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let a = softmax(&scores);
            for j in 0..h.len() {
                for c in 0..d {
                    ctx[i][c] += a[j] * v[j][c];
                }
            }
        }
        let attn_out = matmul(&ctx, &matrix(&g("w_o"), d, d));
        let n1 = layer_norm(&add(&h, &attn_out), &g("ln1_gain"), &g("ln1_bias"));
        let mut ff = matmul(&n1, &matrix(&g("w_ff1"), d, dims.d_ff));
        ff.iter_mut().flatten().for_each(|x| *x = x.max(0.0));
        let ff = matmul(&ff, &matrix(&g("w_ff2"), dims.d_ff, d));
        h = layer_norm(&add(&n1, &ff), &g("ln2_gain"), &g("ln2_bias"));
    }
    let w1 = matrix(&t["afm.w1"], d, dims.d_h);
    let scores: Vec<f64> = h
        .iter()
        .map(|row| {
            (0..dims.d_h)
                .map(|j| {
                    let pre: f64 = (0..d).map(|c| row[c] * w1[c][j]).sum::<f64>() + t["afm.b1"][j];
                    pre.max(0.0) * t["afm.w2"][j]
                })
                .sum()
        })
        .collect();
    let alpha = softmax(&scores);
    let mut pooled = vec![0.0; d];
    for (row, a) in h.iter().zip(&alpha) {
        for c in 0..d {
            pooled[c] += a * row[c];
        }
    }
    if dims.normalize {
        let n = pooled.iter().map(|x| x * x).sum::<f64>().sqrt();
        pooled.iter_mut().for_each(|x| *x /= n);
    }
    pooled
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-log(exp(q.p_t / tau) / sum_k exp(q.p_k / tau))` by explicit sums.
fn naive_ce(q: &[f64], camera: &[Prototype], target: usize, tau: f64) -> f64 {
    let mut denom = 0.0;
    for p in camera {
        denom += (dot(q, &p.vector) / tau).exp();
    }
    -((dot(q, &camera[target].vector) / tau).exp() / denom).ln()
}

pub fn naive_intra(queries: &[Query], store: &PrototypeStore, tau: f64) -> f64 {
    let mut total = 0.0;
    for q in queries {
        let cam = store.camera(q.source.modality, q.source.camera);
        total += naive_ce(q.embedding.as_slice().unwrap(), cam, q.source.index, tau);
    }
    total / queries.len() as f64
}

pub fn naive_weighted(queries: &[Query], store: &PrototypeStore, sets: &[WeightedPositiveSet], tau: f64) -> f64 {
    let mut total = 0.0;
    for (q, set) in queries.iter().zip(sets) {
        for e in &set.entries {
            let cam = store.camera(e.target.modality, e.target.camera);
            total += e.weight * naive_ce(q.embedding.as_slice().unwrap(), cam, e.target.index, tau);
        }
    }
    total / queries.len() as f64
}

fn unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Store with `cams[m]` cameras per modality and 1..=`max_per_cam`
/// prototypes per camera.
pub fn random_store<R: Rng>(rng: &mut R, cams: [usize; 2], max_per_cam: usize, d: usize) -> PrototypeStore {
    let mut store = PrototypeStore::new(cams[0], cams[1]);
    for m in Modality::ALL {
        for c in 0..cams[m.index()] {
            let n = rng.random_range(1..=max_per_cam);
            for i in 0..n {
                store.cameras[m.index()][c].push(Prototype {
                    tracklet_id: format!("{m}-{c}-{i}"),
                    modality: m,
                    camera_id: c as u32,
                    vector: unit(rng, d),
                });
            }
        }
    }
    store
}

pub fn random_queries<R: Rng>(rng: &mut R, store: &PrototypeStore, m: Modality, b: usize, d: usize) -> Vec<Query> {
    let refs = store.refs(m);
    (0..b)
        .map(|_| Query {
            embedding: unit(rng, d).into(),
            source: refs[rng.random_range(0..refs.len())],
        })
        .collect()
}

/// Random positive sets: up to `max_entries` targets in random cameras of
/// the family's target modality, with random normalized weights.
pub fn random_sets<R: Rng>(
    rng: &mut R,
    store: &PrototypeStore,
    queries: &[Query],
    kind: MiningKind,
    max_entries: usize,
) -> Vec<WeightedPositiveSet> {
    queries
        .iter()
        .map(|q| {
            let tm = match kind {
                MiningKind::IntraModal => q.source.modality,
                MiningKind::CrossModal => q.source.modality.other(),
            };
            let cams: Vec<u32> = (0..store.n_cameras(tm) as u32)
                .filter(|&c| kind == MiningKind::CrossModal || c != q.source.camera)
                .collect();
            let n = rng.random_range(0..=max_entries.min(cams.len()));
            let chosen = rand::seq::index::sample(rng, cams.len(), n).into_vec();
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let entries = (0..n)
                .map(|i| {
                    let camera = cams[chosen[i]];
                    let index = rng.random_range(0..store.camera(tm, camera).len());
                    hitpro::datamodel::PositiveEntry {
                        target: ProtoRef { modality: tm, camera, index },
                        sim: 0.5,
                        weight: raw[i] / sum,
                    }
                })
                .collect();
            WeightedPositiveSet { source: q.source, kind, entries }
        })
        .collect()
}

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Exhaustive mining: best match per target camera, dynamic threshold
/// `rho * s_max`, softmax weights. Returns `(target, weight)` per source in
/// `refs` order.
pub fn brute_mine(
    store: &PrototypeStore,
    source: Modality,
    kind: MiningKind,
    rho: f64,
    tau_w: f64,
) -> Vec<Vec<(ProtoRef, f64)>> {
    let tm = match kind {
        MiningKind::IntraModal => source,
        MiningKind::CrossModal => source.other(),
    };
    store
        .refs(source)
        .into_iter()
        .map(|src| {
            let v = &store.get(src).unwrap().vector;
            let mut best = Vec::new();
            for c in 0..store.n_cameras(tm) as u32 {
                if kind == MiningKind::IntraModal && c == src.camera {
                    continue;
                }
                let protos = store.camera(tm, c);
                let mut bi = None;
                for (j, p) in protos.iter().enumerate() {
                    let s = naive_cos(v, &p.vector);
                    match bi {
                        Some((_, bs)) if s <= bs => {}
                        _ => bi = Some((j, s)),
                    }
                }
                if let Some((index, s)) = bi {
                    best.push((ProtoRef { modality: tm, camera: c, index }, s));
                }
            }
            let s_max = best.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
            if best.is_empty() || s_max <= 0.0 {
                return Vec::new();
            }
            let kept: Vec<_> = best.into_iter().filter(|b| b.1 >= rho * s_max).collect();
            let m = kept.iter().map(|k| k.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = kept.iter().map(|k| ((k.1 - m) / tau_w).exp()).sum();
            kept.iter()
                .map(|k| (k.0, ((k.1 - m) / tau_w).exp() / z))
                .collect()
        })
        .collect()
}

/// Sort-and-scan CMC and mAP on a score matrix.
pub fn naive_retrieval(scores: &[Vec<f64>], query_ids: &[u32], gallery_ids: &[u32], max_rank: usize) -> (Vec<f64>, f64) {
    let mut cmc = vec![0.0; max_rank];
    let mut map = 0.0;
    for (qi, row) in scores.iter().enumerate() {
        let mut order: Vec<usize> = (0..row.len()).collect();
        // bubble sort: descending score, ascending index on ties
        for i in 0..order.len() {
            for j in 0..order.len() - 1 - i {
                let (a, b) = (order[j], order[j + 1]);
                if row[b] > row[a] {
                    order.swap(j, j + 1);
                }
            }
        }
        let rel: Vec<bool> = order.iter().map(|&g| gallery_ids[g] == query_ids[qi]).collect();
        let first = rel.iter().position(|&r| r).unwrap();
        for (k, c) in cmc.iter_mut().enumerate() {
            if first <= k {
                *c += 1.0;
            }
        }
        let mut hits = 0.0;
        let mut ap = 0.0;
        for (pos, &r) in rel.iter().enumerate() {
            if r {
                hits += 1.0;
                ap += hits / (pos + 1) as f64;
            }
        }
        map += ap / hits;
    }
    let n = scores.len() as f64;
    (cmc.iter().map(|c| c / n).collect(), map / n)
}

/// Gradient of [`naive_ce`] with respect to `q`, by explicit loops.
fn naive_ce_grad(q: &[f64], camera: &[Prototype], target: usize, tau: f64) -> Vec<f64> {
    let exps: Vec<f64> = camera.iter().map(|p| (dot(q, &p.vector) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut g = vec![0.0; q.len()];
    for (p, e) in camera.iter().zip(&exps) {
        for (gc, v) in g.iter_mut().zip(p.vector.iter()) {
            *gc += e / z * v / tau;
        }
    }
    for (gc, v) in g.iter_mut().zip(camera[target].vector.iter()) {
        *gc -= v / tau;
    }
    g
}

pub fn naive_intra_grads(queries: &[Query], store: &PrototypeStore, tau: f64) -> Vec<Vec<f64>> {
    let b = queries.len() as f64;
    queries
        .iter()
        .map(|q| {
            let cam = store.camera(q.source.modality, q.source.camera);
            naive_ce_grad(q.embedding.as_slice().unwrap(), cam, q.source.index, tau)
                .into_iter()
                .map(|x| x / b)
                .collect()
        })
        .collect()
}

pub fn naive_weighted_grads(
    queries: &[Query],
    store: &PrototypeStore,
    sets: &[WeightedPositiveSet],
    tau: f64,
) -> Vec<Vec<f64>> {
    let b = queries.len() as f64;
    queries
        .iter()
        .zip(sets)
        .map(|(q, set)| {
            let mut g = vec![0.0; q.embedding.len()];
            for e in &set.entries {
                let cam = store.camera(e.target.modality, e.target.camera);
                let ge = naive_ce_grad(q.embedding.as_slice().unwrap(), cam, e.target.index, tau);
                for c in 0..g.len() {
                    g[c] += e.weight * ge[c] / b;
                }
            }
            g
        })
        .collect()
}

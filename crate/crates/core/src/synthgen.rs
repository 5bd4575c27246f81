//! Synthetic cross-modal tracklet datasets with known identities.
//!
//! Frame `t` of a tracklet of identity `z` seen by camera `c` of modality `m`
//! is `A_m (z + o_c + w_t) + eps_t`: `o_c` is a per-camera latent offset,
//! `w_t` a Gaussian random walk reflected at `+-3 sigma_walk`, `eps_t` i.i.d.
//! frame noise and `A_m = (1 - sigma_mod) I_pad + sigma_mod Q_m` a per-modality
//! linear map built from a random matrix `Q_m` with orthonormal columns.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, Modality, Tracklet};
use crate::error::{Error, Result};

const DOMAIN_GLOBAL: u64 = 0x5947_0001;
const DOMAIN_TRACKLET: u64 = 0x5947_0002;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_identities: usize,
    pub cams_vis: u32,
    pub cams_ir: u32,
    pub d_in: usize,
    pub d_latent: usize,
    pub tracklets_per_identity_per_camera: usize,
    pub frame_len_min: usize,
    pub frame_len_max: usize,
    /// Std-dev of the per-camera latent offset.
    pub sigma_cam: f64,
    /// Blend between the padded identity and a random orthonormal map, in `[0, 1]`.
    pub sigma_mod: f64,
    /// Std-dev of i.i.d. frame noise in input space.
    pub sigma_frame: f64,
    /// Step std-dev of the within-tracklet latent random walk.
    pub sigma_walk: f64,
    /// Force both modality maps to the padded identity.
    pub identity_modality_maps: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_identities: 50,
            cams_vis: 2,
            cams_ir: 2,
            d_in: 32,
            d_latent: 8,
            tracklets_per_identity_per_camera: 1,
            frame_len_min: 12,
            frame_len_max: 24,
            sigma_cam: 0.5,
            sigma_mod: 0.5,
            sigma_frame: 0.3,
            sigma_walk: 0.3,
            identity_modality_maps: false,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.d_latent == 0 || self.d_in == 0 {
            return bad("d_in and d_latent must be >= 1");
        }
        if self.d_latent > self.d_in {
            return bad("d_latent must not exceed d_in");
        }
        if self.frame_len_min == 0 || self.frame_len_min > self.frame_len_max {
            return bad("need 1 <= frame_len_min <= frame_len_max");
        }
        for (name, v) in [
            ("sigma_cam", self.sigma_cam),
            ("sigma_frame", self.sigma_frame),
            ("sigma_walk", self.sigma_walk),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.sigma_mod) {
            return bad("sigma_mod must lie in [0, 1]");
        }
        Ok(())
    }
}

fn gaussian<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || scale * rng.sample::<f64, _>(StandardNormal))
}

/// `d_in x d_latent` matrix with orthonormal columns (Gram-Schmidt on a
/// Gaussian draw).
fn random_orthonormal<R: Rng>(rng: &mut R, d_in: usize, d_latent: usize) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((d_in, d_latent));
    let mut j = 0;
    while j < d_latent {
        let mut v = gaussian(rng, d_in, 1.0);
        for k in 0..j {
            let proj = q.column(k).dot(&v);
            v.scaled_add(-proj, &q.column(k));
        }
        let n = v.dot(&v).sqrt();
        if n < 1e-8 {
            continue;
        }
        q.column_mut(j).assign(&(v / n));
        j += 1;
    }
    q
}

fn modality_map<R: Rng>(rng: &mut R, cfg: &GenConfig) -> Array2<f64> {
    let mut pad = Array2::<f64>::zeros((cfg.d_in, cfg.d_latent));
    for i in 0..cfg.d_latent {
        pad[[i, i]] = 1.0;
    }
    let q = random_orthonormal(rng, cfg.d_in, cfg.d_latent);
    if cfg.identity_modality_maps {
        pad
    } else {
        pad * (1.0 - cfg.sigma_mod) + q * cfg.sigma_mod
    }
}

fn reflect(x: f64, bound: f64) -> f64 {
    if bound <= 0.0 {
        return 0.0;
    }
    let period = 4.0 * bound;
    let mut y = (x + bound).rem_euclid(period);
    if y > 2.0 * bound {
        y = period - y;
    }
    y - bound
}

struct TrackletPlan {
    modality: Modality,
    camera: u32,
    identity: usize,
    rep: usize,
}

/// Generates the dataset described by `cfg`. Deterministic in `cfg.seed`
/// regardless of the rayon thread count.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = crate::rng::stream(cfg.seed, DOMAIN_GLOBAL, 0);
    let maps = [modality_map(&mut rng, cfg), modality_map(&mut rng, cfg)];
    let identities: Vec<Array1<f64>> = (0..cfg.n_identities)
        .map(|_| gaussian(&mut rng, cfg.d_latent, 1.0))
        .collect();
    let n_cams = [cfg.cams_vis, cfg.cams_ir];
    let offsets: Vec<Vec<Array1<f64>>> = n_cams
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| gaussian(&mut rng, cfg.d_latent, cfg.sigma_cam))
                .collect()
        })
        .collect();

    let mut plans = Vec::new();
    for m in Modality::ALL {
        for camera in 0..n_cams[m.index()] {
            for identity in 0..cfg.n_identities {
                for rep in 0..cfg.tracklets_per_identity_per_camera {
                    plans.push(TrackletPlan {
                        modality: m,
                        camera,
                        identity,
                        rep,
                    });
                }
            }
        }
    }

    let bound = 3.0 * cfg.sigma_walk;
    let tracklets: Vec<Tracklet> = plans
        .par_iter()
        .enumerate()
        .map(|(idx, plan)| {
            let mut rng = crate::rng::stream(cfg.seed, DOMAIN_TRACKLET, idx as u64);
            let len = rng.random_range(cfg.frame_len_min..=cfg.frame_len_max);
            let map = &maps[plan.modality.index()];
            let base = &identities[plan.identity] + &offsets[plan.modality.index()][plan.camera as usize];
            let mut walk = Array1::<f64>::zeros(cfg.d_latent);
            let mut frames = Array2::<f32>::zeros((len, cfg.d_in));
            for t in 0..len {
                if t > 0 {
                    for w in walk.iter_mut() {
                        let step: f64 = rng.sample(StandardNormal);
                        *w = reflect(*w + cfg.sigma_walk * step, bound);
                    }
                }
                let latent = &base + &walk;
                let x = map.dot(&latent) + gaussian(&mut rng, cfg.d_in, cfg.sigma_frame);
                frames
                    .row_mut(t)
                    .iter_mut()
                    .zip(x.iter())
                    .for_each(|(f, &v)| *f = v as f32);
            }
            let tag = match plan.modality {
                Modality::Vis => "vis",
                Modality::Ir => "ir",
            };
            Tracklet {
                tracklet_id: format!("{tag}_c{}_id{:04}_{}", plan.camera, plan.identity, plan.rep),
                modality: plan.modality,
                camera_id: plan.camera,
                frames,
                gt_identity: Some(plan.identity as u32),
            }
        })
        .collect();

    Dataset::new(cfg.d_in, cfg.cams_vis, cfg.cams_ir, tracklets)
}

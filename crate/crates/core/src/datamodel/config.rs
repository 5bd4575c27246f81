use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training hyper-parameters and ablation toggles.
///
/// Defaults follow the published training recipe where one exists
/// (K = 4, seq_len = 6, tau = 0.05, tau_w = 0.1, rho 0.99 -> 0.90,
/// alpha = 0.2, stages at epochs 5 / 15 of 60, 300 iterations per epoch,
/// 2 x 2 x 2 batches, SGD lr 3.5e-4 with momentum 0.9 decayed x0.1 every
/// 20 epochs, two temporal layers). Embedding widths are desk-scale choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Sub-tracklets per tracklet.
    pub k: usize,
    /// Frames fed to the encoder per sub-tracklet.
    pub seq_len: usize,
    /// Embedding width.
    pub d: usize,
    /// Feed-forward width of the temporal layers.
    pub d_ff: usize,
    /// Frame-weighting hidden width; `None` means `d`.
    pub d_h: Option<usize>,
    pub n_tte_layers: usize,
    /// Add a learned per-position vector after the frame projection.
    pub positional_embedding: bool,
    /// Loss temperature.
    pub tau: f64,
    /// Soft-weight temperature.
    pub tau_w: f64,
    pub rho_init: f64,
    pub rho_final: f64,
    /// EMA momentum of the prototype update.
    pub alpha: f64,
    pub e_intra: usize,
    pub e_cross: usize,
    pub e_total: usize,
    pub iters_per_epoch: usize,
    /// Cameras per modality batch.
    pub cameras_per_batch: usize,
    /// Tracklets per camera.
    pub tracklets_per_camera: usize,
    /// Sub-tracklets per tracklet.
    pub subs_per_tracklet: usize,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub use_imcc: bool,
    pub use_cm: bool,
    pub use_hls: bool,
    pub use_dts: bool,
    /// Threshold used when `use_dts` is off.
    pub fixed_threshold: f64,
    pub use_swa: bool,
    /// L2-normalize encoder outputs.
    pub normalize_embeddings: bool,
    /// L2-normalize prototypes after averaging sub-tracklet embeddings.
    pub normalize_prototypes: bool,
    /// L2-normalize prototypes after every EMA update.
    pub ema_renormalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 4,
            seq_len: 6,
            d: 32,
            d_ff: 64,
            d_h: None,
            n_tte_layers: 2,
            positional_embedding: false,
            tau: 0.05,
            tau_w: 0.1,
            rho_init: 0.99,
            rho_final: 0.90,
            alpha: 0.2,
            e_intra: 5,
            e_cross: 15,
            e_total: 60,
            iters_per_epoch: 300,
            cameras_per_batch: 2,
            tracklets_per_camera: 2,
            subs_per_tracklet: 2,
            lr: 0.00035,
            sgd_momentum: 0.9,
            lr_decay_every: 20,
            lr_decay_factor: 0.1,
            seed: 0,
            use_imcc: true,
            use_cm: true,
            use_hls: true,
            use_dts: true,
            fixed_threshold: 0.6,
            use_swa: true,
            normalize_embeddings: true,
            normalize_prototypes: true,
            ema_renormalize: true,
        }
    }
}

impl TrainConfig {
    pub fn d_h(&self) -> usize {
        self.d_h.unwrap_or(self.d)
    }

    /// Checks the documented field invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.seq_len == 0 || self.d == 0 || self.d_ff == 0 || self.d_h() == 0 {
            return bad("seq_len, d, d_ff and d_h must be >= 1".into());
        }
        if self.n_tte_layers > 2 {
            return bad(format!("n_tte_layers = {} exceeds 2", self.n_tte_layers));
        }
        if !(self.tau > 0.0 && self.tau_w > 0.0) {
            return bad("tau and tau_w must be > 0".into());
        }
        if !(0.0 < self.rho_final && self.rho_final <= self.rho_init && self.rho_init <= 1.0) {
            return bad(format!(
                "need 0 < rho_final <= rho_init <= 1, got {} / {}",
                self.rho_final, self.rho_init
            ));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        // stages starting at or after e_total simply never activate
        if self.e_intra > self.e_cross {
            return bad(format!(
                "need e_intra <= e_cross, got {} / {}",
                self.e_intra, self.e_cross
            ));
        }
        if self.cameras_per_batch == 0 || self.tracklets_per_camera == 0 || self.subs_per_tracklet == 0 {
            return bad("batch shape C, P, S must all be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0".into());
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return bad("sgd_momentum must lie in [0, 1)".into());
        }
        if self.lr_decay_factor.is_nan() || self.lr_decay_factor <= 0.0 {
            return bad("lr_decay_factor must be > 0".into());
        }
        Ok(())
    }

    /// Batch size per modality, `C * P * S`.
    pub fn batch_size(&self) -> usize {
        self.cameras_per_batch * self.tracklets_per_camera * self.subs_per_tracklet
    }

    /// Learning rate in effect during epoch `e`.
    pub fn lr_at(&self, e: usize) -> f64 {
        if self.lr_decay_every == 0 {
            return self.lr;
        }
        self.lr * self.lr_decay_factor.powi((e / self.lr_decay_every) as i32)
    }
}

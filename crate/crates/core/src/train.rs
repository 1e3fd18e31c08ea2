//! Synthetic latent-puppet data, the teacher-forced training loop, metrics,
//! and the finite-difference gradient check.

use serde::{Deserialize, Serialize};

/// Training hyperparameters; the `[train]` section of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optimizer steps.
    pub steps: usize,
    pub learning_rate: f64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    /// Distinct puppet identities in the training pool.
    pub identities: usize,
    /// Pre-generated training sequences (cycled through by step).
    pub train_sequences: usize,
    /// Held-out sequences for the evaluation metrics.
    pub eval_sequences: usize,
    /// Rollout length of the correlation evaluation.
    pub eval_rollout_frames: usize,
    /// Upper bound of the per-frame input-noise scale, relative to the
    /// frame RMS.
    pub noise_gamma_max: f64,
    /// Training mask-ratio range for the spatial generator.
    pub mask_ratio_min: f64,
    pub mask_ratio_max: f64,
    /// Optional two-phase recipe: phase one trains with a fixed position
    /// offset and no motion-intensity signal, phase two enables both.
    pub two_phase: bool,
    /// Fraction of steps spent in phase one when `two_phase` is set.
    pub phase_split: f64,
    /// Steps between metric log rows.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            learning_rate: 1e-3,
            batch_size: 2,
            identities: 4,
            train_sequences: 64,
            eval_sequences: 12,
            eval_rollout_frames: 12,
            noise_gamma_max: 0.1,
            mask_ratio_min: 0.7,
            mask_ratio_max: 1.0,
            two_phase: false,
            phase_split: 0.3,
            eval_interval: 250,
        }
    }
}

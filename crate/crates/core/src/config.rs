//! Model configuration, validation, and the on-disk config format.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;

use crate::error::{ModelError, Result};
use crate::train::TrainConfig;

/// Condition tokens per frame: one audio token, one motion-intensity token.
pub const COND_TOKENS: usize = 2;

/// Shape of the model and its samplers. Field names are the documented keys
/// of the `[model]` section of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Token dimension (every visual/condition token lives in R^token_dim).
    pub token_dim: usize,
    /// Spatial tokens per latent frame.
    pub spatial_tokens: usize,
    /// Dimension of the per-frame audio embedding.
    pub audio_dim: usize,
    /// Attention window length in latent frames (incl. the sink), >= 2.
    pub window_frames: usize,
    /// Number of disjoint spatial generation groups, 1..=spatial_tokens.
    pub mar_groups: usize,
    /// Transformer layer count of the frame-causal backbone.
    pub layers: usize,
    /// Attention head count; must divide token_dim.
    pub heads: usize,
    /// Diffusion training timesteps.
    pub diff_train_steps: usize,
    /// Sampler steps at inference (strided sub-schedule).
    pub diff_sample_steps: usize,
    /// Motion-intensity bin count.
    pub intensity_bins: usize,
    /// Width of one motion-intensity bin.
    pub intensity_bin_width: f64,
    /// Base seed for every labeled random stream.
    pub seed: u64,
    /// Resample the spatial group plan for every generated frame. When false
    /// a single plan drawn at session start is reused for all frames.
    #[serde(default = "default_true")]
    pub resample_plan_per_frame: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            token_dim: 16,
            spatial_tokens: 16,
            audio_dim: 8,
            window_frames: 4,
            mar_groups: 4,
            layers: 4,
            heads: 4,
            diff_train_steps: 1000,
            diff_sample_steps: 8,
            intensity_bins: 64,
            intensity_bin_width: 0.002,
            seed: 42,
            resample_plan_per_frame: true,
        }
    }
}

/// Collected validation failures, one entry per violated invariant.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigReport {
    pub violations: Vec<String>,
}

impl ConfigReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ConfigReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

impl ModelConfig {
    /// Check every config invariant; the report names each violated one.
    pub fn check(&self) -> ConfigReport {
        let mut r = ConfigReport::default();
        let mut positive = |name: &str, v: usize| {
            if v == 0 {
                r.violations.push(format!("{name} must be positive"));
            }
        };
        positive("token_dim", self.token_dim);
        positive("spatial_tokens", self.spatial_tokens);
        positive("audio_dim", self.audio_dim);
        positive("layers", self.layers);
        positive("heads", self.heads);
        positive("diff_train_steps", self.diff_train_steps);
        positive("diff_sample_steps", self.diff_sample_steps);
        positive("intensity_bins", self.intensity_bins);
        positive("mar_groups", self.mar_groups);
        let r = &mut r;
        if self.window_frames < 2 {
            r.violations.push("window_frames >= 2".into());
        }
        if self.mar_groups > self.spatial_tokens {
            r.violations
                .push("mar_groups <= spatial_tokens".into());
        }
        if self.heads > 0 && self.token_dim % self.heads != 0 {
            r.violations.push("heads divides token_dim".into());
        }
        if self.diff_sample_steps > self.diff_train_steps {
            r.violations
                .push("diff_sample_steps <= diff_train_steps".into());
        }
        if !(self.intensity_bin_width > 0.0) || !self.intensity_bin_width.is_finite() {
            r.violations.push("intensity_bin_width > 0".into());
        }
        r.clone()
    }

    pub fn validate(&self) -> Result<()> {
        let report = self.check();
        if report.is_ok() {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(report.to_string()))
        }
    }

    /// Length of the cyclic temporal position table: 2N-1.
    pub fn pos_table_len(&self) -> usize {
        2 * self.window_frames - 1
    }

    /// Tokens per frame in the interleaved layout.
    pub fn frame_tokens(&self) -> usize {
        COND_TOKENS + self.spatial_tokens
    }

    /// Hidden width of the transformer MLPs.
    pub fn mlp_hidden(&self) -> usize {
        4 * self.token_dim
    }

    /// Hidden width of the per-token denoiser head.
    pub fn head_hidden(&self) -> usize {
        4 * self.token_dim
    }

    /// Spatial grid used for the learned 2-D slot embeddings: the most
    /// square factorization rows*cols = spatial_tokens with rows <= cols.
    pub fn slot_grid(&self) -> (usize, usize) {
        let s = self.spatial_tokens;
        let mut rows = (s as f64).sqrt().floor() as usize;
        while rows > 1 && s % rows != 0 {
            rows -= 1;
        }
        (rows.max(1), s / rows.max(1))
    }

    /// Content hash binding caches, checkpoints, and latent files to the
    /// producing config.
    pub fn content_hash(&self) -> [u8; 32] {
        let text = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        hasher.finalize().into()
    }

    pub fn content_hash_hex(&self) -> String {
        self.content_hash().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Full config file: `[model]` plus an optional `[train]` section.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl FileConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: FileConfig = toml::from_str(text)
            .map_err(|e| ModelError::InvalidConfig(format!("  - parse error: {e}")))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = ModelConfig::default();
        assert!(cfg.check().is_ok(), "{}", cfg.check());
        assert_eq!(cfg.pos_table_len(), 7);
        assert_eq!(cfg.slot_grid(), (4, 4));
    }

    #[test]
    fn group_count_above_slots_is_reported() {
        let cfg = ModelConfig {
            mar_groups: 20,
            spatial_tokens: 16,
            ..ModelConfig::default()
        };
        let report = cfg.check();
        assert!(report.violations.iter().any(|v| v.contains("mar_groups <= spatial_tokens")));
    }

    #[test]
    fn short_window_is_reported() {
        let cfg = ModelConfig {
            window_frames: 1,
            ..ModelConfig::default()
        };
        let report = cfg.check();
        assert!(report.violations.iter().any(|v| v.contains("window_frames >= 2")));
    }

    #[test]
    fn head_divisibility_is_reported() {
        let cfg = ModelConfig {
            token_dim: 10,
            heads: 4,
            ..ModelConfig::default()
        };
        assert!(!cfg.check().is_ok());
    }

    #[test]
    fn every_violation_is_named() {
        let cfg = ModelConfig {
            token_dim: 0,
            window_frames: 1,
            mar_groups: 99,
            ..ModelConfig::default()
        };
        let report = cfg.check();
        assert!(report.violations.len() >= 3);
    }

    #[test]
    fn toml_round_trip_is_byte_identical() {
        let cfg = FileConfig::default();
        let once = cfg.to_toml();
        let parsed = FileConfig::from_toml(&once).unwrap();
        let twice = parsed.to_toml();
        assert_eq!(once, twice);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "[model]\ntoken_dim = 16\nspatial_tokens = 16\naudio_dim = 8\nwindow_frames = 4\nmar_groups = 4\nlayers = 4\nheads = 4\ndiff_train_steps = 1000\ndiff_sample_steps = 8\nintensity_bins = 64\nintensity_bin_width = 0.002\nseed = 1\nnot_a_key = 3\n";
        assert!(FileConfig::from_toml(text).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ModelConfig::default();
        let b = ModelConfig {
            seed: 43,
            ..ModelConfig::default()
        };
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash(), ModelConfig::default().content_hash());
    }
}

//! Shared value types: latent frames, per-frame conditions, backbone outputs.

use ndarray::{Array1, Array2};

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};

/// One compressed video frame: `spatial_tokens` tokens of `token_dim` reals.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFrame {
    pub tokens: Array2<f64>,
}

impl LatentFrame {
    pub fn new(tokens: Array2<f64>) -> Self {
        LatentFrame { tokens }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        LatentFrame {
            tokens: Array2::zeros((cfg.spatial_tokens, cfg.token_dim)),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let shape = self.tokens.dim();
        if shape != (cfg.spatial_tokens, cfg.token_dim) {
            return Err(ModelError::shape(
                "LatentFrame.tokens",
                format!("({}, {})", cfg.spatial_tokens, cfg.token_dim),
                format!("({}, {})", shape.0, shape.1),
            ));
        }
        if !self.tokens.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite {
                context: "LatentFrame.tokens".into(),
                detail: "non-finite token value".into(),
            });
        }
        Ok(())
    }
}

/// Per-frame driving signals: an audio-analog embedding and a non-negative
/// motion intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionFrame {
    pub audio: Array1<f64>,
    pub intensity: f64,
}

impl ConditionFrame {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        ConditionFrame {
            audio: Array1::zeros(cfg.audio_dim),
            intensity: 0.0,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.audio.len() != cfg.audio_dim {
            return Err(ModelError::shape(
                "ConditionFrame.audio",
                cfg.audio_dim.to_string(),
                self.audio.len().to_string(),
            ));
        }
        if !self.audio.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite {
                context: "ConditionFrame.audio".into(),
                detail: "non-finite audio value".into(),
            });
        }
        if !(self.intensity >= 0.0) || !self.intensity.is_finite() {
            return Err(ModelError::precondition(format!(
                "ConditionFrame.intensity must be finite and >= 0, got {}",
                self.intensity
            )));
        }
        Ok(())
    }
}

/// Backbone outputs for one frame: visual features `h`, condition-token
/// features `h_cond`, and the anchored features `h_anchor` fed to the
/// spatial generator.
#[derive(Debug, Clone)]
pub struct FrameHidden {
    /// Visual-token outputs, spatial_tokens x token_dim.
    pub h: Array2<f64>,
    /// Condition-token outputs, COND_TOKENS x token_dim.
    pub h_cond: Array2<f64>,
    /// Anchor-modulated visual features, spatial_tokens x token_dim.
    pub h_anchor: Array2<f64>,
}

impl FrameHidden {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let want_vis = (cfg.spatial_tokens, cfg.token_dim);
        let want_cond = (crate::config::COND_TOKENS, cfg.token_dim);
        for (name, arr, want) in [
            ("FrameHidden.h", &self.h, want_vis),
            ("FrameHidden.h_cond", &self.h_cond, want_cond),
            ("FrameHidden.h_anchor", &self.h_anchor, want_vis),
        ] {
            if arr.dim() != want {
                return Err(ModelError::shape(
                    name,
                    format!("{want:?}"),
                    format!("{:?}", arr.dim()),
                ));
            }
            if !arr.iter().all(|v| v.is_finite()) {
                return Err(ModelError::NonFinite {
                    context: name.into(),
                    detail: "non-finite entry".into(),
                });
            }
        }
        Ok(())
    }
}

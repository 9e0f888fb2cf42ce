use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
///
/// [`ModelConfig::default`] is the full-width architecture (384-d, ÷20
/// pooling, six audiogram frequencies, SFM layer 18).
/// [`ModelConfig::desk`] shrinks width and feature size for CPU runs over the
/// toy extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub downsample_factor: usize,
    pub audiogram_dim: usize,
    /// Multiplier applied to dB HL thresholds before projection.
    pub audiogram_scale: f64,
    pub sfm_feature_dim: usize,
    pub sfm_layer_index: usize,
    pub n_heads: usize,
    pub n_blocks_temporal: usize,
    pub n_blocks_layer: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    /// Sinusoidal positions in the temporal stage. The layer stage never
    /// uses positions.
    pub positions_enabled: bool,
    pub share_ear_parameters: bool,
    pub share_pathway_parameters: bool,
    /// Also let the enhanced pathway query the noisy one and average both
    /// directions.
    pub symmetric_cross: bool,
    pub score_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 384,
            downsample_factor: 20,
            audiogram_dim: 6,
            audiogram_scale: 0.01,
            sfm_feature_dim: 1024,
            sfm_layer_index: 18,
            n_heads: 4,
            n_blocks_temporal: 1,
            n_blocks_layer: 1,
            ff_mult: 4,
            dropout: 0.1,
            positions_enabled: true,
            share_ear_parameters: true,
            share_pathway_parameters: false,
            symmetric_cross: false,
            score_scale: 100.0,
        }
    }
}

impl ModelConfig {
    /// Small CPU configuration matched to the default toy extractor.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 32,
            sfm_feature_dim: 128,
            sfm_layer_index: 2,
            ..ModelConfig::default()
        }
    }

    /// Width-8 configuration used by gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            downsample_factor: 2,
            sfm_feature_dim: 4,
            sfm_layer_index: 0,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            problems.push(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.positions_enabled && self.d_model % 2 != 0 {
            problems.push("sinusoidal positions need an even d_model".to_string());
        }
        if self.downsample_factor == 0 {
            problems.push("downsample_factor must be ≥ 1".to_string());
        }
        if self.audiogram_dim == 0 {
            problems.push("audiogram_dim must be positive".to_string());
        }
        if self.sfm_feature_dim == 0 {
            problems.push("sfm_feature_dim must be positive".to_string());
        }
        if self.n_blocks_temporal == 0 || self.n_blocks_layer == 0 || self.ff_mult == 0 {
            problems.push("block counts and ff_mult must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.score_scale > 0.0) || !self.audiogram_scale.is_finite() {
            problems.push("score_scale must be positive and audiogram_scale finite".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_width_defaults() {
        let c = ModelConfig::default();
        assert_eq!(c.d_model, 384);
        assert_eq!(c.downsample_factor, 20);
        assert_eq!(c.audiogram_dim, 6);
        assert_eq!(c.sfm_layer_index, 18);
        assert_eq!(c.score_scale, 100.0);
        assert_eq!(c.head_dim(), 96);
        assert!(c.share_ear_parameters && !c.share_pathway_parameters);
        c.validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let r: std::result::Result<ModelConfig, _> = serde_json::from_str(r#"{"d_modle": 3}"#);
        assert!(r.is_err());
        let c: ModelConfig = serde_json::from_str(r#"{"d_model": 64}"#).unwrap();
        assert_eq!(c.d_model, 64);
        assert_eq!(c.downsample_factor, 20);
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the image encoder's feature pyramid reaches the normal decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// Max-fusion into the last `m` decoder channels; switchable per pass.
    Deactivable,
    /// Classic U-Net concatenation (ablation only).
    StandardConcat,
    /// No skip links at all.
    None,
}

/// Named architecture variants of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// All four networks with deactivable skips.
    Full,
    /// All four networks, no skip connections.
    NoSkip,
    /// Without the normal encoder; plain concatenation skips.
    NoNormalEncoder,
    /// Image encoder and normal decoder only; plain concatenation skips.
    EncoderDecoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_resolution: usize,
    pub base_width: usize,
    /// Residual stages after the stem; each halves the spatial size.
    pub n_stages: usize,
    pub latent_channels: usize,
    pub skip_mode: SkipMode,
    pub has_normal_encoder: bool,
    pub has_image_decoder: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_resolution: 64,
            base_width: 16,
            n_stages: 4,
            latent_channels: 128,
            skip_mode: SkipMode::Deactivable,
            has_normal_encoder: true,
            has_image_decoder: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn variant(variant: Variant) -> Self {
        let mut cfg = ModelConfig::default();
        cfg.apply_variant(variant);
        cfg
    }

    pub fn apply_variant(&mut self, variant: Variant) {
        let (skip_mode, has_normal_encoder, has_image_decoder) = match variant {
            Variant::Full => (SkipMode::Deactivable, true, true),
            Variant::NoSkip => (SkipMode::None, true, true),
            Variant::NoNormalEncoder => (SkipMode::StandardConcat, false, true),
            Variant::EncoderDecoder => (SkipMode::StandardConcat, false, false),
        };
        self.skip_mode = skip_mode;
        self.has_normal_encoder = has_normal_encoder;
        self.has_image_decoder = has_image_decoder;
    }

    /// ResNet-18 widths at 256x256.
    pub fn resnet18_scale() -> Self {
        ModelConfig {
            input_resolution: 256,
            base_width: 64,
            latent_channels: 512,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_stages == 0 {
            return Err(Error::Config("n_stages must be at least 1".into()));
        }
        if self.base_width == 0 || self.latent_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        let factor = 1usize << (self.n_stages + 1);
        if self.input_resolution == 0 || !self.input_resolution.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "input_resolution {} must be a positive multiple of 2^(n_stages+1) = {factor}",
                self.input_resolution
            )));
        }
        if self.skip_mode == SkipMode::StandardConcat && self.has_normal_encoder {
            return Err(Error::Config(
                "standard_concat skips need an image pyramid on every normal-decoder pass; \
                 they cannot be combined with a normal encoder"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Channel counts of the encoder taps: stem, then each stage.
    pub fn tap_channels(&self) -> Vec<usize> {
        let mut taps = vec![self.base_width];
        for s in 1..=self.n_stages {
            taps.push(self.stage_width(s));
        }
        taps
    }

    /// Spatial size of each encoder tap.
    pub fn tap_resolutions(&self) -> Vec<usize> {
        (0..=self.n_stages)
            .map(|i| self.input_resolution >> (i + 1))
            .collect()
    }

    pub(crate) fn stage_width(&self, stage: usize) -> usize {
        if stage == self.n_stages {
            self.latent_channels
        } else {
            self.base_width << (stage - 1)
        }
    }

    pub fn latent_shape(&self, batch: usize) -> [usize; 4] {
        let r = self.input_resolution >> (self.n_stages + 1);
        [batch, self.latent_channels, r, r]
    }
}

/// Groups used by a normalization layer over `channels`.
pub(crate) fn norm_groups(channels: usize) -> usize {
    if channels < 8 {
        channels
    } else if channels.is_multiple_of(8) {
        8
    } else {
        // largest divisor not above 8
        (1..=8).rev().find(|&g| channels.is_multiple_of(g)).unwrap_or(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_ladder_matches() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.tap_resolutions(), vec![32, 16, 8, 4, 2]);
        assert_eq!(cfg.tap_channels(), vec![16, 16, 32, 64, 128]);
        assert_eq!(cfg.latent_shape(1), [1, 128, 2, 2]);
    }

    #[test]
    fn resnet18_preset_widths() {
        let cfg = ModelConfig::resnet18_scale();
        cfg.validate().unwrap();
        assert_eq!(cfg.tap_channels(), vec![64, 64, 128, 256, 512]);
    }

    #[test]
    fn resolution_must_divide() {
        let cfg = ModelConfig {
            input_resolution: 48,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variants_are_expressible() {
        for v in [Variant::Full, Variant::NoSkip, Variant::NoNormalEncoder, Variant::EncoderDecoder] {
            ModelConfig::variant(v).validate().unwrap();
        }
        let c = ModelConfig::variant(Variant::EncoderDecoder);
        assert!(!c.has_normal_encoder && !c.has_image_decoder);
    }

    #[test]
    fn concat_with_normal_encoder_is_rejected() {
        let cfg = ModelConfig {
            skip_mode: SkipMode::StandardConcat,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"base_widht": 8}"#);
        assert!(err.is_err());
        let ok: ModelConfig = serde_json::from_str(r#"{"skip_mode": "none"}"#).unwrap();
        assert_eq!(ok.skip_mode, SkipMode::None);
    }

    #[test]
    fn group_counts() {
        assert_eq!(norm_groups(4), 4);
        assert_eq!(norm_groups(16), 8);
        assert_eq!(norm_groups(12), 6);
    }
}

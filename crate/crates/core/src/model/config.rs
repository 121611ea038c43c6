use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{DecoderConfig, EncoderConfig, ScaleMode};
use crate::error::{Error, Result};
use crate::losses::{FusedLayout, ReconError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackShape {
    pub depth: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderShape {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
}

/// Every architecture and training hyperparameter. Config files must list all
/// fields; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub lores_px: usize,
    pub hires_px: usize,
    pub patch_px: usize,
    pub radar_channels: usize,
    pub lores_channels: usize,
    pub hires_channels: usize,
    /// Ground distance per low-res pixel; high-res pixels are half of it.
    pub lores_gsd: f64,
    /// Shared token width of all encoders and cross-encoders.
    pub encoder_dim: usize,
    pub mlp_ratio: f64,
    pub radar_encoder: StackShape,
    pub lores_encoder: StackShape,
    pub hires_encoder: StackShape,
    /// Lores queries over radar keys.
    pub cross_joint: StackShape,
    /// Joint queries over hires keys.
    pub cross_fused: StackShape,
    pub decoder: DecoderShape,
    /// Width of the optional linear head applied before normalization.
    pub proj_dim: Option<usize>,
    pub mask_ratio: f64,
    pub temperature: f64,
    pub recon_error: ReconError,
    pub scale_mode: ScaleMode,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub seed: u64,
}

impl ModelConfig {
    /// Laptop-scale configuration: 32/64 px, width 64, 4 heads, depth 2.
    pub fn desk() -> Self {
        let enc = StackShape { depth: 2, heads: 4 };
        Self {
            lores_px: 32,
            hires_px: 64,
            patch_px: 8,
            radar_channels: 2,
            lores_channels: 3,
            hires_channels: 3,
            lores_gsd: 1.0,
            encoder_dim: 64,
            mlp_ratio: 2.0,
            radar_encoder: enc,
            lores_encoder: enc,
            hires_encoder: enc,
            cross_joint: StackShape { depth: 1, heads: 4 },
            cross_fused: StackShape { depth: 1, heads: 4 },
            decoder: DecoderShape {
                depth: 1,
                dim: 64,
                heads: 4,
            },
            proj_dim: None,
            mask_ratio: 0.75,
            temperature: 0.1,
            recon_error: ReconError::Mse,
            scale_mode: ScaleMode::InvSqrtD,
            batch_size: 8,
            lr: 1e-3,
            warmup_steps: 10,
            seed: 42,
        }
    }

    /// Smallest configuration exercising every component, for gradient checks.
    pub fn micro() -> Self {
        let one = StackShape { depth: 1, heads: 1 };
        Self {
            lores_px: 8,
            hires_px: 16,
            patch_px: 4,
            encoder_dim: 8,
            mlp_ratio: 2.0,
            radar_encoder: one,
            lores_encoder: one,
            hires_encoder: one,
            cross_joint: one,
            cross_fused: one,
            decoder: DecoderShape {
                depth: 1,
                dim: 8,
                heads: 1,
            },
            mask_ratio: 0.5,
            temperature: 0.5,
            batch_size: 2,
            warmup_steps: 0,
            ..Self::desk()
        }
    }

    /// Sizes as described for the full dataset: 256/512 px inputs.
    pub fn full_scale() -> Self {
        Self {
            lores_px: 256,
            hires_px: 512,
            encoder_dim: 768,
            mlp_ratio: 4.0,
            radar_encoder: StackShape {
                depth: 12,
                heads: 16,
            },
            lores_encoder: StackShape {
                depth: 12,
                heads: 16,
            },
            hires_encoder: StackShape {
                depth: 12,
                heads: 16,
            },
            cross_joint: StackShape {
                depth: 1,
                heads: 16,
            },
            cross_fused: StackShape {
                depth: 1,
                heads: 16,
            },
            decoder: DecoderShape {
                depth: 1,
                dim: 512,
                heads: 16,
            },
            batch_size: 64,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "micro" => Some(Self::micro()),
            "full" => Some(Self::full_scale()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_json().as_bytes()).into()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hires_px != 2 * self.lores_px {
            return bad(format!(
                "hires_px {} must be twice lores_px {}",
                self.hires_px, self.lores_px
            ));
        }
        if self.patch_px == 0 || self.lores_px == 0 || !self.lores_px.is_multiple_of(self.patch_px)
        {
            return bad(format!(
                "lores_px {} must be a positive multiple of patch_px {}",
                self.lores_px, self.patch_px
            ));
        }
        if self.radar_channels == 0 || self.lores_channels == 0 || self.hires_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if !(self.lores_gsd > 0.0 && self.lores_gsd.is_finite()) {
            return bad(format!(
                "lores_gsd must be positive, got {}",
                self.lores_gsd
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return bad(format!(
                "mask_ratio must lie in (0, 1], got {}; a zero ratio leaves nothing to reconstruct",
                self.mask_ratio
            ));
        }
        if self.masked_count(self.lores_tokens()) == 0 {
            return bad("mask_ratio masks zero patches".into());
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return bad(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.proj_dim == Some(0) {
            return bad("proj_dim must be positive when set".into());
        }
        for (name, e) in self.encoder_configs() {
            e.validate()
                .map_err(|err| Error::Config(format!("{name}: {err}")))?;
        }
        for (name, s) in [
            ("cross_joint", self.cross_joint),
            ("cross_fused", self.cross_fused),
        ] {
            self.stack(s, 1)
                .validate()
                .map_err(|err| Error::Config(format!("{name}: {err}")))?;
        }
        let d = self.decoder;
        if d.depth == 0
            || d.heads == 0
            || !d.dim.is_multiple_of(d.heads)
            || !d.dim.is_multiple_of(4)
        {
            return bad(format!(
                "decoder needs depth >= 1 and a dim divisible by 4 and by heads, got {d:?}"
            ));
        }
        Ok(())
    }

    fn stack(&self, s: StackShape, in_channels: usize) -> EncoderConfig {
        EncoderConfig {
            depth: s.depth,
            model_dim: self.encoder_dim,
            heads: s.heads,
            mlp_ratio: self.mlp_ratio,
            patch_px: self.patch_px,
            in_channels,
            scale_mode: self.scale_mode,
        }
    }

    pub fn encoder_configs(&self) -> [(&'static str, EncoderConfig); 3] {
        [
            (
                "radar_encoder",
                self.stack(self.radar_encoder, self.radar_channels),
            ),
            (
                "lores_encoder",
                self.stack(self.lores_encoder, self.lores_channels),
            ),
            (
                "hires_encoder",
                self.stack(self.hires_encoder, self.hires_channels),
            ),
        ]
    }

    pub fn cross_configs(&self) -> [EncoderConfig; 2] {
        [
            self.stack(self.cross_joint, 1),
            self.stack(self.cross_fused, 1),
        ]
    }

    pub fn layout(&self) -> FusedLayout {
        FusedLayout {
            radar_channels: self.radar_channels,
            lores_channels: self.lores_channels,
            hires_channels: self.hires_channels,
            patch_px: self.patch_px,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            depth: self.decoder.depth,
            dim: self.decoder.dim,
            heads: self.decoder.heads,
            mlp_ratio: self.mlp_ratio,
            in_dim: self.encoder_dim,
            out_dim: self.layout().patch_dim(),
            scale_mode: self.scale_mode,
        }
    }

    pub fn lores_tokens(&self) -> usize {
        let side = self.lores_px / self.patch_px.max(1);
        side * side
    }

    pub fn hires_tokens(&self) -> usize {
        let side = self.hires_px / self.patch_px.max(1);
        side * side
    }

    /// Patches masked out of `tokens`: `round(ratio · tokens)`, at most `tokens`.
    pub fn masked_count(&self, tokens: usize) -> usize {
        ((self.mask_ratio * tokens as f64).round() as usize).min(tokens)
    }

    pub fn hires_gsd(&self) -> f64 {
        self.lores_gsd / 2.0
    }

    /// Width of the representation used for alignment and probing.
    pub fn representation_dim(&self) -> usize {
        self.proj_dim.unwrap_or(self.encoder_dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["desk", "micro", "full"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn token_arithmetic() {
        let d = ModelConfig::desk();
        assert_eq!((d.lores_tokens(), d.hires_tokens()), (16, 64));
        let p = ModelConfig::full_scale();
        assert_eq!((p.lores_tokens(), p.hires_tokens()), (1024, 4096));
    }

    #[test]
    fn rejects_invalid() {
        let mut c = ModelConfig::desk();
        c.mask_ratio = 0.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.hires_px = 48;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.patch_px = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let c = ModelConfig::desk();
        assert_eq!(ModelConfig::from_json(&c.to_json()).unwrap(), c);
        let mut v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(ModelConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        v.as_object_mut().unwrap().remove("temperature");
        assert!(ModelConfig::from_json(&v.to_string()).is_err());
    }
}

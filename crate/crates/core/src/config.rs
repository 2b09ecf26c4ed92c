//! Model and schedule configuration.

use serde::{Deserialize, Serialize};

/// Architecture widths and structural knobs for every network in the codec.
///
/// `default()` is the reference desk-scale profile; `tiny()` shrinks widths
/// further for fast end-to-end test runs. All spatial contracts (latent at
/// 1/8 resolution, contexts at 1/8 and 1/16, four UNet levels) are identical
/// between profiles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent channels (y_t), fixed at 4 to mirror the usual latent-space width.
    pub latent_channels: usize,
    /// Channels of the full-resolution frame feature buffer.
    pub feature_channels: usize,
    /// Channels of the large-scale temporal context at latent resolution.
    pub context0_channels: usize,
    /// Channels of the half-latent-resolution context.
    pub context1_channels: usize,
    /// UNet base width; levels use base, 2*base, 2*base, 4*base.
    pub unet_base: usize,
    /// Hidden width of the flow pyramid network.
    pub flow_width: usize,
    /// Motion latent channels (coded at 1/4 resolution).
    pub motion_latent_channels: usize,
    /// Hidden width of the pixel analysis/synthesis networks.
    pub autoencoder_width: usize,
    /// Hidden width of the entropy parameter networks.
    pub entropy_width: usize,
    /// LoRA rank used when adapters are attached.
    pub lora_rank: usize,
    /// Frames between intra refreshes.
    pub intra_period: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_channels: 4,
            feature_channels: 48,
            context0_channels: 64,
            context1_channels: 96,
            unet_base: 64,
            flow_width: 64,
            motion_latent_channels: 64,
            autoencoder_width: 64,
            entropy_width: 64,
            lora_rank: 8,
            intra_period: 32,
        }
    }
}

impl ModelConfig {
    /// Reduced widths for test and acceptance runs. Structure is unchanged.
    pub fn tiny() -> Self {
        ModelConfig {
            latent_channels: 4,
            feature_channels: 12,
            context0_channels: 16,
            context1_channels: 24,
            unet_base: 16,
            flow_width: 16,
            motion_latent_channels: 12,
            autoencoder_width: 20,
            entropy_width: 24,
            lora_rank: 4,
            intra_period: 32,
        }
    }

    /// UNet channel width at each of the four encoder levels.
    pub fn unet_widths(&self) -> [usize; 4] {
        [self.unet_base, 2 * self.unet_base, 2 * self.unet_base, 4 * self.unet_base]
    }
}

/// Diffusion noise schedule configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 1000, beta_start: 8.5e-4, beta_end: 1.2e-2 }
    }
}

/// Rate targets; one model is trained per entry.
pub const LAMBDA_SET: [f64; 4] = [16.0, 48.0, 128.0, 384.0];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_profile() {
        let c = ModelConfig::default();
        assert_eq!(c.latent_channels, 4);
        assert_eq!(c.feature_channels, 48);
        assert_eq!(c.context0_channels, 64);
        assert_eq!(c.unet_widths(), [64, 128, 128, 256]);
        assert_eq!(c.intra_period, 32);
        let s = ScheduleConfig::default();
        assert_eq!(s.steps, 1000);
        assert_eq!(s.beta_start, 8.5e-4);
        assert_eq!(s.beta_end, 1.2e-2);
        assert_eq!(LAMBDA_SET, [16.0, 48.0, 128.0, 384.0]);
    }

    #[test]
    fn tiny_preserves_structure() {
        let c = ModelConfig::tiny();
        assert_eq!(c.latent_channels, 4);
        assert_eq!(c.unet_widths().len(), 4);
        assert_eq!(c.intra_period, 32);
    }
}

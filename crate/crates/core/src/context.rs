//! Temporal context extraction: a full-resolution feature of the previously
//! decoded frame is motion-compensated and refined into two context levels,
//! c0 on the latent grid (1/8) and c1 one octave below (1/16). Everything
//! here consumes decoder-visible inputs only, so encoder and decoder compute
//! identical contexts by construction.

use crate::config::ModelConfig;
use crate::error::{CodecError, Result};
use crate::motion;
use dvco_autograd::nn::{Conv2d, ParamStore};
use dvco_autograd::tensor::{Arr, Tensor};
use ndarray::IxDyn;
use rand_chacha::ChaCha12Rng;

/// Multi-level temporal context. `c0`: [1, C0, H/8, W/8] on the latent grid;
/// `c1`: [1, C1, H/16, W/16].
pub struct TemporalContextSet {
    pub c0: Tensor,
    pub c1: Tensor,
}

impl TemporalContextSet {
    /// All-zero contexts for the intra path (no temporal history).
    pub fn zeros(cfg: &ModelConfig, frame_h: usize, frame_w: usize) -> Self {
        let (h8, w8) = (frame_h / 8, frame_w / 8);
        TemporalContextSet {
            c0: Tensor::constant(Arr::zeros(IxDyn(&[1, cfg.context0_channels, h8, w8]))),
            c1: Tensor::constant(Arr::zeros(IxDyn(&[
                1,
                cfg.context1_channels,
                h8 / 2,
                w8 / 2,
            ]))),
        }
    }
}

/// Full-resolution feature extractor applied to each decoded frame; its
/// output is the recurrent state carried between frames.
pub struct FeatureExtractor {
    c0: Conv2d,
    c1: Conv2d,
}

impl FeatureExtractor {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, cfg: &ModelConfig) -> Self {
        FeatureExtractor {
            c0: Conv2d::k3(store, rng, "feat.c0", 3, cfg.feature_channels, 1),
            c1: Conv2d::k3(store, rng, "feat.c1", cfg.feature_channels, cfg.feature_channels, 1),
        }
    }

    /// [1, 3, H, W] -> [1, C_F, H, W].
    pub fn forward(&self, frame: &Tensor) -> Tensor {
        self.c1.forward(&self.c0.forward(frame).leaky_relu(0.1))
    }
}

/// Warps the previous feature by the reconstructed motion and refines it into
/// the two context levels with strided convolutions.
pub struct ContextNet {
    down: [Conv2d; 3],
    to_c1: Conv2d,
}

impl ContextNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, cfg: &ModelConfig) -> Self {
        let wdt = cfg.autoencoder_width;
        ContextNet {
            down: [
                Conv2d::k3(store, rng, "ctx.down0", cfg.feature_channels, wdt, 2),
                Conv2d::k3(store, rng, "ctx.down1", wdt, wdt, 2),
                Conv2d::k3(store, rng, "ctx.down2", wdt, cfg.context0_channels, 2),
            ],
            to_c1: Conv2d::k3(
                store,
                rng,
                "ctx.to_c1",
                cfg.context0_channels,
                cfg.context1_channels,
                2,
            ),
        }
    }

    /// Refine an already motion-compensated feature into (c0, c1).
    pub(crate) fn refine(&self, warped: &Tensor) -> TemporalContextSet {
        let h = self.down[0].forward(warped).leaky_relu(0.1);
        let h = self.down[1].forward(&h).leaky_relu(0.1);
        let c0 = self.down[2].forward(&h);
        let c1 = self.to_c1.forward(&c0.leaky_relu(0.1));
        TemporalContextSet { c0, c1 }
    }

    /// `prev_feature`: [1, C_F, H, W] from the previously decoded frame;
    /// `v_hat`: [1, 2, H, W] reconstructed motion.
    pub fn extract_contexts(
        &self,
        prev_feature: &Tensor,
        v_hat: &Tensor,
    ) -> Result<TemporalContextSet> {
        let fs = prev_feature.shape();
        let vs = v_hat.shape();
        if fs.len() != 4 || vs.len() != 4 || vs[1] != 2 || fs[2] != vs[2] || fs[3] != vs[3] {
            return Err(CodecError::shape(format!(
                "context inputs misaligned: feature {fs:?} vs motion {vs:?}"
            )));
        }
        if fs[2] % 16 != 0 || fs[3] % 16 != 0 {
            return Err(CodecError::shape(format!(
                "context extraction needs dimensions divisible by 16, got {}x{}",
                fs[2], fs[3]
            )));
        }
        let warped = motion::warp(prev_feature, v_hat);
        Ok(self.refine(&warped))
    }
}

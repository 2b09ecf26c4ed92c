//! Latent-space codec: the 8x analysis/synthesis pair standing in for a
//! foundation-model autoencoder, and the context-conditional coder that turns
//! raw latents into decodable payloads.

use crate::config::ModelConfig;
use crate::context::TemporalContextSet;
use crate::entropy::{self, CdfStore};
use crate::error::{CodecError, Result};
use dvco_autograd::nn::{Conv2d, ParamStore};
use dvco_autograd::tensor::{Arr, Tensor};
use dvco_autograd::{resize_bilinear, upsample_nearest2};
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Lifecycle of a latent map. Transitions only move forward:
/// raw -> reconstructed -> refined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentStage {
    Raw,
    Reconstructed,
    Refined,
}

/// A latent map tagged with its lifecycle stage.
pub struct Latent {
    pub values: Tensor,
    pub stage: LatentStage,
}

impl Latent {
    pub fn raw(values: Tensor) -> Self {
        Latent { values, stage: LatentStage::Raw }
    }

    /// Mark the diffusion output as the refined successor of a reconstructed
    /// latent. Enforces the stage ordering.
    pub fn refine_with(&self, values: Tensor) -> Result<Latent> {
        if self.stage != LatentStage::Reconstructed {
            return Err(CodecError::domain(format!(
                "only reconstructed latents can be refined, got {:?}",
                self.stage
            )));
        }
        Ok(Latent { values, stage: LatentStage::Refined })
    }
}

// ----- pixel-space autoencoder ----------------------------------------------

/// 8x analysis/synthesis pair. The synthesis output passes through a sigmoid
/// and an explicit [0, 1] clamp, so arbitrarily scaled latents still decode
/// to valid pixels and the map stays smooth for gradient checks.
pub struct PixelCoder {
    enc: [Conv2d; 4],
    dec: [Conv2d; 4],
}

impl PixelCoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, cfg: &ModelConfig) -> Self {
        let w = cfg.autoencoder_width;
        let cy = cfg.latent_channels;
        let enc = [
            Conv2d::k3(store, rng, "pixel.enc0", 3, w, 2),
            Conv2d::k3(store, rng, "pixel.enc1", w, w, 2),
            Conv2d::k3(store, rng, "pixel.enc2", w, w, 2),
            Conv2d::k3(store, rng, "pixel.enc3", w, cy, 1),
        ];
        let dec = [
            Conv2d::k3(store, rng, "pixel.dec0", cy, w, 1),
            Conv2d::k3(store, rng, "pixel.dec1", w, w, 1),
            Conv2d::k3(store, rng, "pixel.dec2", w, w, 1),
            Conv2d::k3(store, rng, "pixel.dec3", w, 3, 1),
        ];
        PixelCoder { enc, dec }
    }

    /// [1, 3, H, W] -> raw latent [1, C_y, H/8, W/8].
    pub fn encode(&self, frame: &Tensor) -> Tensor {
        let h = self.enc[0].forward(frame).leaky_relu(0.1);
        let h = self.enc[1].forward(&h).leaky_relu(0.1);
        let h = self.enc[2].forward(&h).leaky_relu(0.1);
        self.enc[3].forward(&h)
    }

    /// [1, C_y, h, w] -> [1, 3, 8h, 8w] in [0, 1].
    pub fn decode(&self, latent: &Tensor) -> Tensor {
        let h = upsample_nearest2(&self.dec[0].forward(latent).leaky_relu(0.1));
        let h = upsample_nearest2(&self.dec[1].forward(&h).leaky_relu(0.1));
        let h = upsample_nearest2(&self.dec[2].forward(&h).leaky_relu(0.1));
        self.dec[3].forward(&h).sigmoid().clamp(0.0, 1.0)
    }

    pub fn encoder_convs(&self) -> Vec<&Conv2d> {
        self.enc.iter().collect()
    }

    pub fn decoder_convs(&self) -> Vec<&Conv2d> {
        self.dec.iter().collect()
    }
}

// ----- context-conditional latent coder -------------------------------------

/// Entropy + transform model for latents: (mu, sigma) come from the temporal
/// contexts, the latent is conditioned on c0 before quantization, and the
/// reconstruction is re-conditioned on c0 after dequantization.
pub struct ContextualCoder {
    ep: [Conv2d; 3],
    enc: [Conv2d; 2],
    dec: [Conv2d; 2],
    latent_channels: usize,
}

impl ContextualCoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, cfg: &ModelConfig) -> Self {
        let e = cfg.entropy_width;
        let cy = cfg.latent_channels;
        let c0 = cfg.context0_channels;
        let c1 = cfg.context1_channels;
        let ep = [
            Conv2d::k3(store, rng, "latent.ep0", c0 + c1, e, 1),
            Conv2d::k3(store, rng, "latent.ep1", e, e, 1),
            Conv2d::k3(store, rng, "latent.ep2", e, 2 * cy, 1),
        ];
        let enc = [
            Conv2d::k3(store, rng, "latent.ce0", cy + c0, e, 1),
            Conv2d::k3(store, rng, "latent.ce1", e, cy, 1),
        ];
        let dec = [
            Conv2d::k3(store, rng, "latent.cd0", cy + c0, e, 1),
            Conv2d::k3(store, rng, "latent.cd1", e, cy, 1),
        ];
        ContextualCoder { ep, enc, dec, latent_channels: cy }
    }

    fn check_alignment(&self, y_shape: &[usize], ctx: &TemporalContextSet) -> Result<()> {
        let c0 = ctx.c0.shape();
        let c1 = ctx.c1.shape();
        let ok = y_shape.len() == 4
            && y_shape[1] == self.latent_channels
            && c0[2] == y_shape[2]
            && c0[3] == y_shape[3]
            && c1[2] == y_shape[2] / 2
            && c1[3] == y_shape[3] / 2;
        if !ok {
            return Err(CodecError::shape(format!(
                "context misaligned with latent: y {y_shape:?}, c0 {c0:?}, c1 {c1:?}"
            )));
        }
        Ok(())
    }

    /// Conditional Gaussian parameters on the latent grid:
    /// ([1, C_y, h, w] mean, same-shape positive scale).
    pub fn entropy_params(&self, ctx: &TemporalContextSet) -> (Tensor, Tensor) {
        let c0s = ctx.c0.shape();
        let c1_up = resize_bilinear(&ctx.c1, c0s[2], c0s[3]);
        let inp = Tensor::concat(1, &[ctx.c0.clone(), c1_up]);
        let h = self.ep[0].forward(&inp).leaky_relu(0.1);
        let h = self.ep[1].forward(&h).leaky_relu(0.1);
        let out = self.ep[2].forward(&h);
        let mu = out.slice_axis_op(1, 0, self.latent_channels);
        let sigma = out
            .slice_axis_op(1, self.latent_channels, self.latent_channels)
            .softplus();
        (mu, sigma)
    }

    /// Encoder-side conditioning before quantization (residual form).
    fn condition(&self, y: &Tensor, c0: &Tensor) -> Tensor {
        let inp = Tensor::concat(1, &[y.clone(), c0.clone()]);
        y.add(&self.enc[1].forward(&self.enc[0].forward(&inp).leaky_relu(0.1)))
    }

    /// Decoder-side reconstruction from the dequantized latent.
    fn reconstruct(&self, q: &Tensor, c0: &Tensor) -> Tensor {
        let inp = Tensor::concat(1, &[q.clone(), c0.clone()]);
        q.add(&self.dec[1].forward(&self.dec[0].forward(&inp).leaky_relu(0.1)))
    }

    /// Inference path: condition, quantize against the predicted mean,
    /// entropy-code, and locally decode. `rate_bits` is the exact coded
    /// length. Only raw latents are accepted.
    pub fn compress(
        &self,
        y: &Latent,
        ctx: &TemporalContextSet,
        cdfs: &CdfStore,
    ) -> Result<(Vec<u8>, Latent, f64)> {
        if y.stage != LatentStage::Raw {
            return Err(CodecError::domain(format!(
                "contextual compression accepts raw latents only, got {:?}",
                y.stage
            )));
        }
        self.check_alignment(y.values.shape(), ctx)?;
        let (mu, sigma) = self.entropy_params(ctx);
        let y_e = self.condition(&y.values, &ctx.c0);
        let (payload, q, _) = entropy::code_gaussian(y_e.data(), mu.data(), sigma.data(), cdfs);
        let y_bar = self.reconstruct(&Tensor::constant(q), &ctx.c0);
        let bits = payload.len() as f64 * 8.0;
        Ok((payload, Latent { values: y_bar, stage: LatentStage::Reconstructed }, bits))
    }

    /// Decoder-side counterpart of [`ContextualCoder::compress`]; bit-exact
    /// with the encoder's local reconstruction.
    pub fn decompress(
        &self,
        payload: &[u8],
        ctx: &TemporalContextSet,
        cdfs: &CdfStore,
    ) -> Result<Latent> {
        let (mu, sigma) = self.entropy_params(ctx);
        let q = entropy::decode_gaussian(payload, mu.data(), sigma.data(), cdfs)?;
        let y_bar = self.reconstruct(&Tensor::constant(q), &ctx.c0);
        Ok(Latent { values: y_bar, stage: LatentStage::Reconstructed })
    }

    /// Training path: additive-noise quantization and the continuous
    /// likelihood rate. Returns (reconstructed latent, rate in bits).
    pub fn compress_train(
        &self,
        y: &Latent,
        ctx: &TemporalContextSet,
        rng: &mut ChaCha12Rng,
    ) -> Result<(Latent, Tensor)> {
        if y.stage != LatentStage::Raw {
            return Err(CodecError::domain(format!(
                "contextual compression accepts raw latents only, got {:?}",
                y.stage
            )));
        }
        self.check_alignment(y.values.shape(), ctx)?;
        let (mu, sigma) = self.entropy_params(ctx);
        let y_e = self.condition(&y.values, &ctx.c0);
        let mut noise = Arr::zeros(IxDyn(y_e.shape()));
        for e in noise.iter_mut() {
            *e = rng.gen_range(-0.5..0.5);
        }
        let y_tilde = entropy::quantize_train(&y_e, &noise);
        let rate = entropy::likelihood_bits(&y_tilde, &mu, &sigma);
        let y_bar = self.reconstruct(&y_tilde, &ctx.c0);
        Ok((Latent { values: y_bar, stage: LatentStage::Reconstructed }, rate))
    }

    /// Likelihood estimate for the hard-quantized latent (no coding).
    pub fn rate_estimate(&self, y: &Latent, ctx: &TemporalContextSet) -> Result<f64> {
        self.check_alignment(y.values.shape(), ctx)?;
        let (mu, sigma) = self.entropy_params(ctx);
        let y_e = self.condition(&y.values, &ctx.c0);
        let q = entropy::quantize_infer(y_e.data(), mu.data());
        Ok(entropy::likelihood_bits_f64(&q, mu.data(), sigma.data()))
    }
}

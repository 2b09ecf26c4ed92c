//! Motion estimation, compression, and motion-compensated warping.
//!
//! Two estimators are provided: a deterministic block-matching search used as
//! a training-free oracle, and a small pyramid flow network trained in the
//! base stage. Estimated fields go through a strided autoencoder whose
//! quantized latent is entropy-coded under a factorized per-channel prior.

use crate::config::ModelConfig;
use crate::entropy::{self, CdfStore};
use crate::error::{CodecError, Result};
use dvco_autograd::nn::{Conv2d, Param, ParamStore};
use dvco_autograd::tensor::{Arr, Tensor};
use dvco_autograd::{avg_pool2, resize_bilinear, upsample_nearest2, warp_bilinear};
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Exhaustive search radius of the block matcher, in pixels.
pub const SEARCH_RANGE: i64 = 8;
/// Square block size of the block matcher.
pub const BLOCK: usize = 16;

/// How `estimate_motion` produces the field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionMode {
    Learned,
    BlockMatching,
}

// ----- block matching (training-free oracle) -------------------------------

/// Exhaustive block matching: for every 16x16 block of `cur`, find the
/// displacement in [-8, 8]^2 minimizing SAD against `refr` sampled with
/// border clamping. Ties prefer the smallest |dx|+|dy|, then the candidate
/// encountered first in raster scan order (dy outer, dx inner). The winning
/// displacement is written densely over the block, channel 0 = dx,
/// channel 1 = dy, matching the warp convention `out(p) = in(p - v)`.
pub fn block_matching_flow(cur: &Arr, refr: &Arr) -> Result<Arr> {
    let s = cur.shape();
    if s.len() != 3 || refr.shape() != s {
        return Err(CodecError::shape(format!(
            "block matching needs two CxHxW frames of equal size, got {:?} vs {:?}",
            s,
            refr.shape()
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let cs = cur.as_slice().expect("standard layout");
    let rs = refr.as_slice().expect("standard layout");
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;

    let mut flow = Arr::zeros(IxDyn(&[2, h, w]));
    for by in (0..h).step_by(BLOCK) {
        for bx in (0..w).step_by(BLOCK) {
            let bh = BLOCK.min(h - by);
            let bw = BLOCK.min(w - bx);
            let mut best = (f64::INFINITY, i64::MAX, 0i64, 0i64);
            for dy in -SEARCH_RANGE..=SEARCH_RANGE {
                for dx in -SEARCH_RANGE..=SEARCH_RANGE {
                    let mut sad = 0.0;
                    for ci in 0..c {
                        let base = ci * h * w;
                        for y in by..by + bh {
                            let sy = clamp(y as i64 - dy, h);
                            for x in bx..bx + bw {
                                let sx = clamp(x as i64 - dx, w);
                                sad += (cs[base + y * w + x] - rs[base + sy * w + sx]).abs();
                            }
                        }
                    }
                    let l1 = dx.abs() + dy.abs();
                    if sad < best.0 || (sad == best.0 && l1 < best.1) {
                        best = (sad, l1, dx, dy);
                    }
                }
            }
            let fs = flow.as_slice_mut().unwrap();
            for y in by..by + bh {
                for x in bx..bx + bw {
                    fs[y * w + x] = best.2 as f64;
                    fs[h * w + y * w + x] = best.3 as f64;
                }
            }
        }
    }
    Ok(flow)
}

// ----- learned estimator ----------------------------------------------------

const PYRAMID_LEVELS: usize = 4;

struct FlowLevel {
    convs: [Conv2d; 4],
}

/// Coarse-to-fine pyramid flow network. Each level refines the upsampled
/// coarser flow from (current, warped reference, flow); the per-level output
/// convolution is zero-initialized so the untrained network predicts zero
/// motion everywhere.
pub struct FlowNet {
    levels: Vec<FlowLevel>,
}

impl FlowNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, cfg: &ModelConfig) -> Self {
        let wdt = cfg.flow_width;
        let levels = (0..PYRAMID_LEVELS)
            .map(|l| FlowLevel {
                convs: [
                    Conv2d::k3(store, rng, &format!("flow.l{l}.c0"), 8, wdt, 1),
                    Conv2d::k3(store, rng, &format!("flow.l{l}.c1"), wdt, wdt, 1),
                    Conv2d::k3(store, rng, &format!("flow.l{l}.c2"), wdt, wdt, 1),
                    Conv2d::zeroed(store, &format!("flow.l{l}.c3"), wdt, 2, 3, 1, 1),
                ],
            })
            .collect();
        FlowNet { levels }
    }

    /// `cur`, `refr`: [1, 3, H, W] with H, W divisible by 8. Returns a
    /// [1, 2, H, W] displacement field in pixels.
    pub fn forward(&self, cur: &Tensor, refr: &Tensor) -> Tensor {
        let mut curs = vec![cur.clone()];
        let mut refs = vec![refr.clone()];
        for _ in 1..PYRAMID_LEVELS {
            curs.push(avg_pool2(curs.last().unwrap()));
            refs.push(avg_pool2(refs.last().unwrap()));
        }
        let cs = curs.last().unwrap().shape().to_vec();
        let mut flow = Tensor::constant(Arr::zeros(IxDyn(&[1, 2, cs[2], cs[3]])));
        for l in (0..PYRAMID_LEVELS).rev() {
            let warped = warp_bilinear(&refs[l], &flow);
            let inp = Tensor::concat(1, &[curs[l].clone(), warped, flow.clone()]);
            let lv = &self.levels[l];
            let mut h = inp;
            for conv in &lv.convs[..3] {
                h = conv.forward(&h).leaky_relu(0.1);
            }
            flow = flow.add(&lv.convs[3].forward(&h));
            if l > 0 {
                let s = flow.shape().to_vec();
                flow = resize_bilinear(&flow, s[2] * 2, s[3] * 2).scale(2.0);
            }
        }
        flow
    }
}

/// Dispatch between the learned network and the block-matching oracle.
/// Both frames are [1, 3, H, W]; returns [1, 2, H, W].
pub fn estimate_motion(
    net: &FlowNet,
    cur: &Tensor,
    refr: &Tensor,
    mode: MotionMode,
) -> Result<Tensor> {
    if cur.shape() != refr.shape() {
        return Err(CodecError::shape(format!(
            "motion estimation frame sizes differ: {:?} vs {:?}",
            cur.shape(),
            refr.shape()
        )));
    }
    match mode {
        MotionMode::Learned => Ok(net.forward(cur, refr)),
        MotionMode::BlockMatching => {
            let c = cur.data().index_axis(ndarray::Axis(0), 0).to_owned().into_dyn();
            let r = refr.data().index_axis(ndarray::Axis(0), 0).to_owned().into_dyn();
            let flow = block_matching_flow(&c, &r)?;
            let s = flow.shape().to_vec();
            Ok(Tensor::constant(
                flow.into_shape(IxDyn(&[1, 2, s[1], s[2]])).unwrap(),
            ))
        }
    }
}

// ----- motion autoencoder + factorized prior --------------------------------

/// Strided autoencoder over the flow field with a factorized zero-mean
/// Gaussian prior: the latent sits at 1/4 resolution and every channel has
/// one learned scale (softplus of `prior_scale`).
pub struct MotionCoder {
    enc: [Conv2d; 3],
    dec: [Conv2d; 3],
    prior_scale: Param,
    latent_channels: usize,
}

impl MotionCoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, cfg: &ModelConfig) -> Self {
        let wdt = cfg.autoencoder_width;
        let cm = cfg.motion_latent_channels;
        let enc = [
            Conv2d::k3(store, rng, "motion.enc0", 2, wdt, 2),
            Conv2d::k3(store, rng, "motion.enc1", wdt, wdt, 2),
            Conv2d::k3(store, rng, "motion.enc2", wdt, cm, 1),
        ];
        let dec = [
            Conv2d::k3(store, rng, "motion.dec0", cm, wdt, 1),
            Conv2d::k3(store, rng, "motion.dec1", wdt, wdt, 1),
            Conv2d::k3(store, rng, "motion.dec2", wdt, 2, 1),
        ];
        let prior_scale = store.register("motion.prior_scale", Arr::zeros(IxDyn(&[cm])));
        MotionCoder { enc, dec, prior_scale, latent_channels: cm }
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    /// [1, 2, H, W] -> [1, Cm, H/4, W/4].
    pub fn encode(&self, v: &Tensor) -> Tensor {
        let h = self.enc[0].forward(v).leaky_relu(0.1);
        let h = self.enc[1].forward(&h).leaky_relu(0.1);
        self.enc[2].forward(&h)
    }

    /// [1, Cm, H/4, W/4] -> [1, 2, H, W].
    pub fn decode(&self, m: &Tensor) -> Tensor {
        let h = upsample_nearest2(&self.dec[0].forward(m).leaky_relu(0.1));
        let h = upsample_nearest2(&self.dec[1].forward(&h).leaky_relu(0.1));
        self.dec[2].forward(&h)
    }

    /// Per-channel prior scales as a broadcastable [1, Cm, 1, 1] tensor.
    pub fn sigma(&self) -> Tensor {
        self.prior_scale
            .tensor()
            .softplus()
            .reshape(&[1, self.latent_channels, 1, 1])
    }

    /// Prior scales expanded to a full latent-shaped array.
    fn sigma_dense(&self, h4: usize, w4: usize) -> Arr {
        let sig = self.prior_scale.value();
        let mut out = Arr::zeros(IxDyn(&[1, self.latent_channels, h4, w4]));
        for c in 0..self.latent_channels {
            let s = softplus_f64(sig[[c]]);
            out.index_axis_mut(ndarray::Axis(1), c).fill(s);
        }
        out
    }

    /// Training path: additive-noise quantization proxy and the continuous
    /// likelihood rate. Returns (reconstructed field, rate in bits).
    pub fn compress_train(&self, v: &Tensor, rng: &mut ChaCha12Rng) -> (Tensor, Tensor) {
        let m = self.encode(v);
        let mut noise = Arr::zeros(IxDyn(m.shape()));
        for e in noise.iter_mut() {
            *e = rng.gen_range(-0.5..0.5);
        }
        let m_tilde = entropy::quantize_train(&m, &noise);
        let shape = m.shape().to_vec();
        let mu = Tensor::constant(Arr::zeros(IxDyn(&shape)));
        let rate = entropy::likelihood_bits(&m_tilde, &mu, &self.sigma().broadcast_to(&shape));
        (self.decode(&m_tilde), rate)
    }

    /// Inference path: quantize the latent, entropy-code it, and decode the
    /// reconstruction from the quantized values. Returns
    /// (payload, reconstructed [2, H, W] field, exact coded bits).
    pub fn compress(&self, v: &Arr, cdfs: &CdfStore) -> Result<(Vec<u8>, Arr, f64)> {
        let s = v.shape();
        if s.len() != 3 || s[0] != 2 {
            return Err(CodecError::shape(format!("motion field must be 2xHxW, got {s:?}")));
        }
        let vb = v.clone().into_shape(IxDyn(&[1, 2, s[1], s[2]])).unwrap();
        let m = self.encode(&Tensor::constant(vb));
        let mu = Arr::zeros(IxDyn(m.shape()));
        let sigma = self.sigma_dense(m.shape()[2], m.shape()[3]);
        let (payload, recon, _) = entropy::code_gaussian(m.data(), &mu, &sigma, cdfs);
        let v_hat = self.decode(&Tensor::constant(recon));
        let bits = payload.len() as f64 * 8.0;
        Ok((payload, strip_batch(v_hat.data()), bits))
    }

    /// Decoder-side counterpart of [`MotionCoder::compress`] for a frame of
    /// pixel size `h` x `w`. Bit-exact with the encoder's reconstruction.
    pub fn decompress(&self, payload: &[u8], h: usize, w: usize, cdfs: &CdfStore) -> Result<Arr> {
        if h % 4 != 0 || w % 4 != 0 {
            return Err(CodecError::shape(format!(
                "motion latent needs dimensions divisible by 4, got {h}x{w}"
            )));
        }
        let (h4, w4) = (h / 4, w / 4);
        let mu = Arr::zeros(IxDyn(&[1, self.latent_channels, h4, w4]));
        let sigma = self.sigma_dense(h4, w4);
        let recon = entropy::decode_gaussian(payload, &mu, &sigma, cdfs)?;
        let v_hat = self.decode(&Tensor::constant(recon));
        Ok(strip_batch(v_hat.data()))
    }

    /// Likelihood-based rate estimate for the quantized latent (no coding).
    pub fn rate_estimate(&self, v: &Arr) -> Result<f64> {
        let s = v.shape();
        if s.len() != 3 || s[0] != 2 {
            return Err(CodecError::shape(format!("motion field must be 2xHxW, got {s:?}")));
        }
        let vb = v.clone().into_shape(IxDyn(&[1, 2, s[1], s[2]])).unwrap();
        let m = self.encode(&Tensor::constant(vb));
        let mu = Arr::zeros(IxDyn(m.shape()));
        let sigma = self.sigma_dense(m.shape()[2], m.shape()[3]);
        let q = entropy::quantize_infer(m.data(), &mu);
        Ok(entropy::likelihood_bits_f64(&q, &mu, &sigma))
    }
}

fn softplus_f64(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn strip_batch(a: &Arr) -> Arr {
    a.index_axis(ndarray::Axis(0), 0).to_owned().into_dyn()
}

// ----- warping --------------------------------------------------------------

/// Motion-compensate a feature map by a pixel-resolution displacement field.
/// When the feature grid differs from the flow grid, the flow is bilinearly
/// resized and its magnitudes rescaled by the resolution ratio per axis.
pub fn warp(features: &Tensor, flow: &Tensor) -> Tensor {
    let fs = features.shape().to_vec();
    let vs = flow.shape().to_vec();
    if fs[2] == vs[2] && fs[3] == vs[3] {
        return warp_bilinear(features, flow);
    }
    let resized = resize_bilinear(flow, fs[2], fs[3]);
    let sx = fs[3] as f64 / vs[3] as f64;
    let sy = fs[2] as f64 / vs[2] as f64;
    let dx = resized.slice_axis_op(1, 0, 1).scale(sx);
    let dy = resized.slice_axis_op(1, 1, 1).scale(sy);
    warp_bilinear(features, &Tensor::concat(1, &[dx, dy]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dvco_autograd::nn::uniform_init;
    use rand::SeedableRng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig::tiny()
    }

    fn random_frame(rng: &mut ChaCha12Rng, c: usize, h: usize, w: usize) -> Arr {
        let mut a = Arr::zeros(IxDyn(&[c, h, w]));
        for e in a.iter_mut() {
            *e = rng.gen_range(0.0..1.0);
        }
        a
    }

    #[test]
    fn static_scene_gives_zero_flow() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let f = random_frame(&mut rng, 3, 32, 32);
        let flow = block_matching_flow(&f, &f).unwrap();
        assert!(flow.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn integer_shift_recovered_in_interior() {
        // cur[y][x] = ref[y][x-4]: content moved right by 4 pixels.
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let refr = random_frame(&mut rng, 3, 48, 48);
        let mut cur = refr.clone();
        for c in 0..3 {
            for y in 0..48 {
                for x in 0..48 {
                    let sx = (x as i64 - 4).clamp(0, 47) as usize;
                    cur[[c, y, x]] = refr[[c, y, sx]];
                }
            }
        }
        let flow = block_matching_flow(&cur, &refr).unwrap();
        // Interior block (16..32): wrap-free content.
        assert_eq!(flow[[0, 24, 24]], 4.0);
        assert_eq!(flow[[1, 24, 24]], 0.0);
    }

    #[test]
    fn size_mismatch_rejected() {
        let a = Arr::zeros(IxDyn(&[3, 32, 32]));
        let b = Arr::zeros(IxDyn(&[3, 32, 48]));
        assert!(matches!(block_matching_flow(&a, &b), Err(CodecError::Shape(_))));
    }

    #[test]
    fn learned_mode_shapes_and_zero_init() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let net = FlowNet::new(&mut store, &mut rng, &tiny_cfg());
        let cur = Tensor::constant(uniform_init(&mut rng, &[1, 3, 32, 32], 1.0));
        let refr = Tensor::constant(uniform_init(&mut rng, &[1, 3, 32, 32], 1.0));
        let flow = estimate_motion(&net, &cur, &refr, MotionMode::Learned).unwrap();
        assert_eq!(flow.shape(), &[1, 2, 32, 32]);
        // Zero-initialized output convolutions: untrained flow is identically 0.
        assert!(flow.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn motion_roundtrip_is_bit_exact() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let coder = MotionCoder::new(&mut store, &mut rng, &tiny_cfg());
        let cdfs = CdfStore::new();
        let mut v = Arr::zeros(IxDyn(&[2, 32, 32]));
        for e in v.iter_mut() {
            *e = rng.gen_range(-3.0..3.0);
        }
        let (payload, v_hat, bits) = coder.compress(&v, &cdfs).unwrap();
        assert_eq!(payload.len() as f64 * 8.0, bits);
        let decoded = coder.decompress(&payload, 32, 32, &cdfs).unwrap();
        assert_eq!(v_hat.shape(), &[2, 32, 32]);
        for (a, b) in v_hat.iter().zip(decoded.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn coded_length_close_to_likelihood_estimate() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let coder = MotionCoder::new(&mut store, &mut rng, &tiny_cfg());
        let cdfs = CdfStore::new();
        for trial in 0..100 {
            let mut v = Arr::zeros(IxDyn(&[2, 32, 32]));
            for e in v.iter_mut() {
                *e = rng.gen_range(-4.0..4.0);
            }
            let (payload, _, _) = coder.compress(&v, &cdfs).unwrap();
            let est = coder.rate_estimate(&v).unwrap();
            let actual = payload.len() as f64 * 8.0;
            assert!(
                actual <= est * 1.02 + 64.0,
                "trial {trial}: coded {actual} bits vs estimate {est}"
            );
        }
    }

    #[test]
    fn train_path_is_differentiable() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let coder = MotionCoder::new(&mut store, &mut rng, &tiny_cfg());
        let v = Tensor::constant(uniform_init(&mut rng, &[1, 2, 16, 16], 2.0));
        let (v_hat, rate) = coder.compress_train(&v, &mut rng);
        assert_eq!(v_hat.shape(), &[1, 2, 16, 16]);
        let loss = v_hat.square().sum_all().add(&rate.scale(1e-4));
        let grads = loss.backward();
        let sigma_grad = grads.get(store.get("motion.prior_scale").unwrap().leaf_id());
        assert!(sigma_grad.is_some(), "prior scale should receive gradient");
        assert!(rate.scalar() > 0.0);
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let f = Tensor::constant(uniform_init(&mut rng, &[1, 5, 12, 12], 1.0));
        let flow = Tensor::constant(Arr::zeros(IxDyn(&[1, 2, 12, 12])));
        let out = warp(&f, &flow);
        for (a, b) in out.data().iter().zip(f.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn warp_integer_shift_matches_index_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let f = Tensor::constant(uniform_init(&mut rng, &[1, 1, 16, 16], 1.0));
        let mut fl = Arr::zeros(IxDyn(&[1, 2, 16, 16]));
        fl.index_axis_mut(ndarray::Axis(1), 0).fill(2.0);
        let out = warp(&f, &Tensor::constant(fl));
        let od = out.data();
        let id = f.data();
        for y in 0..16 {
            for x in 2..16 {
                assert_eq!(od[[0, 0, y, x]], id[[0, 0, y, x - 2]]);
            }
        }
    }

    #[test]
    fn half_resolution_warp_rescales_flow() {
        // A dx=2 pixel flow moves half-resolution features by exactly 1 cell.
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let f = Tensor::constant(uniform_init(&mut rng, &[1, 1, 8, 8], 1.0));
        let mut fl = Arr::zeros(IxDyn(&[1, 2, 16, 16]));
        fl.index_axis_mut(ndarray::Axis(1), 0).fill(2.0);
        let out = warp(&f, &Tensor::constant(fl));
        let od = out.data();
        let id = f.data();
        for y in 0..8 {
            for x in 1..8 {
                assert!((od[[0, 0, y, x]] - id[[0, 0, y, x - 1]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warp_flow_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let feat = uniform_init(&mut rng, &[1, 2, 6, 6], 1.0);
        let base_flow = uniform_init(&mut rng, &[1, 2, 6, 6], 0.7);
        let f = Tensor::constant(feat);
        let flow = Tensor::var(base_flow.clone());
        let loss = warp(&f, &flow).square().sum_all();
        let grads = loss.backward();
        let g = grads.get(flow.leaf_id().unwrap()).unwrap().clone();
        let eps = 1e-6;
        let mut checked = 0;
        for idx in [[0, 0, 2, 3], [0, 1, 4, 1], [0, 0, 5, 5], [0, 1, 1, 2]] {
            let mut plus = base_flow.clone();
            plus[IxDyn(&idx)] += eps;
            let lp = warp(&f, &Tensor::constant(plus)).square().sum_all().scalar();
            let mut minus = base_flow.clone();
            minus[IxDyn(&idx)] -= eps;
            let lm = warp(&f, &Tensor::constant(minus)).square().sum_all().scalar();
            let fd = (lp - lm) / (2.0 * eps);
            let an = g[IxDyn(&idx)];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                ((fd - an).abs() / denom) <= 1e-3,
                "index {idx:?}: fd {fd} vs autograd {an}"
            );
            checked += 1;
        }
        assert_eq!(checked, 4);
    }
}

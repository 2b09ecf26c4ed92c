//! Temporal context adapter: encodes the reconstructed latent together with
//! the large-scale context into four feature maps matching the denoiser's
//! encoder levels. The initialization makes the adapter invisible — its first
//! convolution copies the denoiser's first-conv weights on the latent
//! channels, and all four output convolutions start at exact zero.

use crate::config::ModelConfig;
use crate::diffusion::DenoisingUNet;
use crate::error::{CodecError, Result};
use crate::nnutil::ResBlock;
use dvco_autograd::nn::{Conv2d, ParamStore};
use dvco_autograd::tensor::Tensor;
use ndarray::IxDyn;
use rand_chacha::ChaCha12Rng;

pub struct TcaNetwork {
    first: Conv2d,
    blocks: Vec<[ResBlock; 2]>,
    downs: Vec<Conv2d>,
    outs: Vec<Conv2d>,
    latent_channels: usize,
}

/// Build the adapter against an existing denoiser, copying its first-conv
/// weights onto the latent input channels and zeroing everything that feeds
/// the injection sites.
pub fn init_tca(
    store: &mut ParamStore,
    rng: &mut ChaCha12Rng,
    unet: &DenoisingUNet,
    cfg: &ModelConfig,
) -> Result<TcaNetwork> {
    let widths = cfg.unet_widths();
    let cy = cfg.latent_channels;
    let c0 = cfg.context0_channels;
    let src = unet.first_conv();
    if src.in_channels() < cy {
        return Err(CodecError::config(format!(
            "denoiser first conv has {} input channels, cannot copy {}",
            src.in_channels(),
            cy
        )));
    }
    if src.out_channels() != widths[0] || src.kernel() != 3 {
        return Err(CodecError::config(
            "denoiser first conv incompatible with adapter width",
        ));
    }

    let first = Conv2d::zeroed(store, "tca.first", cy + c0, widths[0], 3, 1, 1);
    {
        // Copy weights for the first `cy` input channels and the full bias;
        // the context channels stay zero.
        let sw = src.weight.value();
        let mut fw = ndarray::ArrayD::zeros(IxDyn(&[widths[0], cy + c0, 3, 3]));
        for o in 0..widths[0] {
            for i in 0..cy {
                for ky in 0..3 {
                    for kx in 0..3 {
                        fw[IxDyn(&[o, i, ky, kx])] = sw[IxDyn(&[o, i, ky, kx])];
                    }
                }
            }
        }
        first.weight.set_value(fw);
        let (sb, fb) = (src.bias.as_ref(), first.bias.as_ref());
        if let (Some(sb), Some(fb)) = (sb, fb) {
            fb.set_value((*sb.value()).clone());
        }
    }

    let mut blocks = Vec::new();
    let mut downs = Vec::new();
    let mut outs = Vec::new();
    for (i, &w) in widths.iter().enumerate() {
        blocks.push([
            ResBlock::new(store, rng, &format!("tca.l{i}.rb0"), w, w),
            ResBlock::new(store, rng, &format!("tca.l{i}.rb1"), w, w),
        ]);
        outs.push(Conv2d::zeroed(store, &format!("tca.l{i}.out"), w, w, 1, 1, 0));
        if i + 1 < widths.len() {
            downs.push(Conv2d::k3(
                store,
                rng,
                &format!("tca.l{i}.down"),
                w,
                widths[i + 1],
                2,
            ));
        }
    }
    Ok(TcaNetwork { first, blocks, downs, outs, latent_channels: cy })
}

impl TcaNetwork {
    pub fn first_conv(&self) -> &Conv2d {
        &self.first
    }

    /// Four features at strides 1, 2, 4, 8 on the latent grid, channel
    /// widths matching the denoiser's encoder levels.
    pub fn forward(&self, y_bar: &Tensor, c0: &Tensor) -> Result<[Tensor; 4]> {
        let ys = y_bar.shape();
        let cs = c0.shape();
        if ys.len() != 4
            || cs.len() != 4
            || ys[1] != self.latent_channels
            || ys[2] != cs[2]
            || ys[3] != cs[3]
        {
            return Err(CodecError::shape(format!(
                "adapter inputs misaligned: latent {ys:?} vs context {cs:?}"
            )));
        }
        let mut x = self.first.forward(&Tensor::concat(1, &[y_bar.clone(), c0.clone()]));
        let mut feats = Vec::with_capacity(4);
        for i in 0..self.blocks.len() {
            x = self.blocks[i][1].forward(&self.blocks[i][0].forward(&x));
            feats.push(self.outs[i].forward(&x));
            if i + 1 < self.blocks.len() {
                x = self.downs[i].forward(&x);
            }
        }
        match feats.try_into() {
            Ok(arr) => Ok(arr),
            Err(_) => unreachable!("adapter always yields four levels"),
        }
    }

    /// Convolutions of the adapter (for freeze masks and audits).
    pub fn convs(&self) -> Vec<&Conv2d> {
        let mut v = vec![&self.first];
        for pair in &self.blocks {
            v.extend(pair[0].convs());
            v.extend(pair[1].convs());
        }
        v.extend(self.downs.iter());
        v.extend(self.outs.iter());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::osd_refine;
    use crate::diffusion::build_schedule;
    use dvco_autograd::conv2d;
    use dvco_autograd::nn::uniform_init;
    use dvco_autograd::optim::AdamW;
    use dvco_autograd::tensor::Arr;
    use rand::SeedableRng;

    fn fixture(seed: u64) -> (ParamStore, DenoisingUNet, TcaNetwork, ModelConfig) {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let unet = DenoisingUNet::new(&mut store, &mut rng, &cfg);
        let tca = init_tca(&mut store, &mut rng, &unet, &cfg).unwrap();
        (store, unet, tca, cfg)
    }

    #[test]
    fn outputs_zero_at_init() {
        let (_s, _u, tca, cfg) = fixture(90);
        let mut rng = ChaCha12Rng::seed_from_u64(91);
        for _ in 0..100 {
            let y = Tensor::constant(uniform_init(&mut rng, &[1, cfg.latent_channels, 8, 8], 2.0));
            let c0 =
                Tensor::constant(uniform_init(&mut rng, &[1, cfg.context0_channels, 8, 8], 2.0));
            let feats = tca.forward(&y, &c0).unwrap();
            let widths = cfg.unet_widths();
            for (i, f) in feats.iter().enumerate() {
                assert_eq!(f.shape(), &[1, widths[i], 8 >> i, 8 >> i]);
                assert!(f.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn injection_is_identity_at_init() {
        let (_s, unet, tca, cfg) = fixture(92);
        let mut rng = ChaCha12Rng::seed_from_u64(93);
        let sched = build_schedule(100, 1e-3, 2e-2).unwrap();
        for _ in 0..20 {
            let y = Tensor::constant(uniform_init(&mut rng, &[1, cfg.latent_channels, 8, 8], 1.5));
            let c0 =
                Tensor::constant(uniform_init(&mut rng, &[1, cfg.context0_channels, 8, 8], 1.5));
            let feats = tca.forward(&y, &c0).unwrap();
            let with = osd_refine(&y, &c0, 0, &unet, Some(&feats), &sched).unwrap();
            let without = osd_refine(&y, &c0, 0, &unet, None, &sched).unwrap();
            for (a, b) in with.data().iter().zip(without.data().iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn first_conv_copies_denoiser_weights() {
        let (_s, unet, tca, cfg) = fixture(94);
        let mut rng = ChaCha12Rng::seed_from_u64(95);
        let y = Tensor::constant(uniform_init(&mut rng, &[1, cfg.latent_channels, 8, 8], 1.0));
        let zeros_ctx =
            Tensor::constant(Arr::zeros(IxDyn(&[1, cfg.context0_channels, 8, 8])));
        let got = tca
            .first_conv()
            .forward(&Tensor::concat(1, &[y.clone(), zeros_ctx]));

        // Oracle: convolve y with the denoiser's first-conv weights sliced to
        // the latent input channels.
        let sw = unet.first_conv().weight.value();
        let sliced = sw
            .slice(ndarray::s![.., ..cfg.latent_channels, .., ..])
            .to_owned()
            .into_dyn();
        let bias = unet.first_conv().bias.as_ref().unwrap().value();
        let expect = conv2d(
            &y,
            &Tensor::constant(sliced),
            Some(&Tensor::constant((*bias).clone())),
            1,
            1,
        );
        for (a, b) in got.data().iter().zip(expect.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let (_s, _u, tca, cfg) = fixture(96);
        let y = Tensor::constant(Arr::zeros(IxDyn(&[1, cfg.latent_channels, 8, 8])));
        let c0 = Tensor::constant(Arr::zeros(IxDyn(&[1, cfg.context0_channels, 4, 4])));
        assert!(matches!(tca.forward(&y, &c0), Err(CodecError::Shape(_))));
    }

    #[test]
    fn one_step_wakes_the_outputs() {
        let (store, _u, tca, cfg) = fixture(97);
        let mut rng = ChaCha12Rng::seed_from_u64(98);
        let y = Tensor::constant(uniform_init(&mut rng, &[1, cfg.latent_channels, 8, 8], 1.0));
        let c0 = Tensor::constant(uniform_init(&mut rng, &[1, cfg.context0_channels, 8, 8], 1.0));
        store.set_trainable_where(|n| n.starts_with("tca."));
        let feats = tca.forward(&y, &c0).unwrap();
        // Pull every output toward one; the zero convs must move.
        let mut loss = Tensor::scalar_const(0.0);
        for f in &feats {
            loss = loss.add(&f.add_scalar(-1.0).square().sum_all());
        }
        let grads = loss.backward();
        let mut opt = AdamW::new(1e-2);
        opt.step(&store.trainable_params(), &grads);
        let feats2 = tca.forward(&y, &c0).unwrap();
        let nonzero = feats2
            .iter()
            .any(|f| f.data().iter().any(|&v| v != 0.0));
        assert!(nonzero, "a gradient step must move at least one output off zero");
        store.set_all_trainable();
    }

    #[test]
    fn mismatched_first_conv_rejected() {
        // A denoiser whose first conv is too narrow for the copy must fail.
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let unet = DenoisingUNet::new(&mut store, &mut rng, &cfg);
        let mut bad = cfg.clone();
        bad.latent_channels = unet.first_conv().in_channels() + 1;
        let err = init_tca(&mut store, &mut rng, &unet, &bad);
        assert!(matches!(err, Err(CodecError::Config(_))));
    }
}

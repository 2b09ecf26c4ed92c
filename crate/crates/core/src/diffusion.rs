//! One-step diffusion refinement: noise schedule, the conditional denoising
//! UNet, the closed-form single-step solver, and the multi-step ancestral
//! baseline used for ablations.

use crate::config::{ModelConfig, ScheduleConfig};
use crate::error::{CodecError, Result};
use crate::nnutil::{norm_groups, ResBlock};
use dvco_autograd::nn::{Conv2d, GroupNorm, ParamStore};
use dvco_autograd::tensor::{Arr, Tensor};
use dvco_autograd::upsample_nearest2;
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use std::sync::atomic::{AtomicU64, Ordering};

// ----- noise schedule -------------------------------------------------------

/// Per-step alpha coefficients of the forward process. Betas are linearly
/// spaced in sqrt-space (scaled-linear), alpha_n = 1 - beta_n, and
/// alpha_bar_n is the running product.
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(CodecError::config("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(CodecError::config(format!(
            "schedule betas must satisfy 0 < start <= end < 1, got {beta_start} .. {beta_end}"
        )));
    }
    let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
    let mut alpha = Vec::with_capacity(steps);
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for i in 0..steps {
        let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
        // Endpoints bypass the sqrt round trip so they are exact.
        let beta = if f == 0.0 {
            beta_start
        } else if f == 1.0 {
            beta_end
        } else {
            (s0 + f * (s1 - s0)).powi(2)
        };
        let a = 1.0 - beta;
        prod *= a;
        alpha.push(a);
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        build_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.alpha[n]
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bar[n]
    }

    fn check_step(&self, n: usize) -> Result<()> {
        if n >= self.steps() {
            return Err(CodecError::domain(format!(
                "timestep {n} outside schedule of {} steps",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `sqrt(alpha_bar_n) * y0 + sqrt(1 - alpha_bar_n) * noise`.
pub fn forward_noising(
    y0: &Tensor,
    n: usize,
    noise: &Arr,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_step(n)?;
    if noise.shape() != y0.shape() {
        return Err(CodecError::shape(format!(
            "noise shape {:?} does not match latent {:?}",
            noise.shape(),
            y0.shape()
        )));
    }
    let ab = sched.alpha_bar(n);
    Ok(y0
        .scale(ab.sqrt())
        .add(&Tensor::constant(noise.clone()).scale((1.0 - ab).sqrt())))
}

// ----- denoising UNet -------------------------------------------------------

struct UnetBlock {
    rb: ResBlock,
    tproj: Conv2d,
}

impl UnetBlock {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        time_dim: usize,
    ) -> Self {
        UnetBlock {
            rb: ResBlock::new(store, rng, name, in_ch, out_ch),
            tproj: Conv2d::k1(store, rng, &format!("{name}.tproj"), time_dim, out_ch),
        }
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Tensor {
        self.rb.forward_with_time(x, Some(&self.tproj.forward(temb)))
    }

    fn convs(&self) -> Vec<&Conv2d> {
        let mut v = self.rb.convs();
        v.push(&self.tproj);
        v
    }
}

/// Conditional noise predictor with four encoder levels at strides 1, 2, 4, 8
/// on the latent grid. The latent and its condition enter concatenated on the
/// channel axis; adapter features are added after each encoder level. Every
/// forward pass bumps an atomic call counter used by the step-count audits.
pub struct DenoisingUNet {
    first: Conv2d,
    enc: Vec<UnetBlock>,
    down: Vec<Conv2d>,
    mid: UnetBlock,
    up: Vec<Conv2d>,
    dec: Vec<UnetBlock>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    time_mlp: Conv2d,
    time_dim: usize,
    latent_channels: usize,
    calls: AtomicU64,
}

impl DenoisingUNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, cfg: &ModelConfig) -> Self {
        let widths = cfg.unet_widths();
        let cy = cfg.latent_channels;
        let cond = cy + cfg.context0_channels;
        let td = cfg.unet_base;
        let first = Conv2d::k3(store, rng, "unet.first", cy + cond, widths[0], 1);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            enc.push(UnetBlock::new(store, rng, &format!("unet.enc{i}"), w, w, td));
            if i + 1 < widths.len() {
                down.push(Conv2d::k3(
                    store,
                    rng,
                    &format!("unet.down{i}"),
                    w,
                    widths[i + 1],
                    2,
                ));
            }
        }
        let mid = UnetBlock::new(store, rng, "unet.mid", widths[3], widths[3], td);
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for i in (0..3).rev() {
            up.push(Conv2d::k3(
                store,
                rng,
                &format!("unet.up{i}"),
                widths[i + 1],
                widths[i],
                1,
            ));
            dec.push(UnetBlock::new(
                store,
                rng,
                &format!("unet.dec{i}"),
                2 * widths[i],
                widths[i],
                td,
            ));
        }
        let out_norm = GroupNorm::new(store, "unet.out_norm", widths[0], norm_groups(widths[0]));
        let out_conv = Conv2d::zeroed(store, "unet.out_conv", widths[0], cy, 3, 1, 1);
        let time_mlp = Conv2d::k1(store, rng, "unet.time_mlp", td, td);
        DenoisingUNet {
            first,
            enc,
            down,
            mid,
            up,
            dec,
            out_norm,
            out_conv,
            time_mlp,
            time_dim: td,
            latent_channels: cy,
            calls: AtomicU64::new(0),
        }
    }

    /// The first convolution, exposed so the adapter can copy its weights.
    pub fn first_conv(&self) -> &Conv2d {
        &self.first
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    /// Sinusoidal embedding of the timestep, shaped [1, time_dim, 1, 1].
    fn timestep_embedding(&self, n: usize) -> Tensor {
        let d = self.time_dim;
        let half = d / 2;
        let mut emb = Arr::zeros(IxDyn(&[1, d, 1, 1]));
        for i in 0..half {
            let freq = (n as f64) * (-(i as f64 / half as f64) * 10000.0_f64.ln()).exp();
            emb[IxDyn(&[0, i, 0, 0])] = freq.sin();
            emb[IxDyn(&[0, half + i, 0, 0])] = freq.cos();
        }
        self.time_mlp.forward(&Tensor::constant(emb)).silu()
    }

    /// Predict the noise for latent `y` under condition `cond` at timestep
    /// `n`. `adapter` optionally supplies four additive features matching the
    /// encoder levels.
    pub fn forward(
        &self,
        y: &Tensor,
        cond: &Tensor,
        n: usize,
        adapter: Option<&[Tensor; 4]>,
    ) -> Tensor {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let temb = self.timestep_embedding(n);
        let mut x = self.first.forward(&Tensor::concat(1, &[y.clone(), cond.clone()]));
        let mut skips = Vec::new();
        for i in 0..self.enc.len() {
            x = self.enc[i].forward(&x, &temb);
            if let Some(feats) = adapter {
                x = x.add(&feats[i]);
            }
            if i + 1 < self.enc.len() {
                skips.push(x.clone());
                x = self.down[i].forward(&x);
            }
        }
        x = self.mid.forward(&x, &temb);
        for j in 0..3 {
            x = self.up[j].forward(&upsample_nearest2(&x));
            let skip = skips.pop().expect("skip per decoder level");
            x = self.dec[j].forward(&Tensor::concat(1, &[x, skip]), &temb);
        }
        self.out_conv.forward(&self.out_norm.forward(&x).silu())
    }

    /// Every kernel-bearing convolution, for LoRA wrapping and audits.
    pub fn convs(&self) -> Vec<&Conv2d> {
        let mut v = vec![&self.first];
        for b in &self.enc {
            v.extend(b.convs());
        }
        v.extend(self.down.iter());
        v.extend(self.mid.convs());
        v.extend(self.up.iter());
        for b in &self.dec {
            v.extend(b.convs());
        }
        v.push(&self.out_conv);
        v
    }

    /// Attach LoRA pairs to every convolution in the network.
    pub fn attach_lora(
        &self,
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        rank: usize,
        alpha: f64,
    ) {
        for c in self.convs() {
            c.attach_lora(store, rng, rank, alpha);
        }
    }
}

// ----- refinement solvers ---------------------------------------------------

/// Anything that can predict noise for a conditioned latent. Implemented by
/// [`DenoisingUNet`]; test oracles substitute fixed-output stubs.
pub trait Denoiser {
    fn predict(&self, y: &Tensor, cond: &Tensor, n: usize, adapter: Option<&[Tensor; 4]>)
        -> Tensor;
}

impl Denoiser for DenoisingUNet {
    fn predict(
        &self,
        y: &Tensor,
        cond: &Tensor,
        n: usize,
        adapter: Option<&[Tensor; 4]>,
    ) -> Tensor {
        self.forward(y, cond, n, adapter)
    }
}

fn check_condition(y: &Tensor, c0: &Tensor) -> Result<()> {
    let ys = y.shape();
    let cs = c0.shape();
    if ys.len() != 4 || cs.len() != 4 || ys[2] != cs[2] || ys[3] != cs[3] {
        return Err(CodecError::shape(format!(
            "condition misaligned with latent: y {ys:?} vs c0 {cs:?}"
        )));
    }
    Ok(())
}

/// Single-step refinement. The reconstructed latent enters noise-free; the
/// condition is its concatenation with the large-scale context; the output is
/// the closed-form denoise
/// `(y - ((1 - a_n) / sqrt(1 - abar_n)) * eps) / sqrt(a_n)`
/// evaluated with exactly one denoiser call.
pub fn osd_refine(
    y_bar: &Tensor,
    c0: &Tensor,
    n: usize,
    unet: &dyn Denoiser,
    adapter: Option<&[Tensor; 4]>,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_condition(y_bar, c0)?;
    sched.check_step(n)?;
    let cond = Tensor::concat(1, &[y_bar.clone(), c0.clone()]);
    let eps = unet.predict(y_bar, &cond, n, adapter);
    let a = sched.alpha(n);
    let ab = sched.alpha_bar(n);
    let coef = (1.0 - a) / (1.0 - ab).sqrt();
    Ok(y_bar.sub(&eps.scale(coef)).scale(1.0 / a.sqrt()))
}

/// Noise source for the multi-step baseline. `None` makes the whole loop
/// deterministic (used by the single-step degeneration check).
pub enum MsdNoise {
    Seeded(u64),
    None,
}

/// Multi-step ancestral baseline: noise the latent to `n_start`, then run
/// `steps` evenly spaced DDPM reverse steps with the same conditioning.
/// The denoiser runs exactly `steps` times.
#[allow(clippy::too_many_arguments)]
pub fn msd_refine(
    y_bar: &Tensor,
    c0: &Tensor,
    steps: usize,
    n_start: usize,
    noise: MsdNoise,
    unet: &dyn Denoiser,
    adapter: Option<&[Tensor; 4]>,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_condition(y_bar, c0)?;
    if steps == 0 || steps > sched.steps() {
        return Err(CodecError::domain(format!(
            "step count {steps} outside schedule of {} steps",
            sched.steps()
        )));
    }
    sched.check_step(n_start)?;
    let mut rng = match noise {
        MsdNoise::Seeded(s) => {
            Some(<ChaCha12Rng as rand::SeedableRng>::seed_from_u64(s))
        }
        MsdNoise::None => None,
    };
    let shape: Vec<usize> = y_bar.shape().to_vec();
    let draw = |rng: &mut Option<ChaCha12Rng>| -> Arr {
        match rng {
            Some(r) => {
                let mut a = Arr::zeros(IxDyn(&shape));
                for e in a.iter_mut() {
                    *e = r.sample(StandardNormal);
                }
                a
            }
            None => Arr::zeros(IxDyn(&shape)),
        }
    };

    // Evenly spaced timesteps from n_start down to 0 (inclusive).
    let timesteps: Vec<usize> = (0..steps)
        .map(|k| {
            if steps == 1 {
                n_start
            } else {
                ((n_start as f64) * (1.0 - k as f64 / (steps - 1) as f64)).round() as usize
            }
        })
        .collect();

    let cond = Tensor::concat(1, &[y_bar.clone(), c0.clone()]);
    let mut x = forward_noising(y_bar, n_start, &draw(&mut rng), sched)?;
    for (k, &t) in timesteps.iter().enumerate() {
        let eps = unet.predict(&x, &cond, t, adapter);
        let ab_t = sched.alpha_bar(t);
        let ab_prev = if k + 1 < steps {
            sched.alpha_bar(timesteps[k + 1])
        } else {
            1.0
        };
        let a_eff = ab_t / ab_prev;
        let mean = x
            .sub(&eps.scale((1.0 - a_eff) / (1.0 - ab_t).sqrt()))
            .scale(1.0 / a_eff.sqrt());
        x = if k + 1 < steps {
            let var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - a_eff);
            mean.add(&Tensor::constant(draw(&mut rng)).scale(var.max(0.0).sqrt()))
        } else {
            mean
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dvco_autograd::nn::uniform_init;
    use rand::SeedableRng;

    fn unet_fixture(seed: u64) -> (ParamStore, DenoisingUNet, ModelConfig) {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let unet = DenoisingUNet::new(&mut store, &mut rng, &cfg);
        (store, unet, cfg)
    }

    fn latent_and_ctx(cfg: &ModelConfig, rng: &mut ChaCha12Rng, h: usize, w: usize) -> (Tensor, Tensor) {
        (
            Tensor::constant(uniform_init(rng, &[1, cfg.latent_channels, h, w], 1.0)),
            Tensor::constant(uniform_init(rng, &[1, cfg.context0_channels, h, w], 1.0)),
        )
    }

    #[test]
    fn schedule_defaults_shape() {
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.steps(), 1000);
        assert!((s.alpha(0) - (1.0 - 8.5e-4)).abs() < 1e-12);
        assert_eq!(s.alpha_bar(0), s.alpha(0));
        for n in 1..s.steps() {
            assert!(s.alpha_bar(n) < s.alpha_bar(n - 1));
            assert!((s.alpha_bar(n) - s.alpha_bar(n - 1) * s.alpha(n)).abs() < 1e-15);
            assert!(s.alpha(n) > 0.0 && s.alpha(n) < 1.0);
        }
        assert!(s.alpha_bar(s.steps() - 1) < 0.01);
    }

    #[test]
    fn schedule_single_step() {
        let s = build_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.steps(), 1);
        assert_eq!(s.alpha(0), 0.5);
        assert_eq!(s.alpha_bar(0), 0.5);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(matches!(build_schedule(0, 0.1, 0.2), Err(CodecError::Config(_))));
        assert!(matches!(build_schedule(10, 0.0, 0.2), Err(CodecError::Config(_))));
        assert!(matches!(build_schedule(10, 0.3, 0.2), Err(CodecError::Config(_))));
        assert!(matches!(build_schedule(10, 0.3, 1.0), Err(CodecError::Config(_))));
    }

    #[test]
    fn forward_noising_affine_form() {
        let s = build_schedule(100, 1e-3, 2e-2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(70);
        let y0 = uniform_init(&mut rng, &[1, 2, 4, 4], 1.0);
        let eps = uniform_init(&mut rng, &[1, 2, 4, 4], 1.0);
        let n = 37;
        let out = forward_noising(&Tensor::constant(y0.clone()), n, &eps, &s).unwrap();
        let doubled = forward_noising(&Tensor::constant(y0.mapv(|v| 2.0 * v)), n, &eps, &s).unwrap();
        let ab = s.alpha_bar(n);
        for ((o, d), (y, e)) in out
            .data()
            .iter()
            .zip(doubled.data().iter())
            .zip(y0.iter().zip(eps.iter()))
        {
            let expect = ab.sqrt() * y + (1.0 - ab).sqrt() * e;
            assert!((o - expect).abs() < 1e-12);
            let expect2 = 2.0 * ab.sqrt() * y + (1.0 - ab).sqrt() * e;
            assert!((d - expect2).abs() < 1e-12);
        }
        assert!(matches!(
            forward_noising(&Tensor::constant(y0), 100, &eps, &s),
            Err(CodecError::Domain(_))
        ));
    }

    #[test]
    fn forward_noising_variance_monte_carlo() {
        let s = build_schedule(50, 1e-3, 5e-2).unwrap();
        let n = 30;
        let mut rng = ChaCha12Rng::seed_from_u64(71);
        let y0 = Tensor::constant(Arr::zeros(IxDyn(&[1, 1, 100, 100])));
        let mut acc = 0.0;
        let mut count = 0usize;
        for _ in 0..10 {
            let mut eps = Arr::zeros(IxDyn(&[1, 1, 100, 100]));
            for e in eps.iter_mut() {
                *e = rng.sample(StandardNormal);
            }
            let out = forward_noising(&y0, n, &eps, &s).unwrap();
            acc += out.data().iter().map(|v| v * v).sum::<f64>();
            count += out.len();
        }
        let var = acc / count as f64;
        let expect = 1.0 - s.alpha_bar(n);
        assert!(
            (var - expect).abs() / expect <= 0.02,
            "measured {var} vs expected {expect}"
        );
    }

    #[test]
    fn unet_shapes_and_counter() {
        let (_s, unet, cfg) = unet_fixture(72);
        let mut rng = ChaCha12Rng::seed_from_u64(73);
        let (y, c0) = latent_and_ctx(&cfg, &mut rng, 8, 8);
        assert_eq!(unet.call_count(), 0);
        let cond = Tensor::concat(1, &[y.clone(), c0]);
        let eps = unet.forward(&y, &cond, 5, None);
        assert_eq!(eps.shape(), y.shape());
        assert_eq!(unet.call_count(), 1);
        unet.reset_calls();
        assert_eq!(unet.call_count(), 0);
    }

    #[test]
    fn osd_matches_formula_with_zero_stub() {
        // A brand-new UNet has a zeroed output conv, so eps = 0 and the
        // solver must reduce to y / sqrt(alpha_n).
        let (_s, unet, cfg) = unet_fixture(74);
        let mut rng = ChaCha12Rng::seed_from_u64(75);
        let (y, c0) = latent_and_ctx(&cfg, &mut rng, 8, 8);
        let sched = build_schedule(100, 1e-3, 2e-2).unwrap();
        for n in [0, 13, 99] {
            let out = osd_refine(&y, &c0, n, &unet, None, &sched).unwrap();
            let scale = 1.0 / sched.alpha(n).sqrt();
            for (o, i) in out.data().iter().zip(y.data().iter()) {
                assert!((o - i * scale).abs() < 1e-12);
            }
        }
        assert_eq!(unet.call_count(), 3);
    }

    #[test]
    fn osd_exactly_one_call_and_deterministic() {
        let (_s, unet, cfg) = unet_fixture(76);
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let (y, c0) = latent_and_ctx(&cfg, &mut rng, 8, 8);
        let sched = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let a = osd_refine(&y, &c0, 0, &unet, None, &sched).unwrap();
        assert_eq!(unet.call_count(), 1);
        let b = osd_refine(&y, &c0, 0, &unet, None, &sched).unwrap();
        for (x, z) in a.data().iter().zip(b.data().iter()) {
            assert_eq!(x.to_bits(), z.to_bits());
        }
    }

    #[test]
    fn msd_single_step_degenerates_to_osd() {
        // With a vanishing beta the initial noising is the identity up to
        // O(beta), so one deterministic ancestral step at n = 0 reproduces
        // the single-step solver.
        let (_s, unet, cfg) = unet_fixture(78);
        let mut rng = ChaCha12Rng::seed_from_u64(79);
        let (y, c0) = latent_and_ctx(&cfg, &mut rng, 8, 8);
        let sched = build_schedule(10, 1e-12, 1e-11).unwrap();
        let osd = osd_refine(&y, &c0, 0, &unet, None, &sched).unwrap();
        let msd = msd_refine(&y, &c0, 1, 0, MsdNoise::None, &unet, None, &sched).unwrap();
        for (a, b) in osd.data().iter().zip(msd.data().iter()) {
            assert!((a - b).abs() <= 1e-5, "osd {a} vs msd {b}");
        }
    }

    #[test]
    fn msd_counts_steps() {
        let (_s, unet, cfg) = unet_fixture(80);
        let mut rng = ChaCha12Rng::seed_from_u64(81);
        let (y, c0) = latent_and_ctx(&cfg, &mut rng, 8, 8);
        let sched = build_schedule(100, 1e-3, 2e-2).unwrap();
        let _ = msd_refine(&y, &c0, 7, 99, MsdNoise::Seeded(1), &unet, None, &sched).unwrap();
        assert_eq!(unet.call_count(), 7);
        assert!(matches!(
            msd_refine(&y, &c0, 101, 99, MsdNoise::Seeded(1), &unet, None, &sched),
            Err(CodecError::Domain(_))
        ));
    }

    #[test]
    fn lora_attach_identity_and_param_growth() {
        let mut counts = Vec::new();
        for rank in [4usize, 8, 16] {
            let (mut store, unet, cfg) = unet_fixture(82);
            let mut rng = ChaCha12Rng::seed_from_u64(83);
            let (y, c0) = latent_and_ctx(&cfg, &mut rng, 8, 8);
            let cond = Tensor::concat(1, &[y.clone(), c0]);
            let before = unet.forward(&y, &cond, 3, None);
            let base_params = store.total_len();
            let mut lrng = ChaCha12Rng::seed_from_u64(84);
            unet.attach_lora(&mut store, &mut lrng, rank, rank as f64);
            let after = unet.forward(&y, &cond, 3, None);
            for (a, b) in before.data().iter().zip(after.data().iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            counts.push(store.total_len() - base_params);
        }
        // Added parameters scale linearly with rank: 4 -> 8 -> 16 doubles twice.
        assert_eq!(counts[1], 2 * counts[0]);
        assert_eq!(counts[2], 2 * counts[1]);
    }

    #[test]
    fn timestep_changes_output() {
        let (_s, unet, cfg) = unet_fixture(85);
        let mut rng = ChaCha12Rng::seed_from_u64(86);
        let (y, c0) = latent_and_ctx(&cfg, &mut rng, 8, 8);
        let cond = Tensor::concat(1, &[y.clone(), c0]);
        // The output conv is zeroed, so probe an internal effect through the
        // solver with a trained-ish perturbation: bump the out conv first.
        let w = unet.out_conv.weight.value();
        let mut wv = (*w).clone();
        for e in wv.iter_mut() {
            *e = 0.01;
        }
        unet.out_conv.weight.set_value(wv);
        let e1 = unet.forward(&y, &cond, 0, None);
        let e2 = unet.forward(&y, &cond, 700, None);
        let diff: f64 = e1
            .data()
            .iter()
            .zip(e2.data().iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "timestep embedding should influence the output");
    }
}

//! Quality metrics: PSNR, MS-SSIM, and deterministic perceptual proxies.
//!
//! The perceptual proxies replace pretrained LPIPS/DISTS/KID/FID networks with
//! a fixed-seed random multi-scale filter bank so that training and evaluation
//! need no external weights and are bit-reproducible. `lpips_proxy` and
//! `dists_proxy` are differentiable (they appear in training losses); the
//! set-level `kid_proxy` and `fid_proxy` are report-only. Official metric
//! implementations can be attached through [`MetricRegistry`].

use crate::error::{CodecError, Result};
use dvco_autograd::conv::{avg_pool2, conv2d};
use dvco_autograd::tensor::{Arr, Tensor};
use nalgebra::{DMatrix, DVector};
use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

// ----- PSNR ----------------------------------------------------------------

/// Peak signal-to-noise ratio in dB with peak 1.0, capped at 100 dB.
pub fn psnr(x: &Arr, y: &Arr) -> f64 {
    assert_eq!(x.shape(), y.shape(), "psnr shape mismatch");
    let mse = x
        .iter()
        .zip(y.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse <= 1e-10 {
        return 100.0;
    }
    (10.0 * (1.0 / mse).log10()).min(100.0)
}

// ----- MS-SSIM -------------------------------------------------------------

const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut w = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable Gaussian filter of a `[H, W]` plane, valid region only.
fn gauss_filter(x: &ndarray::ArrayView2<f64>, win: &[f64; SSIM_WIN]) -> ndarray::Array2<f64> {
    let (h, w) = x.dim();
    let oh = h - SSIM_WIN + 1;
    let ow = w - SSIM_WIN + 1;
    let mut tmp = ndarray::Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for xx in 0..ow {
            let mut s = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                s += wk * x[[y, xx + k]];
            }
            tmp[[y, xx]] = s;
        }
    }
    let mut out = ndarray::Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for xx in 0..ow {
            let mut s = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                s += wk * tmp[[y + k, xx]];
            }
            out[[y, xx]] = s;
        }
    }
    out
}

/// Mean luminance and contrast-structure terms of one scale, averaged over
/// channels. Values are clamped at zero before entering the MS-SSIM product.
fn ssim_terms(x: &Arr, y: &Arr) -> (f64, f64) {
    let win = gaussian_window();
    let c = x.shape()[0];
    let (mut l_sum, mut cs_sum, mut n) = (0.0, 0.0, 0usize);
    for ch in 0..c {
        let xv = x.index_axis(ndarray::Axis(0), ch);
        let yv = y.index_axis(ndarray::Axis(0), ch);
        let xv = xv.into_dimensionality::<ndarray::Ix2>().unwrap();
        let yv = yv.into_dimensionality::<ndarray::Ix2>().unwrap();
        let mu_x = gauss_filter(&xv, &win);
        let mu_y = gauss_filter(&yv, &win);
        let xx = gauss_filter(&(&xv * &xv).view(), &win);
        let yy = gauss_filter(&(&yv * &yv).view(), &win);
        let xy = gauss_filter(&(&xv * &yv).view(), &win);
        for ((((&mx, &my), &sxx), &syy), &sxy) in mu_x
            .iter()
            .zip(mu_y.iter())
            .zip(xx.iter())
            .zip(yy.iter())
            .zip(xy.iter())
        {
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            l_sum += (2.0 * mx * my + SSIM_C1) / (mx * mx + my * my + SSIM_C1);
            cs_sum += (2.0 * cov + SSIM_C2) / (vx + vy + SSIM_C2);
            n += 1;
        }
    }
    ((l_sum / n as f64).max(0.0), (cs_sum / n as f64).max(0.0))
}

fn downsample2(x: &Arr) -> Arr {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1] & !1, s[2] & !1);
    let mut out = Arr::zeros(IxDyn(&[c, h / 2, w / 2]));
    for ch in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                out[[ch, y, xx]] = 0.25
                    * (x[[ch, 2 * y, 2 * xx]]
                        + x[[ch, 2 * y, 2 * xx + 1]]
                        + x[[ch, 2 * y + 1, 2 * xx]]
                        + x[[ch, 2 * y + 1, 2 * xx + 1]]);
            }
        }
    }
    out
}

/// Multi-scale SSIM with the standard 5-scale weights. Small inputs use as
/// many scales as fit an 11x11 window, with the weights renormalized.
pub fn ms_ssim(x: &Arr, y: &Arr) -> f64 {
    assert_eq!(x.shape(), y.shape(), "ms_ssim shape mismatch");
    let min_dim = x.shape()[1].min(x.shape()[2]);
    let mut levels = 0usize;
    while levels < 5 && (min_dim >> levels) >= SSIM_WIN {
        levels += 1;
    }
    let levels = levels.max(1);
    assert!(min_dim >= SSIM_WIN, "image smaller than the SSIM window");
    let wsum: f64 = MSSSIM_WEIGHTS[..levels].iter().sum();
    let mut cur_x = x.clone();
    let mut cur_y = y.clone();
    let mut score = 1.0;
    for lv in 0..levels {
        let (l, cs) = ssim_terms(&cur_x, &cur_y);
        let w = MSSSIM_WEIGHTS[lv] / wsum;
        if lv + 1 == levels {
            score *= (l * cs).powf(w);
        } else {
            score *= cs.powf(w);
            cur_x = downsample2(&cur_x);
            cur_y = downsample2(&cur_y);
        }
    }
    score
}

// ----- fixed random filter bank --------------------------------------------

const BANK_SEED: u64 = 0x5EED_CAFE;
const BANK_FEATURES: usize = 8;
const BANK_SCALES: usize = 3;

/// Fixed-seed convolution bank shared by all perceptual proxies.
/// Weights are constants (never trained), rebuilt deterministically on demand.
pub struct PerceptualBank {
    weights: Vec<Tensor>,
}

impl PerceptualBank {
    pub fn fixed() -> PerceptualBank {
        let mut rng = ChaCha12Rng::seed_from_u64(BANK_SEED);
        let normal = Normal::new(0.0, (2.0 / 27.0f64).sqrt()).unwrap();
        let weights = (0..BANK_SCALES)
            .map(|_| {
                Tensor::constant(Arr::from_shape_fn(
                    IxDyn(&[BANK_FEATURES, 3, 3, 3]),
                    |_| normal.sample(&mut rng),
                ))
            })
            .collect();
        PerceptualBank { weights }
    }

    /// Smooth nonlinear features at each scale for a `[1,3,H,W]` input.
    pub fn features(&self, x: &Tensor) -> Vec<Tensor> {
        let mut cur = x.clone();
        let mut out = Vec::with_capacity(BANK_SCALES);
        for w in &self.weights {
            out.push(conv2d(&cur, w, None, 1, 1).softplus());
            let s = cur.shape();
            // Pooling halves exactly; odd or tiny inputs stay at their scale.
            if s[2] >= 4 && s[3] >= 4 && s[2] % 2 == 0 && s[3] % 2 == 0 {
                cur = avg_pool2(&cur);
            }
        }
        out
    }
}

fn spatial_mean(f: &Tensor) -> Tensor {
    let s = f.shape().to_vec();
    let n = (s[2] * s[3]) as f64;
    f.sum_axis_keep(3).sum_axis_keep(2).scale(1.0 / n)
}

/// LPIPS-style distance: channel-normalized feature differences, averaged
/// over space, summed over scales. Zero iff features agree everywhere.
pub fn lpips_proxy_t(bank: &PerceptualBank, x: &Tensor, y: &Tensor) -> Tensor {
    let fx = bank.features(x);
    let fy = bank.features(y);
    let mut total = Tensor::scalar_const(0.0);
    for (a, b) in fx.iter().zip(fy.iter()) {
        let na = unit_normalize(a);
        let nb = unit_normalize(b);
        let d = na.sub(&nb).square().sum_axis_keep(1);
        total = total.add(&d.mean_all());
    }
    total
}

fn unit_normalize(f: &Tensor) -> Tensor {
    let s = f.shape().to_vec();
    let norm = f.square().sum_axis_keep(1).add_scalar(1e-10).sqrt();
    f.div(&norm.broadcast_to(&s))
}

/// DISTS-style distance from per-channel spatial statistics: one minus the
/// mean of the luminance-like and structure-like similarity terms.
pub fn dists_proxy_t(bank: &PerceptualBank, x: &Tensor, y: &Tensor) -> Tensor {
    const C: f64 = 1e-6;
    let fx = bank.features(x);
    let fy = bank.features(y);
    let mut total = Tensor::scalar_const(0.0);
    let mut terms = 0.0;
    for (a, b) in fx.iter().zip(fy.iter()) {
        let s = a.shape().to_vec();
        let mu_a = spatial_mean(a);
        let mu_b = spatial_mean(b);
        let ca = a.sub(&mu_a.broadcast_to(&s));
        let cb = b.sub(&mu_b.broadcast_to(&s));
        let var_a = spatial_mean(&ca.square());
        let var_b = spatial_mean(&cb.square());
        let cov = spatial_mean(&ca.mul(&cb));
        let lum = mu_a
            .mul(&mu_b)
            .scale(2.0)
            .add_scalar(C)
            .div(&mu_a.square().add(&mu_b.square()).add_scalar(C));
        let st = cov
            .scale(2.0)
            .add_scalar(C)
            .div(&var_a.add(&var_b).add_scalar(C));
        total = total.add(&lum.add(&st).scale(0.5).mean_all());
        terms += 1.0;
    }
    Tensor::scalar_const(1.0).sub(&total.scale(1.0 / terms))
}

fn batched_const(x: &Arr) -> Tensor {
    let s = x.shape().to_vec();
    assert_eq!(s.len(), 3, "metric input must be [3,H,W]");
    Tensor::constant(x.clone().into_shape(IxDyn(&[1, s[0], s[1], s[2]])).unwrap())
}

pub fn lpips_proxy(x: &Arr, y: &Arr) -> f64 {
    let bank = PerceptualBank::fixed();
    lpips_proxy_t(&bank, &batched_const(x), &batched_const(y)).scalar()
}

pub fn dists_proxy(x: &Arr, y: &Arr) -> f64 {
    let bank = PerceptualBank::fixed();
    dists_proxy_t(&bank, &batched_const(x), &batched_const(y)).scalar()
}

// ----- set-level proxies ---------------------------------------------------

/// Pooled per-cell feature vectors used as the "samples" for KID/FID proxies.
fn descriptor_set(x: &Arr) -> Vec<DVector<f64>> {
    let bank = PerceptualBank::fixed();
    let feats = bank.features(&batched_const(x));
    let f = &feats[0];
    let s = f.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let grid = 4usize.min(h).min(w);
    let (cell_h, cell_w) = (h / grid, w / grid);
    let data = f.data();
    let mut out = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let mut v = DVector::zeros(c);
            for ch in 0..c {
                let mut s = 0.0;
                for y in gy * cell_h..(gy + 1) * cell_h {
                    for xx in gx * cell_w..(gx + 1) * cell_w {
                        s += data[[0, ch, y, xx]];
                    }
                }
                v[ch] = s / (cell_h * cell_w) as f64;
            }
            out.push(v);
        }
    }
    out
}

/// Biased polynomial-kernel MMD^2 between the descriptor sets; exactly zero
/// for identical inputs.
pub fn kid_proxy(x: &Arr, y: &Arr) -> f64 {
    let a = descriptor_set(x);
    let b = descriptor_set(y);
    let d = a[0].len() as f64;
    let k = |p: &DVector<f64>, q: &DVector<f64>| (p.dot(q) / d + 1.0).powi(3);
    let mean_kernel = |s: &[DVector<f64>], t: &[DVector<f64>]| {
        let mut sum = 0.0;
        for p in s {
            for q in t {
                sum += k(p, q);
            }
        }
        sum / (s.len() * t.len()) as f64
    };
    mean_kernel(&a, &a) + mean_kernel(&b, &b) - 2.0 * mean_kernel(&a, &b)
}

/// Frechet distance between Gaussian fits of the descriptor sets.
pub fn fid_proxy(x: &Arr, y: &Arr) -> f64 {
    let a = descriptor_set(x);
    let b = descriptor_set(y);
    let (mu_a, cov_a) = gaussian_fit(&a);
    let (mu_b, cov_b) = gaussian_fit(&b);
    let diff = &mu_a - &mu_b;
    // Tr((cov_a cov_b)^(1/2)) via the symmetric product sqrt(A) B sqrt(A)
    let sa = sym_sqrt(&cov_a);
    let inner = &sa * &cov_b * &sa;
    let tr_sqrt: f64 = nalgebra::SymmetricEigen::new(symmetrize(&inner))
        .eigenvalues
        .iter()
        .map(|&e| e.max(0.0).sqrt())
        .sum();
    let fid = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    fid.max(0.0)
}

fn gaussian_fit(set: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len();
    let d = set[0].len();
    let mut mu = DVector::zeros(d);
    for v in set {
        mu += v;
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let c = v - &mu;
        cov += &c * c.transpose();
    }
    cov /= n as f64;
    // small ridge keeps the matrix square root well-defined
    for i in 0..d {
        cov[(i, i)] += 1e-10;
    }
    (mu, cov)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(symmetrize(m));
    let mut d = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        d[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

// ----- registry ------------------------------------------------------------

pub type MetricFn = Box<dyn Fn(&Arr, &Arr) -> f64>;

/// Name-keyed perceptual metrics. The built-in proxies are always present;
/// official implementations can be registered over the same names.
pub struct MetricRegistry {
    metrics: std::collections::BTreeMap<String, MetricFn>,
}

impl Default for MetricRegistry {
    fn default() -> Self {
        let mut metrics: std::collections::BTreeMap<String, MetricFn> =
            std::collections::BTreeMap::new();
        metrics.insert("lpips_proxy".into(), Box::new(lpips_proxy) as MetricFn);
        metrics.insert("dists_proxy".into(), Box::new(dists_proxy) as MetricFn);
        metrics.insert("kid_proxy".into(), Box::new(kid_proxy) as MetricFn);
        metrics.insert("fid_proxy".into(), Box::new(fid_proxy) as MetricFn);
        MetricRegistry { metrics }
    }
}

impl MetricRegistry {
    pub fn register(&mut self, name: &str, f: MetricFn) {
        self.metrics.insert(name.to_string(), f);
    }

    pub fn eval(&self, name: &str, x: &Arr, y: &Arr) -> Result<f64> {
        self.metrics
            .get(name)
            .map(|f| f(x, y))
            .ok_or_else(|| CodecError::config(format!("unknown metric {name}")))
    }

    pub fn names(&self) -> Vec<String> {
        self.metrics.keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn texture(rng: &mut ChaCha12Rng, h: usize, w: usize) -> Arr {
        // smooth-ish textured content in [0,1]
        let mut a = Arr::from_shape_fn(IxDyn(&[3, h, w]), |_| rng.gen_range(0.0..1.0));
        for _ in 0..2 {
            let b = a.clone();
            for ch in 0..3 {
                for y in 1..h - 1 {
                    for x in 1..w - 1 {
                        a[[ch, y, x]] = 0.5 * b[[ch, y, x]]
                            + 0.125
                                * (b[[ch, y - 1, x]]
                                    + b[[ch, y + 1, x]]
                                    + b[[ch, y, x - 1]]
                                    + b[[ch, y, x + 1]]);
                    }
                }
            }
        }
        a
    }

    #[test]
    fn psnr_formula_and_cap() {
        let x = Arr::zeros(IxDyn(&[3, 8, 8]));
        let y = Arr::from_elem(IxDyn(&[3, 8, 8]), 0.1);
        // MSE = 0.01 -> 20 dB
        assert!((psnr(&x, &y) - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&x, &x), 100.0);
    }

    #[test]
    fn ms_ssim_identity_and_negative() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let x = texture(&mut rng, 64, 64);
        assert!((ms_ssim(&x, &x) - 1.0).abs() < 1e-9);
        let neg = x.mapv(|v| 1.0 - v);
        let s = ms_ssim(&x, &neg);
        assert!(s <= 0.2, "negative-image ms_ssim too high: {s}");
    }

    #[test]
    fn ms_ssim_small_image_reduces_scales() {
        let mut rng = ChaCha12Rng::seed_from_u64(32);
        let x = texture(&mut rng, 16, 16);
        let y = texture(&mut rng, 16, 16);
        let s = ms_ssim(&x, &y);
        assert!(s.is_finite() && s <= 1.0 + 1e-9);
        // identical small images still score 1
        assert!((ms_ssim(&x, &x) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn proxies_zero_on_identity_and_symmetric() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let x = texture(&mut rng, 16, 16);
        let y = texture(&mut rng, 16, 16);
        assert!(lpips_proxy(&x, &x).abs() < 1e-12);
        assert!(dists_proxy(&x, &x).abs() < 1e-9);
        assert!(kid_proxy(&x, &x).abs() < 1e-9);
        assert!(fid_proxy(&x, &x).abs() < 1e-6);
        assert!((lpips_proxy(&x, &y) - lpips_proxy(&y, &x)).abs() < 1e-12);
        assert!((dists_proxy(&x, &y) - dists_proxy(&y, &x)).abs() < 1e-12);
    }

    #[test]
    fn proxies_monotone_in_noise() {
        let mut rng = ChaCha12Rng::seed_from_u64(34);
        let x = texture(&mut rng, 32, 32);
        let noisy = |std: f64, rng: &mut ChaCha12Rng| {
            let normal = Normal::new(0.0, std).unwrap();
            let mut y = x.clone();
            y.mapv_inplace(|v| (v + normal.sample(rng)).clamp(0.0, 1.0));
            y
        };
        let mut l_prev = 0.0;
        let mut d_prev = 0.0;
        for std in [0.01, 0.05, 0.1] {
            let y = noisy(std, &mut rng);
            let l = lpips_proxy(&x, &y);
            let d = dists_proxy(&x, &y);
            assert!(l > l_prev, "lpips not monotone at std {std}");
            assert!(d > d_prev, "dists not monotone at std {std}");
            l_prev = l;
            d_prev = d;
        }
    }

    #[test]
    fn proxy_gradients_match_fd() {
        use dvco_autograd::check::finite_diff_check;
        let mut rng = ChaCha12Rng::seed_from_u64(35);
        let x = Arr::from_shape_fn(IxDyn(&[1, 3, 8, 8]), |_| rng.gen_range(0.1..0.9));
        let y = Arr::from_shape_fn(IxDyn(&[1, 3, 8, 8]), |_| rng.gen_range(0.1..0.9));
        let yc = Tensor::constant(y);
        let bank = PerceptualBank::fixed();
        finite_diff_check(
            std::slice::from_ref(&x),
            |v| lpips_proxy_t(&bank, &v[0], &yc),
            1e-5,
            1e-6,
        );
        finite_diff_check(
            std::slice::from_ref(&x),
            |v| dists_proxy_t(&bank, &v[0], &yc),
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn registry_lookup() {
        let reg = MetricRegistry::default();
        let mut rng = ChaCha12Rng::seed_from_u64(36);
        let x = texture(&mut rng, 16, 16);
        assert!(reg.eval("lpips_proxy", &x, &x).unwrap().abs() < 1e-12);
        assert!(matches!(reg.eval("nope", &x, &x), Err(CodecError::Config(_))));
        assert_eq!(reg.names().len(), 4);
    }

    #[test]
    fn fid_positive_for_different_content() {
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let x = texture(&mut rng, 32, 32);
        let y = texture(&mut rng, 32, 32);
        assert!(fid_proxy(&x, &y) > 0.0);
        assert!(kid_proxy(&x, &y) > 0.0);
    }
}

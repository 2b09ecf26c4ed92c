//! Bjøntegaard deltas between rate–quality curves: average rate difference
//! at equal quality (`bd_rate`) and average quality difference at equal
//! rate (`bd_metric`), both over monotone piecewise-cubic (PCHIP)
//! interpolation with rate handled in log10.

use crate::error::{CodecError, Result};

/// Fritsch–Carlson monotone cubic interpolant with exact piecewise
/// polynomial integration.
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    /// `x` strictly increasing, at least two points.
    pub fn new(x: &[f64], y: &[f64]) -> Result<Pchip> {
        if x.len() != y.len() || x.len() < 2 {
            return Err(CodecError::domain(format!(
                "interpolation needs >= 2 aligned points, got {} and {}",
                x.len(),
                y.len()
            )));
        }
        for w in x.windows(2) {
            if !(w[1] > w[0]) {
                return Err(CodecError::domain(format!(
                    "interpolation abscissae must increase strictly ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(CodecError::domain("interpolation inputs must be finite"));
        }
        let n = x.len();
        let h: Vec<f64> = (0..n - 1).map(|k| x[k + 1] - x[k]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
        } else {
            for k in 1..n - 1 {
                if delta[k - 1] * delta[k] <= 0.0 {
                    d[k] = 0.0;
                } else {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
                }
            }
            d[0] = edge_derivative(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = edge_derivative(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(Pchip { x: x.to_vec(), y: y.to_vec(), d })
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.x[0], *self.x.last().unwrap())
    }

    fn segment(&self, t: f64) -> usize {
        // Clamp to the outermost segments; callers stay inside the domain.
        match self.x.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(self.x.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.x.len() - 2),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = self.segment(t);
        let h = self.x[k + 1] - self.x[k];
        let s = (t - self.x[k]) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        self.y[k] * h00 + h * self.d[k] * h10 + self.y[k + 1] * h01 + h * self.d[k + 1] * h11
    }

    /// Exact integral of the interpolant over [a, b] ⊆ domain.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        let (lo, hi) = self.domain();
        assert!(a >= lo - 1e-12 && b <= hi + 1e-12 && a <= b, "integration outside domain");
        let mut acc = 0.0;
        for k in 0..self.x.len() - 1 {
            let (xl, xr) = (self.x[k], self.x[k + 1]);
            let l = a.max(xl);
            let r = b.min(xr);
            if r <= l {
                continue;
            }
            let h = xr - xl;
            let s0 = (l - xl) / h;
            let s1 = (r - xl) / h;
            let basis = |s: f64| {
                let (s2, s3, s4) = (s * s, s * s * s, s * s * s * s);
                [
                    s4 / 2.0 - s3 + s,
                    s4 / 4.0 - 2.0 * s3 / 3.0 + s2 / 2.0,
                    -s4 / 2.0 + s3,
                    s4 / 4.0 - s3 / 3.0,
                ]
            };
            let b1 = basis(s1);
            let b0 = basis(s0);
            let part = self.y[k] * (b1[0] - b0[0])
                + h * self.d[k] * (b1[1] - b0[1])
                + self.y[k + 1] * (b1[2] - b0[2])
                + h * self.d[k + 1] * (b1[3] - b0[3]);
            acc += h * part;
        }
        acc
    }
}

/// Shape-preserving one-sided endpoint derivative (three-point formula with
/// the usual sign and magnitude clamps).
fn edge_derivative(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let mut d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d * d0 <= 0.0 {
        d = 0.0;
    } else if d0 * d1 <= 0.0 && d.abs() > 3.0 * d0.abs() {
        d = 3.0 * d0;
    }
    d
}

/// One rate–quality curve: `rates` in bits per pixel, strictly increasing;
/// `quality` in the metric's native units.
fn validate_curve(rates: &[f64], quality: &[f64]) -> Result<()> {
    if rates.len() != quality.len() || rates.len() < 2 {
        return Err(CodecError::domain(format!(
            "a curve needs >= 2 aligned points, got {} rates and {} qualities",
            rates.len(),
            quality.len()
        )));
    }
    for w in rates.windows(2) {
        if !(w[1] > w[0]) {
            return Err(CodecError::domain(format!(
                "rates must increase strictly ({} then {})",
                w[0], w[1]
            )));
        }
    }
    if rates.iter().any(|&r| !(r > 0.0)) {
        return Err(CodecError::domain("rates must be positive"));
    }
    if quality.iter().any(|v| !v.is_finite()) {
        return Err(CodecError::domain("quality values must be finite"));
    }
    Ok(())
}

/// Orient quality so higher is always better, then check it rises with rate
/// (required for the quality↔rate inversion inside `bd_rate`).
fn oriented(quality: &[f64], lower_better: bool) -> Result<Vec<f64>> {
    let q: Vec<f64> =
        quality.iter().map(|&v| if lower_better { -v } else { v }).collect();
    for w in q.windows(2) {
        if !(w[1] > w[0]) {
            return Err(CodecError::domain(
                "quality must improve strictly with rate for Bjøntegaard analysis",
            ));
        }
    }
    Ok(q)
}

fn log_rates(rates: &[f64]) -> Vec<f64> {
    rates.iter().map(|r| r.log10()).collect()
}

/// Average rate difference (percent) of `test` against `anchor` at equal
/// quality; negative means `test` spends fewer bits. `None` when the quality
/// ranges do not overlap.
pub fn bd_rate(
    anchor_rates: &[f64],
    anchor_quality: &[f64],
    test_rates: &[f64],
    test_quality: &[f64],
    lower_better: bool,
) -> Result<Option<f64>> {
    validate_curve(anchor_rates, anchor_quality)?;
    validate_curve(test_rates, test_quality)?;
    let qa = oriented(anchor_quality, lower_better)?;
    let qt = oriented(test_quality, lower_better)?;
    let lo = qa[0].max(qt[0]);
    let hi = qa.last().unwrap().min(*qt.last().unwrap());
    if !(hi > lo) {
        return Ok(None);
    }
    let pa = Pchip::new(&qa, &log_rates(anchor_rates))?;
    let pt = Pchip::new(&qt, &log_rates(test_rates))?;
    let avg = (pt.integrate(lo, hi) - pa.integrate(lo, hi)) / (hi - lo);
    Ok(Some((10f64.powf(avg) - 1.0) * 100.0))
}

/// Average quality difference of `test` against `anchor` at equal rate, in
/// the oriented axis (positive always means `test` is better). `None` when
/// the rate ranges do not overlap.
pub fn bd_metric(
    anchor_rates: &[f64],
    anchor_quality: &[f64],
    test_rates: &[f64],
    test_quality: &[f64],
    lower_better: bool,
) -> Result<Option<f64>> {
    validate_curve(anchor_rates, anchor_quality)?;
    validate_curve(test_rates, test_quality)?;
    let qa = oriented(anchor_quality, lower_better)?;
    let qt = oriented(test_quality, lower_better)?;
    let ra = log_rates(anchor_rates);
    let rt = log_rates(test_rates);
    let lo = ra[0].max(rt[0]);
    let hi = ra.last().unwrap().min(*rt.last().unwrap());
    if !(hi > lo) {
        return Ok(None);
    }
    let pa = Pchip::new(&ra, &qa)?;
    let pt = Pchip::new(&rt, &qt)?;
    Ok(Some((pt.integrate(lo, hi) - pa.integrate(lo, hi)) / (hi - lo)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    const RATES: [f64; 4] = [0.05, 0.12, 0.3, 0.8];
    const PSNRS: [f64; 4] = [30.0, 33.5, 36.0, 39.5];

    #[test]
    fn identical_curves_give_zero() {
        let r = bd_rate(&RATES, &PSNRS, &RATES, &PSNRS, false).unwrap().unwrap();
        let m = bd_metric(&RATES, &PSNRS, &RATES, &PSNRS, false).unwrap().unwrap();
        assert!(r.abs() < 1e-12, "bd_rate {r}");
        assert!(m.abs() < 1e-12, "bd_metric {m}");
    }

    #[test]
    fn halved_rates_give_minus_fifty_percent() {
        let half: Vec<f64> = RATES.iter().map(|r| r / 2.0).collect();
        let r = bd_rate(&RATES, &PSNRS, &half, &PSNRS, false).unwrap().unwrap();
        assert!((r + 50.0).abs() < 1e-9, "bd_rate {r}");
    }

    #[test]
    fn disjoint_quality_ranges_are_not_comparable() {
        let high: Vec<f64> = PSNRS.iter().map(|q| q + 20.0).collect();
        assert_eq!(bd_rate(&RATES, &PSNRS, &RATES, &high, false).unwrap(), None);
        // Rates still overlap, so bd_metric has a value.
        assert!(bd_metric(&RATES, &PSNRS, &RATES, &high, false).unwrap().is_some());
    }

    #[test]
    fn lower_better_metrics_are_negated() {
        // LPIPS-style: smaller is better, decreasing with rate.
        let lp_a = [0.40, 0.30, 0.22, 0.15];
        let lp_b = [0.35, 0.25, 0.18, 0.12];
        let m = bd_metric(&RATES, &lp_a, &RATES, &lp_b, true).unwrap().unwrap();
        assert!(m > 0.0, "better (lower) test curve must score positive, got {m}");
        let r = bd_rate(&RATES, &lp_a, &RATES, &lp_b, true).unwrap().unwrap();
        assert!(r < 0.0, "better test curve must need fewer bits, got {r}");
    }

    #[test]
    fn malformed_curves_are_rejected() {
        let bad_rates = [0.3, 0.2, 0.4, 0.5];
        assert!(bd_rate(&bad_rates, &PSNRS, &RATES, &PSNRS, false).is_err());
        assert!(bd_rate(&RATES[..1], &PSNRS[..1], &RATES, &PSNRS, false).is_err());
        let flat_q = [30.0, 30.0, 36.0, 39.5];
        assert!(bd_rate(&RATES, &flat_q, &RATES, &PSNRS, false).is_err());
    }

    #[test]
    fn pchip_passes_through_knots_and_preserves_monotonicity() {
        let x = [0.0, 1.0, 2.5, 3.0, 4.2];
        let y = [1.0, 2.0, 2.1, 5.0, 5.5];
        let p = Pchip::new(&x, &y).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert!((p.eval(*xi) - yi).abs() < 1e-12);
        }
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=1000 {
            let t = x[0] + (x[4] - x[0]) * i as f64 / 1000.0;
            let v = p.eval(t);
            assert!(v >= prev - 1e-12, "not monotone at {t}: {v} < {prev}");
            prev = v;
        }
    }

    #[test]
    fn pchip_integrates_linear_data_exactly() {
        let x = [0.0, 1.0, 3.0, 7.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let p = Pchip::new(&x, &y).unwrap();
        // ∫(2t+1) over [0.5, 6] = t² + t = (36+6) − (0.25+0.5)
        assert!((p.integrate(0.5, 6.0) - (42.0 - 0.75)).abs() < 1e-10);
    }

    #[test]
    fn integral_matches_dense_sampling_of_itself() {
        let mut rng = ChaCha12Rng::seed_from_u64(44);
        for _ in 0..20 {
            let mut x = vec![0.0; 5];
            let mut y = vec![0.0; 5];
            let mut acc = 0.0;
            for i in 0..5 {
                acc += rng.gen_range(0.2..1.0);
                x[i] = acc;
                y[i] = rng.gen_range(-2.0..2.0);
            }
            let p = Pchip::new(&x, &y).unwrap();
            let (lo, hi) = p.domain();
            let n = 40_000;
            let mut trapz = 0.0;
            for i in 0..n {
                let a = lo + (hi - lo) * i as f64 / n as f64;
                let b = lo + (hi - lo) * (i + 1) as f64 / n as f64;
                trapz += 0.5 * (p.eval(a) + p.eval(b)) * (b - a);
            }
            let exact = p.integrate(lo, hi);
            assert!((exact - trapz).abs() < 1e-6, "exact {exact} vs trapezoid {trapz}");
        }
    }
}

//! Randomized property checks over the codec's load-bearing invariants:
//! lossless entropy round trips, padding geometry, container corruption
//! detection, quantizer grid placement, schedule shape, monotone
//! interpolation, and metric symmetry.

use ndarray::IxDyn;
use proptest::prelude::*;

use dvco_autograd::tensor::Arr;

use dvco::bd::Pchip;
use dvco::container::{write_bitstream, read_bitstream, FrameKind, FrameRecord, StreamHeader};
use dvco::diffusion::build_schedule;
use dvco::entropy::{self, CdfStore};
use dvco::metrics;
use dvco::video::{Frame, FrameKind as VideoFrameKind, PAD_MULTIPLE};

fn arr1(v: Vec<f64>) -> Arr {
    let n = v.len();
    Arr::from_shape_vec(IxDyn(&[n]), v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn entropy_round_trip_is_exact(
        pairs in prop::collection::vec((-60i64..=60, 0.02f64..12.0), 1..400)
    ) {
        let (ks, sigmas): (Vec<i64>, Vec<f64>) = pairs.into_iter().unzip();
        let store = CdfStore::new();
        let payload = entropy::encode_residuals(&ks, &sigmas, &store);
        let back = entropy::decode_residuals(&payload, &sigmas, &store).unwrap();
        prop_assert_eq!(back, ks);
    }

    #[test]
    fn padding_round_trips_and_aligns(
        h in 1usize..=130,
        w in 1usize..=130,
        seed in any::<u64>(),
    ) {
        // Cheap deterministic pixel fill; the content itself is irrelevant.
        let mut state = seed | 1;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let v: Vec<f64> = (0..3 * h * w).map(|_| next()).collect();
        let raw = Arr::from_shape_vec(IxDyn(&[3, h, w]), v).unwrap();
        let frame = Frame::from_unpadded(raw.clone(), 0, VideoFrameKind::Intra).unwrap();
        prop_assert_eq!(frame.padded_h() % PAD_MULTIPLE, 0);
        prop_assert_eq!(frame.padded_w() % PAD_MULTIPLE, 0);
        prop_assert!(frame.padded_h() >= h && frame.padded_w() >= w);
        let back = frame.cropped();
        prop_assert_eq!(back.shape(), raw.shape());
        prop_assert!(back.iter().zip(raw.iter()).all(|(a, b)| a == b));
    }

    #[test]
    fn container_corruption_is_detected_or_differs(
        payloads in prop::collection::vec(
            (prop::collection::vec(any::<u8>(), 0..40), prop::collection::vec(any::<u8>(), 0..40)),
            1..5
        ),
        model_id in any::<[u8; 16]>(),
        flip_pick in any::<(usize, u8)>(),
    ) {
        let records: Vec<FrameRecord> = payloads
            .into_iter()
            .enumerate()
            .map(|(i, (motion, latent))| FrameRecord {
                kind: if i == 0 { FrameKind::Intra } else { FrameKind::Predicted },
                motion,
                latent,
            })
            .collect();
        let header = StreamHeader {
            model_id,
            width: 64,
            height: 64,
            intra_period: 32,
            lambda_index: 0,
            frame_count: records.len() as u16,
        };
        let bytes = write_bitstream(&header, &records).unwrap();
        let (pos_pick, mask) = flip_pick;
        let mut bad = bytes.clone();
        let pos = pos_pick % bad.len();
        bad[pos] ^= if mask == 0 { 1 } else { mask };
        let caught = match read_bitstream(&bad) {
            Err(_) => true,
            Ok((h, r)) => !(h == header && r == records),
        };
        prop_assert!(caught, "flip at byte {} went unnoticed", pos);
    }

    #[test]
    fn quantizer_stays_on_the_mean_centered_grid(
        pairs in prop::collection::vec((-40.0f64..40.0, -40.0f64..40.0), 1..200)
    ) {
        let (y, mu): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (y, mu) = (arr1(y), arr1(mu));
        let q = entropy::quantize_infer(&y, &mu);
        for ((&qv, &yv), &mv) in q.iter().zip(y.iter()).zip(mu.iter()) {
            let k = qv - mv;
            prop_assert!((k - k.round()).abs() < 1e-9, "offset {k} not integral");
            prop_assert!((qv - yv).abs() <= 0.5 + 1e-9, "moved {} from input", (qv - yv).abs());
        }
    }

    #[test]
    fn noise_schedule_shape(
        steps in 2usize..=64,
        b0 in 1e-5f64..0.05,
        delta in 0.0f64..0.05,
    ) {
        let b1 = b0 + delta;
        let sched = build_schedule(steps, b0, b1).unwrap();
        let mut prev = 1.0;
        for n in 0..steps {
            let a = sched.alpha(n);
            prop_assert!(a > 0.0 && a < 1.0);
            let ab = sched.alpha_bar(n);
            prop_assert!(ab < prev, "cumulative product must strictly decrease");
            prop_assert!(ab > 0.0);
            prev = ab;
        }
        prop_assert_eq!(sched.alpha_bar(0), sched.alpha(0));
    }

    #[test]
    fn monotone_interpolation_respects_knots_and_order(
        x_gaps in prop::collection::vec(0.05f64..2.0, 3..7),
        y_gaps in prop::collection::vec(0.0f64..3.0, 3..7),
    ) {
        let n = x_gaps.len().min(y_gaps.len());
        let mut xs = vec![0.0];
        let mut ys = vec![1.0];
        for i in 0..n {
            xs.push(xs[i] + x_gaps[i]);
            ys.push(ys[i] + y_gaps[i]);
        }
        let p = Pchip::new(&xs, &ys).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            prop_assert!((p.eval(*x) - y).abs() < 1e-9, "knot ({x}, {y}) missed");
        }
        let (lo, hi) = p.domain();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=400 {
            let t = lo + (hi - lo) * i as f64 / 400.0;
            let v = p.eval(t);
            prop_assert!(v >= ys[0] - 1e-9 && v <= ys[n] + 1e-9, "overshoot at {t}: {v}");
            prop_assert!(v >= prev - 1e-9, "non-monotone at {t}");
            prev = v;
        }
    }

    #[test]
    // ms_ssim needs at least one 11x11 SSIM window, so sizes start at 12.
    fn perceptual_proxies_are_symmetric_and_zero_at_identity(
        seed in any::<u64>(),
        h in 12usize..28,
        w in 12usize..28,
    ) {
        let mut state = seed | 1;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut gen = |n: usize| (0..n).map(|_| next()).collect::<Vec<f64>>();
        let x = Arr::from_shape_vec(IxDyn(&[3, h, w]), gen(3 * h * w)).unwrap();
        let y = Arr::from_shape_vec(IxDyn(&[3, h, w]), gen(3 * h * w)).unwrap();
        prop_assert!(metrics::lpips_proxy(&x, &x).abs() < 1e-12);
        prop_assert!(metrics::dists_proxy(&x, &x).abs() < 1e-12);
        let d_xy = metrics::lpips_proxy(&x, &y);
        let d_yx = metrics::lpips_proxy(&y, &x);
        prop_assert!((d_xy - d_yx).abs() <= 1e-12 * d_xy.abs().max(1.0));
        let s_xy = metrics::dists_proxy(&x, &y);
        let s_yx = metrics::dists_proxy(&y, &x);
        prop_assert!((s_xy - s_yx).abs() <= 1e-12 * s_xy.abs().max(1.0));
        prop_assert_eq!(metrics::psnr(&x, &x), 100.0);
        prop_assert!((metrics::ms_ssim(&x, &x) - 1.0).abs() < 1e-9);
    }
}

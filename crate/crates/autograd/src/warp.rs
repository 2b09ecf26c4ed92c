//! Differentiable backward warping with bilinear sampling.

use crate::tensor::{Arr, Tensor};
use ndarray::IxDyn;

/// Resolve a 1-D sample position into taps `(i0, i1, frac, interior)`.
/// `interior = false` means the position was clamped to the border, where the
/// gradient with respect to the coordinate is zero.
#[inline]
fn sample_taps(src: f64, len: usize) -> (usize, usize, f64, bool) {
    if src <= 0.0 {
        (0, 0, 0.0, false)
    } else if src >= (len - 1) as f64 {
        (len - 1, len - 1, 0.0, false)
    } else {
        let i0 = src.floor() as usize;
        (i0, i0 + 1, src - i0 as f64, true)
    }
}

/// Warp `x` by a dense displacement field.
///
/// `x`: [N, C, H, W], `flow`: [N, 2, H, W] with channel 0 = horizontal (dx)
/// and channel 1 = vertical (dy) displacement in pixels. The output at (y, x)
/// samples the input at (y - dy, x - dx) with bilinear interpolation, so a
/// positive displacement moves content right/down. Sample positions outside
/// the input are clamped to the border.
///
/// Differentiable with respect to both the features and the flow.
pub fn warp_bilinear(x: &Tensor, flow: &Tensor) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 4, "warp input must be NCHW");
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let fs = flow.shape();
    assert_eq!(fs, [n, 2, h, w], "warp flow shape mismatch: {fs:?} vs input {s:?}");

    let mut out = Arr::zeros(IxDyn(&[n, c, h, w]));
    {
        let xs = x.data().as_slice().unwrap();
        let fl = flow.data().as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        for ni in 0..n {
            let fbase = ni * 2 * h * w;
            for ci in 0..c {
                let ibase = (ni * c + ci) * h * w;
                for y in 0..h {
                    for xp in 0..w {
                        let p = y * w + xp;
                        let sx = xp as f64 - fl[fbase + p];
                        let sy = y as f64 - fl[fbase + h * w + p];
                        let (x0, x1, fx, _) = sample_taps(sx, w);
                        let (y0, y1, fy, _) = sample_taps(sy, h);
                        let v00 = xs[ibase + y0 * w + x0];
                        let v01 = xs[ibase + y0 * w + x1];
                        let v10 = xs[ibase + y1 * w + x0];
                        let v11 = xs[ibase + y1 * w + x1];
                        let top = v00 + fx * (v01 - v00);
                        let bot = v10 + fx * (v11 - v10);
                        os[ibase + p] = top + fy * (bot - top);
                    }
                }
            }
        }
    }

    Tensor::from_op(
        out,
        vec![x.clone(), flow.clone()],
        Box::new(move |g, parents| {
            let xs = parents[0].data().as_slice().unwrap();
            let fl = parents[1].data().as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut dx = Arr::zeros(IxDyn(&[n, c, h, w]));
            let mut df = Arr::zeros(IxDyn(&[n, 2, h, w]));
            {
                let ds = dx.as_slice_mut().unwrap();
                let dfs = df.as_slice_mut().unwrap();
                for ni in 0..n {
                    let fbase = ni * 2 * h * w;
                    for ci in 0..c {
                        let ibase = (ni * c + ci) * h * w;
                        for y in 0..h {
                            for xp in 0..w {
                                let p = y * w + xp;
                                let gv = gs[ibase + p];
                                if gv == 0.0 {
                                    continue;
                                }
                                let sx = xp as f64 - fl[fbase + p];
                                let sy = y as f64 - fl[fbase + h * w + p];
                                let (x0, x1, fx, x_int) = sample_taps(sx, w);
                                let (y0, y1, fy, y_int) = sample_taps(sy, h);
                                ds[ibase + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                ds[ibase + y0 * w + x1] += gv * (1.0 - fy) * fx;
                                ds[ibase + y1 * w + x0] += gv * fy * (1.0 - fx);
                                ds[ibase + y1 * w + x1] += gv * fy * fx;
                                let v00 = xs[ibase + y0 * w + x0];
                                let v01 = xs[ibase + y0 * w + x1];
                                let v10 = xs[ibase + y1 * w + x0];
                                let v11 = xs[ibase + y1 * w + x1];
                                // d out / d sample position; d position / d flow = -1
                                if x_int {
                                    let dvdx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
                                    dfs[fbase + p] += -gv * dvdx;
                                }
                                if y_int {
                                    let dvdy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
                                    dfs[fbase + h * w + p] += -gv * dvdy;
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(dx), Some(df)]
        }),
    )
}

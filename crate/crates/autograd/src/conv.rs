//! Convolution, pooling and resampling ops on NCHW tensors.

use crate::tensor::{Arr, Tensor};
use ndarray::IxDyn;

fn dims4(t: &Tensor, what: &str) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "{what}: expected 4-d NCHW tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// 2-D convolution with zero padding.
///
/// `x`: [N, Ci, H, W], `weight`: [Co, Ci, kh, kw], `bias`: [Co].
/// Output spatial size is `(H + 2*pad - kh) / stride + 1`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, w) = dims4(x, "conv2d input");
    let ws = weight.shape();
    assert_eq!(ws.len(), 4, "conv2d weight must be 4-d");
    let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(ci, wci, "conv2d channel mismatch: input {ci}, weight {wci}");
    assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d kernel larger than padded input");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;

    let mut out = conv2d_raw(
        x.data(), weight.data(), n, ci, h, w, co, kh, kw, stride, pad, oh, ow,
    );
    if let Some(b) = bias {
        assert_eq!(b.shape(), [co], "conv2d bias shape");
        let bd = b.data();
        let o = out.as_slice_mut().unwrap();
        for ni in 0..n {
            for c in 0..co {
                let bv = bd[[c]];
                let base = (ni * co + c) * oh * ow;
                for v in &mut o[base..base + oh * ow] {
                    *v += bv;
                }
            }
        }
    }

    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    Tensor::from_op(
        out,
        parents,
        Box::new(move |g, parents| {
            let xd = parents[0].data();
            let wd = parents[1].data();
            let dx = conv2d_backward_input(g, wd, n, ci, h, w, co, kh, kw, stride, pad, oh, ow);
            let dw = conv2d_backward_weight(g, xd, n, ci, h, w, co, kh, kw, stride, pad, oh, ow);
            let mut grads = vec![Some(dx), Some(dw)];
            if has_bias {
                let gs = g.as_slice().unwrap();
                let mut db = Arr::zeros(IxDyn(&[co]));
                for ni in 0..n {
                    for c in 0..co {
                        let base = (ni * co + c) * oh * ow;
                        db[[c]] += gs[base..base + oh * ow].iter().sum::<f64>();
                    }
                }
                grads.push(Some(db));
            }
            grads
        }),
    )
}

#[allow(clippy::too_many_arguments)]
fn conv2d_raw(
    x: &Arr, w: &Arr, n: usize, ci: usize, h: usize, iw: usize, co: usize, kh: usize, kw: usize,
    stride: usize, pad: usize, oh: usize, ow: usize,
) -> Arr {
    let xs = x.as_slice().expect("conv input layout");
    let wsl = w.as_slice().expect("conv weight layout");
    let mut out = Arr::zeros(IxDyn(&[n, co, oh, ow]));
    let os = out.as_slice_mut().unwrap();
    for ni in 0..n {
        for c_out in 0..co {
            let obase = (ni * co + c_out) * oh * ow;
            for c_in in 0..ci {
                let xbase = (ni * ci + c_in) * h * iw;
                let wbase = (c_out * ci + c_in) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wsl[wbase + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        // valid output range for this tap
                        let (oy_lo, oy_hi) = tap_range(oh, h, stride, pad, ky);
                        let (ox_lo, ox_hi) = tap_range(ow, iw, stride, pad, kx);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let orow = obase + oy * ow;
                            let xrow = xbase + iy * iw;
                            if stride == 1 {
                                let ofs = kx as isize - pad as isize;
                                let xr = &xs[(xrow as isize + ox_lo as isize + ofs) as usize
                                    ..(xrow as isize + ox_hi as isize + ofs) as usize];
                                let orr = &mut os[orow + ox_lo..orow + ox_hi];
                                for (o, &xv) in orr.iter_mut().zip(xr) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    os[orow + ox] += wv * xs[xrow + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output index range `[lo, hi)` for which `o*stride + k - pad` lands inside `[0, in_len)`.
fn tap_range(out_len: usize, in_len: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let mut lo = 0usize;
    if k < pad {
        // need o*stride >= pad - k
        lo = (pad - k + stride - 1) / stride;
    }
    // need o*stride + k - pad < in_len  =>  o <= (in_len - 1 + pad - k) / stride
    let top = in_len as isize - 1 + pad as isize - k as isize;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    g: &Arr, w: &Arr, n: usize, ci: usize, h: usize, iw: usize, co: usize, kh: usize, kw: usize,
    stride: usize, pad: usize, oh: usize, ow: usize,
) -> Arr {
    let gs = g.as_slice().expect("grad layout");
    let wsl = w.as_slice().unwrap();
    let mut dx = Arr::zeros(IxDyn(&[n, ci, h, iw]));
    let ds = dx.as_slice_mut().unwrap();
    for ni in 0..n {
        for c_out in 0..co {
            let gbase = (ni * co + c_out) * oh * ow;
            for c_in in 0..ci {
                let dbase = (ni * ci + c_in) * h * iw;
                let wbase = (c_out * ci + c_in) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wsl[wbase + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (oy_lo, oy_hi) = tap_range(oh, h, stride, pad, ky);
                        let (ox_lo, ox_hi) = tap_range(ow, iw, stride, pad, kx);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let grow = gbase + oy * ow;
                            let drow = dbase + iy * iw;
                            if stride == 1 {
                                let ofs = kx as isize - pad as isize;
                                let dr = &mut ds[(drow as isize + ox_lo as isize + ofs) as usize
                                    ..(drow as isize + ox_hi as isize + ofs) as usize];
                                let gr = &gs[grow + ox_lo..grow + ox_hi];
                                for (d, &gv) in dr.iter_mut().zip(gr) {
                                    *d += wv * gv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    ds[drow + ix] += wv * gs[grow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weight(
    g: &Arr, x: &Arr, n: usize, ci: usize, h: usize, iw: usize, co: usize, kh: usize, kw: usize,
    stride: usize, pad: usize, oh: usize, ow: usize,
) -> Arr {
    let gs = g.as_slice().unwrap();
    let xs = x.as_slice().unwrap();
    let mut dw = Arr::zeros(IxDyn(&[co, ci, kh, kw]));
    let dsl = dw.as_slice_mut().unwrap();
    for ni in 0..n {
        for c_out in 0..co {
            let gbase = (ni * co + c_out) * oh * ow;
            for c_in in 0..ci {
                let xbase = (ni * ci + c_in) * h * iw;
                let wbase = (c_out * ci + c_in) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let (oy_lo, oy_hi) = tap_range(oh, h, stride, pad, ky);
                        let (ox_lo, ox_hi) = tap_range(ow, iw, stride, pad, kx);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let grow = gbase + oy * ow;
                            let xrow = xbase + iy * iw;
                            if stride == 1 {
                                let ofs = kx as isize - pad as isize;
                                let gr = &gs[grow + ox_lo..grow + ox_hi];
                                let xr = &xs[(xrow as isize + ox_lo as isize + ofs) as usize
                                    ..(xrow as isize + ox_hi as isize + ofs) as usize];
                                for (&gv, &xv) in gr.iter().zip(xr) {
                                    acc += gv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    acc += gs[grow + ox] * xs[xrow + ix];
                                }
                            }
                        }
                        dsl[wbase + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
    dw
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(x, "upsample");
    let mut out = Arr::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
    {
        let xs = x.data().as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        for nc in 0..n * c {
            let ibase = nc * h * w;
            let obase = nc * 4 * h * w;
            for y in 0..2 * h {
                let irow = ibase + (y / 2) * w;
                let orow = obase + y * 2 * w;
                for xp in 0..2 * w {
                    os[orow + xp] = xs[irow + xp / 2];
                }
            }
        }
    }
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let gsl = g.as_slice().unwrap();
            let mut dx = Arr::zeros(IxDyn(&[n, c, h, w]));
            let ds = dx.as_slice_mut().unwrap();
            for nc in 0..n * c {
                let ibase = nc * h * w;
                let obase = nc * 4 * h * w;
                for y in 0..2 * h {
                    let irow = ibase + (y / 2) * w;
                    let orow = obase + y * 2 * w;
                    for xp in 0..2 * w {
                        ds[irow + xp / 2] += gsl[orow + xp];
                    }
                }
            }
            vec![Some(dx)]
        }),
    )
}

/// 2x2 average pooling (requires even spatial dims).
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(x, "avg_pool2");
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Arr::zeros(IxDyn(&[n, c, oh, ow]));
    {
        let xs = x.data().as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        for nc in 0..n * c {
            let ibase = nc * h * w;
            let obase = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = ibase + 2 * oy * w + 2 * ox;
                    os[obase + oy * ow + ox] = 0.25 * (xs[i] + xs[i + 1] + xs[i + w] + xs[i + w + 1]);
                }
            }
        }
    }
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let gsl = g.as_slice().unwrap();
            let mut dx = Arr::zeros(IxDyn(&[n, c, h, w]));
            let ds = dx.as_slice_mut().unwrap();
            for nc in 0..n * c {
                let ibase = nc * h * w;
                let obase = nc * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = 0.25 * gsl[obase + oy * ow + ox];
                        let i = ibase + 2 * oy * w + 2 * ox;
                        ds[i] += gv;
                        ds[i + 1] += gv;
                        ds[i + w] += gv;
                        ds[i + w + 1] += gv;
                    }
                }
            }
            vec![Some(dx)]
        }),
    )
}

/// Bilinear resize to `(out_h, out_w)`, half-pixel centers, border clamp.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, c, h, w) = dims4(x, "resize");
    // Precompute the 1-D sampling taps once per axis.
    let taps = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
        let ratio = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let src = (o as f64 + 0.5) * ratio - 0.5;
                let src = src.clamp(0.0, (in_len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ty = taps(out_h, h);
    let tx = taps(out_w, w);

    let mut out = Arr::zeros(IxDyn(&[n, c, out_h, out_w]));
    {
        let xs = x.data().as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        for nc in 0..n * c {
            let ibase = nc * h * w;
            let obase = nc * out_h * out_w;
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v00 = xs[ibase + y0 * w + x0];
                    let v01 = xs[ibase + y0 * w + x1];
                    let v10 = xs[ibase + y1 * w + x0];
                    let v11 = xs[ibase + y1 * w + x1];
                    let top = v00 + fx * (v01 - v00);
                    let bot = v10 + fx * (v11 - v10);
                    os[obase + oy * out_w + ox] = top + fy * (bot - top);
                }
            }
        }
    }
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let gsl = g.as_slice().unwrap();
            let mut dx = Arr::zeros(IxDyn(&[n, c, h, w]));
            let ds = dx.as_slice_mut().unwrap();
            for nc in 0..n * c {
                let ibase = nc * h * w;
                let obase = nc * out_h * out_w;
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = gsl[obase + oy * out_w + ox];
                        ds[ibase + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        ds[ibase + y0 * w + x1] += gv * (1.0 - fy) * fx;
                        ds[ibase + y1 * w + x0] += gv * fy * (1.0 - fx);
                        ds[ibase + y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
            vec![Some(dx)]
        }),
    )
}

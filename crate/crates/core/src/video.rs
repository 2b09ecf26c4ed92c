//! Frames, sequences, reflection padding, and video I/O.
//!
//! Pixels are stored as `[3, H, W]` arrays in [0, 1]. Every frame is padded
//! with symmetric reflection to multiples of 64 so the 1/8 latent grid and the
//! four UNet levels align; the original size is kept for cropping on output
//! and for bits-per-pixel accounting.

use crate::error::{CodecError, Result};
use dvco_autograd::tensor::Arr;
use ndarray::IxDyn;
use serde::Deserialize;
use std::path::Path;

pub const PAD_MULTIPLE: usize = 64;

/// Padded dimensions for an `h` x `w` frame.
pub fn padded_size(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE, w.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Intra,
    Predicted,
}

/// One decoded or source frame, padded, with crop metadata.
#[derive(Debug, Clone)]
pub struct Frame {
    /// `[3, H, W]` with H and W multiples of 64.
    pub pixels: Arr,
    pub index: usize,
    pub kind: FrameKind,
    pub orig_h: usize,
    pub orig_w: usize,
}

impl Frame {
    pub fn from_unpadded(pixels: Arr, index: usize, kind: FrameKind) -> Result<Frame> {
        let shape = pixels.shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(CodecError::shape(format!("expected [3,H,W], got {shape:?}")));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(CodecError::format("pixels must be finite and in [0,1]"));
        }
        let (orig_h, orig_w) = (shape[1], shape[2]);
        let padded = pad_reflect(&pixels, PAD_MULTIPLE);
        Ok(Frame { pixels: padded, index, kind, orig_h, orig_w })
    }

    pub fn padded_h(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn padded_w(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// Pixels restricted to the original region.
    pub fn cropped(&self) -> Arr {
        crop(&self.pixels, self.orig_h, self.orig_w)
    }

    /// Batched view `[1, 3, H, W]` for network input.
    pub fn batched(&self) -> Arr {
        let s = self.pixels.shape().to_vec();
        self.pixels
            .clone()
            .into_shape(IxDyn(&[1, s[0], s[1], s[2]]))
            .expect("batch reshape")
    }
}

/// Reflect an out-of-range index back into `[0, n)` (triangle fold).
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Symmetric reflection padding of `[C, H, W]` up to multiples of `m`.
pub fn pad_reflect(x: &Arr, m: usize) -> Arr {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    if ph == h && pw == w {
        return x.clone();
    }
    let top = (ph - h) / 2;
    let left = (pw - w) / 2;
    let mut out = Arr::zeros(IxDyn(&[c, ph, pw]));
    for ch in 0..c {
        for y in 0..ph {
            let sy = reflect_index(y as isize - top as isize, h);
            for xx in 0..pw {
                let sx = reflect_index(xx as isize - left as isize, w);
                out[[ch, y, xx]] = x[[ch, sy, sx]];
            }
        }
    }
    out
}

/// Undo [`pad_reflect`]: take the centered `h x w` region.
pub fn crop(x: &Arr, h: usize, w: usize) -> Arr {
    let s = x.shape();
    let (ph, pw) = (s[1], s[2]);
    let top = (ph - h) / 2;
    let left = (pw - w) / 2;
    x.slice(ndarray::s![.., top..top + h, left..left + w])
        .to_owned()
        .into_dyn()
}

#[derive(Debug, Clone)]
pub struct VideoSequence {
    pub frames: Vec<Frame>,
    pub intra_period: usize,
    pub source_id: String,
}

impl VideoSequence {
    /// Build from raw `[3,H,W]` arrays, assigning intra frames every
    /// `intra_period` positions.
    pub fn from_arrays(arrays: Vec<Arr>, intra_period: usize, source_id: &str) -> Result<Self> {
        if intra_period == 0 {
            return Err(CodecError::config("intra period must be at least 1"));
        }
        let mut frames = Vec::with_capacity(arrays.len());
        for (i, a) in arrays.into_iter().enumerate() {
            let kind = if i % intra_period == 0 { FrameKind::Intra } else { FrameKind::Predicted };
            frames.push(Frame::from_unpadded(a, i, kind)?);
        }
        Ok(VideoSequence { frames, intra_period, source_id: source_id.to_string() })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn orig_size(&self) -> (usize, usize) {
        let f = &self.frames[0];
        (f.orig_h, f.orig_w)
    }
}

// ----- loading -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    PngDir,
    Yuv420,
}

/// Sidecar description for raw YUV420 input, stored as TOML next to the file.
#[derive(Debug, Deserialize)]
pub struct YuvSidecar {
    pub width: usize,
    pub height: usize,
    pub frame_count: Option<usize>,
}

pub fn load_sequence(path: &Path, layout: Layout, intra_period: usize) -> Result<VideoSequence> {
    match layout {
        Layout::PngDir => load_png_dir(path, intra_period),
        Layout::Yuv420 => load_yuv420(path, intra_period),
    }
}

fn load_png_dir(dir: &Path, intra_period: usize) -> Result<VideoSequence> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CodecError::format(format!("no .png files in {}", dir.display())));
    }
    let mut arrays = Vec::with_capacity(paths.len());
    let mut size: Option<(u32, u32)> = None;
    for p in &paths {
        let img = image::open(p)
            .map_err(|e| CodecError::format(format!("{}: {e}", p.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        match size {
            None => size = Some((w, h)),
            Some(s) if s != (w, h) => {
                return Err(CodecError::format(format!(
                    "frame size mismatch: {} is {w}x{h}, expected {}x{}",
                    p.display(),
                    s.0,
                    s.1
                )))
            }
            _ => {}
        }
        let mut a = Arr::zeros(IxDyn(&[3, h as usize, w as usize]));
        for (x, y, px) in img.enumerate_pixels() {
            for ch in 0..3 {
                a[[ch, y as usize, x as usize]] = px.0[ch] as f64 / 255.0;
            }
        }
        arrays.push(a);
    }
    let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    VideoSequence::from_arrays(arrays, intra_period, &id)
}

fn load_yuv420(path: &Path, intra_period: usize) -> Result<VideoSequence> {
    let sidecar_path = path.with_extension("toml");
    let text = std::fs::read_to_string(&sidecar_path).map_err(|e| {
        CodecError::format(format!("missing sidecar {}: {e}", sidecar_path.display()))
    })?;
    let sidecar: YuvSidecar =
        toml::from_str(&text).map_err(|e| CodecError::format(format!("sidecar: {e}")))?;
    let (w, h) = (sidecar.width, sidecar.height);
    if w % 2 != 0 || h % 2 != 0 {
        return Err(CodecError::format("yuv420 dimensions must be even"));
    }
    let data = std::fs::read(path)?;
    let frame_bytes = w * h * 3 / 2;
    let available = data.len() / frame_bytes;
    if data.len() % frame_bytes != 0 {
        return Err(CodecError::format(format!(
            "file length {} is not a multiple of frame size {frame_bytes}",
            data.len()
        )));
    }
    let n = sidecar.frame_count.unwrap_or(available);
    if n > available {
        return Err(CodecError::format(format!(
            "sidecar asks for {n} frames but file holds {available}"
        )));
    }
    let mut arrays = Vec::with_capacity(n);
    for f in 0..n {
        let base = f * frame_bytes;
        let yp = &data[base..base + w * h];
        let up = &data[base + w * h..base + w * h + w * h / 4];
        let vp = &data[base + w * h + w * h / 4..base + frame_bytes];
        let mut a = Arr::zeros(IxDyn(&[3, h, w]));
        for yy in 0..h {
            for xx in 0..w {
                let y = yp[yy * w + xx] as f64;
                let u = up[(yy / 2) * (w / 2) + xx / 2] as f64 - 128.0;
                let v = vp[(yy / 2) * (w / 2) + xx / 2] as f64 - 128.0;
                // full-range BT.601
                let r = y + 1.402 * v;
                let g = y - 0.344_136 * u - 0.714_136 * v;
                let b = y + 1.772 * u;
                a[[0, yy, xx]] = (r / 255.0).clamp(0.0, 1.0);
                a[[1, yy, xx]] = (g / 255.0).clamp(0.0, 1.0);
                a[[2, yy, xx]] = (b / 255.0).clamp(0.0, 1.0);
            }
        }
        arrays.push(a);
    }
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    VideoSequence::from_arrays(arrays, intra_period, &id)
}

/// Write cropped frames as `frame_0000.png`, ... into `dir`.
pub fn write_frames(seq: &VideoSequence, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for frame in &seq.frames {
        let a = frame.cropped();
        let (h, w) = (a.shape()[1], a.shape()[2]);
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    (a[[0, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
                    (a[[1, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
                    (a[[2, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let path = dir.join(format!("frame_{:04}.png", frame.index));
        img.save(&path).map_err(|e| CodecError::format(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_image(rng: &mut ChaCha12Rng, h: usize, w: usize) -> Arr {
        Arr::from_shape_fn(IxDyn(&[3, h, w]), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn pad_shapes_and_roundtrip() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for (h, w) in [(100, 100), (64, 64), (1, 1), (65, 130), (17, 200)] {
            let img = random_image(&mut rng, h, w);
            let padded = pad_reflect(&img, PAD_MULTIPLE);
            assert_eq!(padded.shape()[1] % 64, 0);
            assert_eq!(padded.shape()[2] % 64, 0);
            assert!(padded.shape()[1] >= h && padded.shape()[2] >= w);
            let back = crop(&padded, h, w);
            assert_eq!(back, img, "padding roundtrip failed for {h}x{w}");
        }
        // 100x100 specifically pads to 128x128
        let img = random_image(&mut rng, 100, 100);
        let padded = pad_reflect(&img, PAD_MULTIPLE);
        assert_eq!(&padded.shape()[1..], &[128, 128]);
    }

    #[test]
    fn reflection_is_mirror_at_border() {
        let x = Arr::from_shape_fn(IxDyn(&[1, 4, 100]), |d| d[2] as f64);
        let padded = pad_reflect(&x, 64);
        // left pad is 14; padded[.., 14] is source column 0, padded[.., 13] is column 1
        assert_eq!(padded[[0, 0, 14]], 0.0);
        assert_eq!(padded[[0, 0, 13]], 1.0);
        assert_eq!(padded[[0, 0, 12]], 2.0);
        // right side mirrors too
        assert_eq!(padded[[0, 0, 113]], 99.0);
        assert_eq!(padded[[0, 0, 114]], 98.0);
    }

    #[test]
    fn intra_assignment() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let arrays: Vec<Arr> = (0..96).map(|_| random_image(&mut rng, 16, 16)).collect();
        let seq = VideoSequence::from_arrays(arrays, 32, "t").unwrap();
        for (i, f) in seq.frames.iter().enumerate() {
            let expect = if i % 32 == 0 { FrameKind::Intra } else { FrameKind::Predicted };
            assert_eq!(f.kind, expect, "frame {i}");
        }
        assert_eq!(seq.frames[0].kind, FrameKind::Intra);
        assert_eq!(seq.frames[32].kind, FrameKind::Intra);
        assert_eq!(seq.frames[64].kind, FrameKind::Intra);
    }

    #[test]
    fn single_frame_sequence() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let seq = VideoSequence::from_arrays(vec![random_image(&mut rng, 8, 8)], 32, "s").unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.frames[0].kind, FrameKind::Intra);
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        let mut img = Arr::zeros(IxDyn(&[3, 4, 4]));
        img[[0, 0, 0]] = 1.5;
        assert!(Frame::from_unpadded(img, 0, FrameKind::Intra).is_err());
    }

    #[test]
    fn png_write_load_roundtrip() {
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        let dir = tempfile::tempdir().unwrap();
        // quantize to u8 grid first so the roundtrip is exact
        let mut img = random_image(&mut rng, 30, 45);
        img.mapv_inplace(|v| (v * 255.0).round() / 255.0);
        let seq = VideoSequence::from_arrays(vec![img.clone()], 32, "rt").unwrap();
        write_frames(&seq, dir.path()).unwrap();
        let loaded = load_sequence(dir.path(), Layout::PngDir, 32).unwrap();
        assert_eq!(loaded.len(), 1);
        let back = loaded.frames[0].cropped();
        let maxdiff = back
            .iter()
            .zip(img.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(maxdiff < 1e-12, "png roundtrip maxdiff {maxdiff}");
    }

    #[test]
    fn yuv_loading_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let (w, h) = (8usize, 4usize);
        // two frames of constant gray (y=128, u=v=128 -> rgb ~ 0.502)
        let mut raw = Vec::new();
        for _ in 0..2 {
            raw.extend(std::iter::repeat(128u8).take(w * h * 3 / 2));
        }
        let yuv = dir.path().join("clip.yuv");
        std::fs::write(&yuv, &raw).unwrap();
        std::fs::write(dir.path().join("clip.toml"), format!("width = {w}\nheight = {h}\n"))
            .unwrap();
        let seq = load_sequence(&yuv, Layout::Yuv420, 32).unwrap();
        assert_eq!(seq.len(), 2);
        let px = seq.frames[0].cropped();
        assert!((px[[0, 0, 0]] - 128.0 / 255.0).abs() < 1e-9);
        assert!((px[[1, 2, 3]] - 128.0 / 255.0).abs() < 1e-9);
    }
}

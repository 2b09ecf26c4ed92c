//! Seeded synthetic clips: translating and slowly rotating textured
//! patterns, evaluated analytically so motion is exact at subpixel
//! precision. Training and held-out clips come from disjoint seed streams.

use std::path::{Path, PathBuf};

use ndarray::IxDyn;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use dvco_autograd::tensor::Arr;

use crate::error::{CodecError, Result};
use crate::video::{load_sequence, Layout, VideoSequence};

/// Shape of a generated clip.
#[derive(Debug, Clone, Copy)]
pub struct ClipSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub intra_period: usize,
}

impl Default for ClipSpec {
    fn default() -> Self {
        ClipSpec { frames: 8, height: 64, width: 64, intra_period: 32 }
    }
}

const WAVES: usize = 5;

/// One rigidly moving analytic texture layer: a sum of sinusoids sampled in
/// coordinates that translate by (vx, vy) per frame and rotate by `omega`
/// radians per frame about the patch center.
struct Layer {
    amp: [f64; WAVES],
    fx: [f64; WAVES],
    fy: [f64; WAVES],
    phase: [f64; WAVES],
    chroma: [f64; WAVES],
    vx: f64,
    vy: f64,
    omega: f64,
}

impl Layer {
    fn draw(rng: &mut ChaCha12Rng) -> Layer {
        let mut amp = [0.0; WAVES];
        let mut fx = [0.0; WAVES];
        let mut fy = [0.0; WAVES];
        let mut phase = [0.0; WAVES];
        let mut chroma = [0.0; WAVES];
        let mut total = 0.0;
        for k in 0..WAVES {
            amp[k] = rng.gen_range(0.3..1.0);
            total += amp[k];
            let f = rng.gen_range(0.08..0.5);
            let dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            fx[k] = f * dir.cos();
            fy[k] = f * dir.sin();
            phase[k] = rng.gen_range(0.0..std::f64::consts::TAU);
            chroma[k] = rng.gen_range(0.0..0.8);
        }
        for a in &mut amp {
            *a /= total;
        }
        Layer {
            amp,
            fx,
            fy,
            phase,
            chroma,
            vx: rng.gen_range(-1.5..1.5),
            vy: rng.gen_range(-1.5..1.5),
            omega: rng.gen_range(-0.02..0.02),
        }
    }

    /// Sample channel `c` at pixel (x, y) of frame `t`. The inverse rigid
    /// transform is applied to the query point, so the pattern itself moves
    /// forward by (vx, vy) and omega.
    fn sample(&self, c: usize, x: f64, y: f64, t: f64, cx: f64, cy: f64) -> f64 {
        let th = -self.omega * t;
        let (s, co) = th.sin_cos();
        let (rx, ry) = (x - cx, y - cy);
        let u = co * rx - s * ry + cx - self.vx * t;
        let v = s * rx + co * ry + cy - self.vy * t;
        let mut acc = 0.0;
        for k in 0..WAVES {
            acc += self.amp[k]
                * (self.fx[k] * u + self.fy[k] * v + self.phase[k] + c as f64 * self.chroma[k])
                    .sin();
        }
        acc
    }
}

/// Raw frames of one clip, `[3, H, W]` each, unpadded. Identical
/// (seed, spec) pairs reproduce bit-identical pixel data.
pub fn synthetic_frames(seed: u64, spec: &ClipSpec) -> Vec<Arr> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let a = Layer::draw(&mut rng);
    let b = Layer::draw(&mut rng);
    // Smooth static mask blending the two layers gives spatially varying
    // motion instead of a single global shift.
    let mf = rng.gen_range(0.03..0.12);
    let mdir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (mx, my) = (mf * mdir.cos(), mf * mdir.sin());
    let mp = rng.gen_range(0.0..std::f64::consts::TAU);

    let (cx, cy) = (spec.width as f64 / 2.0, spec.height as f64 / 2.0);
    (0..spec.frames)
        .map(|t| {
            Arr::from_shape_fn(IxDyn(&[3, spec.height, spec.width]), |ix| {
                let (c, y, x) = (ix[0], ix[1] as f64, ix[2] as f64);
                let m = 0.5 + 0.5 * (mx * x + my * y + mp).sin();
                let va = a.sample(c, x, y, t as f64, cx, cy);
                let vb = b.sample(c, x, y, t as f64, cx, cy);
                0.5 + 0.45 * (m * va + (1.0 - m) * vb)
            })
        })
        .collect()
}

/// Generate one clip as a padded sequence.
pub fn synthetic_clip(seed: u64, spec: &ClipSpec) -> Result<VideoSequence> {
    VideoSequence::from_arrays(
        synthetic_frames(seed, spec),
        spec.intra_period,
        &format!("synthetic-{seed}"),
    )
}

fn mix_seed(base: u64, index: usize, domain: u64) -> u64 {
    let mut z = base ^ domain ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Clip `index` of the training stream for `base_seed`.
pub fn training_clip(base_seed: u64, index: usize, spec: &ClipSpec) -> Result<VideoSequence> {
    synthetic_clip(mix_seed(base_seed, index, 0x5452_4149_4E00_0000), spec)
}

/// Raw (unpadded) frames of clip `index` of the training stream.
pub fn training_frames(base_seed: u64, index: usize, spec: &ClipSpec) -> Vec<Arr> {
    synthetic_frames(mix_seed(base_seed, index, 0x5452_4149_4E00_0000), spec)
}

/// Clip `index` of the held-out stream; disjoint from the training stream
/// for every base seed.
pub fn heldout_clip(base_seed: u64, index: usize, spec: &ClipSpec) -> Result<VideoSequence> {
    synthetic_clip(mix_seed(base_seed, index, 0x4845_4C44_4F55_5400), spec)
}

// ----- ingested clips -------------------------------------------------------

/// Clips read from disk: every subdirectory of the root that contains PNG
/// frames is one clip, kept at its native size. Training cuts seeded patches
/// out of these instead of the synthetic stream.
#[derive(Debug)]
pub struct ClipLibrary {
    clips: Vec<Vec<Arr>>,
}

impl ClipLibrary {
    pub fn load(dir: &Path) -> Result<ClipLibrary> {
        let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        let mut clips = Vec::new();
        for sub in subdirs {
            let has_png = std::fs::read_dir(&sub)?
                .filter_map(|e| e.ok())
                .any(|e| e.path().extension().map(|x| x == "png").unwrap_or(false));
            if !has_png {
                continue;
            }
            let seq = load_sequence(&sub, Layout::PngDir, 1)?;
            clips.push(seq.frames.iter().map(|f| f.cropped()).collect());
        }
        if clips.is_empty() {
            return Err(CodecError::config(format!(
                "no clip subdirectories with PNG frames under {}",
                dir.display()
            )));
        }
        Ok(ClipLibrary { clips })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Cut `spec.frames` consecutive frames of a `spec.height x spec.width`
    /// window out of the library, deterministically in `(seed, index)`.
    /// Clips too short or too small for the request are never drawn.
    pub fn sample(&self, seed: u64, index: usize, spec: &ClipSpec) -> Result<Vec<Arr>> {
        let eligible: Vec<usize> = self
            .clips
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                c.len() >= spec.frames
                    && c[0].shape()[1] >= spec.height
                    && c[0].shape()[2] >= spec.width
            })
            .map(|(i, _)| i)
            .collect();
        if eligible.is_empty() {
            return Err(CodecError::config(format!(
                "no ingested clip offers {} frames at {}x{} or larger",
                spec.frames, spec.height, spec.width
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, index, 0x4C49_4252_4152_5900));
        let clip = &self.clips[eligible[rng.gen_range(0..eligible.len())]];
        let (h, w) = (clip[0].shape()[1], clip[0].shape()[2]);
        let t0 = rng.gen_range(0..=clip.len() - spec.frames);
        let top = rng.gen_range(0..=h - spec.height);
        let left = rng.gen_range(0..=w - spec.width);
        Ok((0..spec.frames)
            .map(|k| {
                clip[t0 + k]
                    .slice(ndarray::s![.., top..top + spec.height, left..left + spec.width])
                    .to_owned()
                    .into_dyn()
            })
            .collect())
    }
}

/// Where a training stage draws its frames from: the seeded synthetic stream
/// by default, or patches of an ingested clip directory.
pub enum FrameSource {
    Synthetic { base_seed: u64 },
    Library { lib: ClipLibrary, base_seed: u64 },
}

impl FrameSource {
    pub fn open(base_seed: u64, dataset_dir: Option<&Path>) -> Result<FrameSource> {
        match dataset_dir {
            None => Ok(FrameSource::Synthetic { base_seed }),
            Some(d) => Ok(FrameSource::Library { lib: ClipLibrary::load(d)?, base_seed }),
        }
    }

    /// Raw unpadded frames for training iteration `index`.
    pub fn frames(&self, index: usize, spec: &ClipSpec) -> Result<Vec<Arr>> {
        match self {
            FrameSource::Synthetic { base_seed } => Ok(training_frames(*base_seed, index, spec)),
            FrameSource::Library { lib, base_seed } => lib.sample(*base_seed, index, spec),
        }
    }
}

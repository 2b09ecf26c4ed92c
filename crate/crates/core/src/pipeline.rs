//! Frame-level encode/decode orchestration.
//!
//! The encoder mirrors the decoder exactly: the entropy stage hands back the
//! coded symbols, every frame is reconstructed from those symbols the same
//! way on both sides, and the reference state for the next frame is
//! recomputed from that shared reconstruction. Refinement settings are run
//! options rather than bitstream fields, so encoder and decoder must be
//! driven with the same [`PipelineOptions`] to stay in lockstep.

use ndarray::IxDyn;

use dvco_autograd::tensor::{Arr, Tensor};

use crate::container::{
    self, BitstreamReader, FrameKind as WireKind, FrameRecord, StreamHeader,
};
use crate::context::TemporalContextSet;
use crate::diffusion::{msd_refine, osd_refine, MsdNoise};
use crate::entropy;
use crate::error::{CodecError, Result};
use crate::latent::Latent;
use crate::model::{CodecModel, TrainStage};
use crate::motion::{estimate_motion, MotionMode};
use crate::video::{self, Frame, FrameKind, VideoSequence};

/// How reconstructed latents are refined before pixel decoding.
///
/// Multi-step sampling derives its per-frame noise stream from `seed` and the
/// coded latent payload, so any decoder holding the same bytes regenerates
/// the identical noise regardless of where in the stream decoding started.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineMode {
    /// Use the conditioned reconstruction as-is.
    None,
    /// One denoiser evaluation at timestep `n`.
    OneStep { n: usize },
    /// Ancestral multi-step baseline with `steps` evaluations.
    MultiStep { steps: usize, n_start: usize, seed: u64 },
}

impl Default for RefineMode {
    fn default() -> Self {
        RefineMode::OneStep { n: 0 }
    }
}

/// Run options shared by encoder and decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineOptions {
    pub refine: RefineMode,
    pub tca_enabled: bool,
    pub motion_mode: MotionMode,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            refine: RefineMode::default(),
            tca_enabled: true,
            motion_mode: MotionMode::Learned,
        }
    }
}

/// Reference state carried between frames. Both sides rebuild it from the
/// decoded frame, never from encoder-only data.
#[derive(Debug, Clone)]
pub struct DecoderState {
    /// Previously decoded frame, padded, `[1, 3, H, W]`.
    pub prev_frame: Arr,
    /// Feature buffer recomputed from that frame, `[1, C_F, H, W]`.
    pub prev_feature: Arr,
}

/// Per-frame payload sizes, in bits.
#[derive(Debug, Clone)]
pub struct FrameStats {
    pub index: usize,
    pub kind: FrameKind,
    pub motion_bits: f64,
    pub latent_bits: f64,
}

/// Encoder output: the serialized stream plus the local reconstructions,
/// which are bit-exact with what a decoder will produce.
#[derive(Debug)]
pub struct EncodeResult {
    pub bytes: Vec<u8>,
    pub frames: Vec<Frame>,
    pub stats: Vec<FrameStats>,
    pub bpp: f64,
    pub final_state: DecoderState,
}

/// Decoder output.
#[derive(Debug)]
pub struct DecodeOutcome {
    pub frames: Vec<Frame>,
    pub header: StreamHeader,
    pub final_state: DecoderState,
}

fn batch_flow(v: &Arr) -> Tensor {
    let s = v.shape().to_vec();
    Tensor::constant(v.clone().into_shape(IxDyn(&[1, 2, s[1], s[2]])).unwrap())
}

fn unbatch(x: &Arr) -> Arr {
    let s = x.shape().to_vec();
    x.clone().into_shape(IxDyn(&s[1..])).unwrap()
}

/// Noise tag for multi-step refinement: derived from the coded payload so
/// the draw is identical on both sides and independent of frame position.
fn payload_tag(payload: &[u8]) -> u64 {
    entropy::crc32(payload) as u64
}

/// Apply the configured refinement to a reconstructed latent and return the
/// values to feed the pixel decoder.
fn refine_latent(
    model: &CodecModel,
    y_bar: &Latent,
    c0: &Tensor,
    opts: &PipelineOptions,
    noise_tag: u64,
) -> Result<Tensor> {
    match opts.refine {
        RefineMode::None => Ok(y_bar.values.clone()),
        RefineMode::OneStep { n } => {
            let adapter = if opts.tca_enabled {
                Some(model.tca.forward(&y_bar.values, c0)?)
            } else {
                None
            };
            let refined =
                osd_refine(&y_bar.values, c0, n, &model.unet, adapter.as_ref(), &model.schedule)?;
            Ok(y_bar.refine_with(refined)?.values)
        }
        RefineMode::MultiStep { steps, n_start, seed } => {
            let adapter = if opts.tca_enabled {
                Some(model.tca.forward(&y_bar.values, c0)?)
            } else {
                None
            };
            let refined = msd_refine(
                &y_bar.values,
                c0,
                steps,
                n_start,
                MsdNoise::Seeded(seed ^ noise_tag),
                &model.unet,
                adapter.as_ref(),
                &model.schedule,
            )?;
            Ok(y_bar.refine_with(refined)?.values)
        }
    }
}

fn state_from(model: &CodecModel, x_hat: &Tensor) -> DecoderState {
    let feat = model.feature.forward(x_hat);
    DecoderState { prev_frame: x_hat.data().clone(), prev_feature: feat.data().clone() }
}

fn finish_frame(
    model: &CodecModel,
    x_hat: Tensor,
    index: usize,
    kind: FrameKind,
    orig_h: usize,
    orig_w: usize,
) -> (Frame, DecoderState) {
    let state = state_from(model, &x_hat);
    let frame = Frame { pixels: unbatch(x_hat.data()), index, kind, orig_h, orig_w };
    (frame, state)
}

fn encode_frame(
    model: &CodecModel,
    frame: &Frame,
    state: Option<&DecoderState>,
    opts: &PipelineOptions,
) -> Result<(FrameRecord, Frame, FrameStats, DecoderState)> {
    let xt = Tensor::constant(frame.batched());
    let (ph, pw) = (frame.padded_h(), frame.padded_w());
    match frame.kind {
        FrameKind::Intra => {
            let ctx = TemporalContextSet::zeros(&model.cfg, ph, pw);
            let y = Latent::raw(model.pixel.encode(&xt));
            let (payload, y_bar, bits) = model.coder.compress(&y, &ctx, &model.cdfs)?;
            // Intra frames bypass refinement entirely.
            let x_hat = model.pixel.decode(&y_bar.values);
            let (recon, state) =
                finish_frame(model, x_hat, frame.index, frame.kind, frame.orig_h, frame.orig_w);
            let record = FrameRecord { kind: WireKind::Intra, motion: Vec::new(), latent: payload };
            let stats = FrameStats {
                index: frame.index,
                kind: frame.kind,
                motion_bits: 0.0,
                latent_bits: bits,
            };
            Ok((record, recon, stats, state))
        }
        FrameKind::Predicted => {
            let st = state.ok_or_else(|| {
                CodecError::domain("predicted frame has no decoded reference")
            })?;
            let prev = Tensor::constant(st.prev_frame.clone());
            let v = estimate_motion(&model.flow, &xt, &prev, opts.motion_mode)?;
            let (motion_payload, v_hat, motion_bits) =
                model.motion.compress(&unbatch(v.data()), &model.cdfs)?;
            let feat = Tensor::constant(st.prev_feature.clone());
            let ctx = model.context.extract_contexts(&feat, &batch_flow(&v_hat))?;
            let y = Latent::raw(model.pixel.encode(&xt));
            let (latent_payload, y_bar, latent_bits) =
                model.coder.compress(&y, &ctx, &model.cdfs)?;
            let tag = payload_tag(&latent_payload);
            let values = refine_latent(model, &y_bar, &ctx.c0, opts, tag)?;
            let x_hat = model.pixel.decode(&values);
            let (recon, state) =
                finish_frame(model, x_hat, frame.index, frame.kind, frame.orig_h, frame.orig_w);
            let record = FrameRecord {
                kind: WireKind::Predicted,
                motion: motion_payload,
                latent: latent_payload,
            };
            let stats = FrameStats {
                index: frame.index,
                kind: frame.kind,
                motion_bits,
                latent_bits,
            };
            Ok((record, recon, stats, state))
        }
    }
}

/// Encode a sequence into a serialized stream. Requires a trained model;
/// the header pins the model identity and the target rate point.
pub fn encode_sequence(
    model: &CodecModel,
    seq: &VideoSequence,
    opts: &PipelineOptions,
) -> Result<EncodeResult> {
    if model.stage() == TrainStage::Untrained {
        return Err(CodecError::config(
            "model is untrained; encoding requires a checkpoint trained for the target rate point",
        ));
    }
    if seq.is_empty() {
        return Err(CodecError::config("cannot encode an empty sequence"));
    }
    if seq.len() > u16::MAX as usize {
        return Err(CodecError::config(format!(
            "sequence of {} frames exceeds the stream limit of {}",
            seq.len(),
            u16::MAX
        )));
    }
    let (orig_h, orig_w) = seq.orig_size();
    if orig_h > u16::MAX as usize || orig_w > u16::MAX as usize {
        return Err(CodecError::config(format!(
            "frame size {orig_w}x{orig_h} exceeds the header limit"
        )));
    }
    if seq.intra_period == 0 || seq.intra_period > u8::MAX as usize {
        return Err(CodecError::config(format!(
            "intra period {} outside the representable range 1..=255",
            seq.intra_period
        )));
    }
    if seq.frames[0].kind != FrameKind::Intra {
        return Err(CodecError::config("first frame of a stream must be intra"));
    }

    let mut records = Vec::with_capacity(seq.len());
    let mut frames = Vec::with_capacity(seq.len());
    let mut stats = Vec::with_capacity(seq.len());
    let mut state: Option<DecoderState> = None;
    for frame in &seq.frames {
        let (record, recon, st, next) = encode_frame(model, frame, state.as_ref(), opts)?;
        records.push(record);
        frames.push(recon);
        stats.push(st);
        state = Some(next);
    }

    let header = StreamHeader {
        model_id: model.model_id()?,
        width: orig_w as u16,
        height: orig_h as u16,
        intra_period: seq.intra_period as u8,
        lambda_index: model.lambda_index as u8,
        frame_count: seq.len() as u16,
    };
    let bytes = container::write_bitstream(&header, &records)?;
    let bpp = container::bits_per_pixel(bytes.len(), orig_w, orig_h, seq.len());
    Ok(EncodeResult { bytes, frames, stats, bpp, final_state: state.unwrap() })
}

/// Decode one frame record against the current reference state. Exposed so
/// callers can time individual frame decodes; [`decode_sequence`] is the
/// stream-level driver.
pub fn decode_record(
    model: &CodecModel,
    record: &FrameRecord,
    state: Option<&DecoderState>,
    index: usize,
    orig_h: usize,
    orig_w: usize,
    opts: &PipelineOptions,
) -> Result<(Frame, DecoderState)> {
    let wrap = |e: CodecError| match e {
        CodecError::Decode { .. } => e,
        other => CodecError::decode(index, other.to_string()),
    };
    let (ph, pw) = video::padded_size(orig_h, orig_w);
    match record.kind {
        WireKind::Intra => {
            if !record.motion.is_empty() {
                return Err(CodecError::decode(index, "intra record carries a motion payload"));
            }
            let ctx = TemporalContextSet::zeros(&model.cfg, ph, pw);
            let y_bar =
                model.coder.decompress(&record.latent, &ctx, &model.cdfs).map_err(wrap)?;
            let x_hat = model.pixel.decode(&y_bar.values);
            Ok(finish_frame(model, x_hat, index, FrameKind::Intra, orig_h, orig_w))
        }
        WireKind::Predicted => {
            let st = state.ok_or_else(|| {
                CodecError::decode(index, "predicted frame has no decoded reference")
            })?;
            let v_hat =
                model.motion.decompress(&record.motion, ph, pw, &model.cdfs).map_err(wrap)?;
            let feat = Tensor::constant(st.prev_feature.clone());
            let ctx = model.context.extract_contexts(&feat, &batch_flow(&v_hat)).map_err(wrap)?;
            let y_bar =
                model.coder.decompress(&record.latent, &ctx, &model.cdfs).map_err(wrap)?;
            let tag = payload_tag(&record.latent);
            let values = refine_latent(model, &y_bar, &ctx.c0, opts, tag).map_err(wrap)?;
            let x_hat = model.pixel.decode(&values);
            Ok(finish_frame(model, x_hat, index, FrameKind::Predicted, orig_h, orig_w))
        }
    }
}

/// Decode a serialized stream. The model must match the one named in the
/// header; every failure past the header names the frame it occurred in.
pub fn decode_sequence(
    model: &CodecModel,
    data: &[u8],
    opts: &PipelineOptions,
) -> Result<DecodeOutcome> {
    let mut reader = BitstreamReader::new(data)?;
    let header = reader.header().clone();
    if header.model_id != model.model_id()? {
        return Err(CodecError::config(
            "stream was produced by a different model (identity hash mismatch)",
        ));
    }
    if header.lambda_index as usize != model.lambda_index {
        return Err(CodecError::config(format!(
            "stream targets rate point {} but the model was built for {}",
            header.lambda_index, model.lambda_index
        )));
    }
    if header.frame_count == 0 {
        return Err(CodecError::format("stream contains no frames"));
    }
    let (orig_h, orig_w) = (header.height as usize, header.width as usize);
    let mut frames = Vec::with_capacity(header.frame_count as usize);
    let mut state: Option<DecoderState> = None;
    for i in 0..header.frame_count as usize {
        let record = reader
            .next_record()
            .map_err(|e| CodecError::decode(i, e.to_string()))?;
        let (frame, next) = decode_record(model, &record, state.as_ref(), i, orig_h, orig_w, opts)?;
        frames.push(frame);
        state = Some(next);
    }
    reader.finish()?;
    Ok(DecodeOutcome { frames, header, final_state: state.unwrap() })
}

//! The `DVCO` bitstream container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! header:  magic "DVCO" | version u8 | model_id [16]u8 | width u16 | height u16
//!          | intra_period u8 | lambda_index u8 | frame_count u16 | crc32 u32
//! record:  kind u8 | motion_len u32 | latent_len u32
//!          | motion bytes | latent bytes | crc32 u32
//! ```
//!
//! `width`/`height` are the original (uncropped) dimensions; bits-per-pixel is
//! defined over them. Each record's CRC covers the whole record, so any
//! single-byte corruption is caught and reported with its frame index.

use crate::entropy::crc32;
use crate::error::{CodecError, Result};

pub const MAGIC: [u8; 4] = *b"DVCO";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 16 + 2 + 2 + 1 + 1 + 2 + 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamHeader {
    pub model_id: [u8; 16],
    pub width: u16,
    pub height: u16,
    pub intra_period: u8,
    pub lambda_index: u8,
    pub frame_count: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Intra,
    Predicted,
}

impl FrameKind {
    fn to_u8(self) -> u8 {
        match self {
            FrameKind::Intra => 0,
            FrameKind::Predicted => 1,
        }
    }

    fn from_u8(v: u8) -> Result<FrameKind> {
        match v {
            0 => Ok(FrameKind::Intra),
            1 => Ok(FrameKind::Predicted),
            other => Err(CodecError::format(format!("unknown frame kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRecord {
    pub kind: FrameKind,
    pub motion: Vec<u8>,
    pub latent: Vec<u8>,
}

fn encode_header(h: &StreamHeader) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&h.model_id);
    out.extend_from_slice(&h.width.to_le_bytes());
    out.extend_from_slice(&h.height.to_le_bytes());
    out.push(h.intra_period);
    out.push(h.lambda_index);
    out.extend_from_slice(&h.frame_count.to_le_bytes());
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn write_bitstream(header: &StreamHeader, records: &[FrameRecord]) -> Result<Vec<u8>> {
    if records.len() != header.frame_count as usize {
        return Err(CodecError::format(format!(
            "header says {} frames but {} records given",
            header.frame_count,
            records.len()
        )));
    }
    let mut out = encode_header(header);
    for rec in records {
        let start = out.len();
        out.push(rec.kind.to_u8());
        out.extend_from_slice(&(rec.motion.len() as u32).to_le_bytes());
        out.extend_from_slice(&(rec.latent.len() as u32).to_le_bytes());
        out.extend_from_slice(&rec.motion);
        out.extend_from_slice(&rec.latent);
        let crc = crc32(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    Ok(out)
}

/// Incremental reader; `decode_sequence` uses it so that a corrupt record is
/// reported with its frame index while earlier frames stay decodable.
pub struct BitstreamReader<'a> {
    data: &'a [u8],
    pos: usize,
    header: StreamHeader,
    next_frame: usize,
}

impl<'a> BitstreamReader<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        if data.len() < HEADER_LEN {
            return Err(CodecError::format("stream shorter than header"));
        }
        if data[0..4] != MAGIC {
            return Err(CodecError::format("bad magic"));
        }
        if data[4] != VERSION {
            return Err(CodecError::format(format!(
                "unsupported version {} (expected {VERSION})",
                data[4]
            )));
        }
        let crc_stored = u32::from_le_bytes(data[HEADER_LEN - 4..HEADER_LEN].try_into().unwrap());
        if crc32(&data[..HEADER_LEN - 4]) != crc_stored {
            return Err(CodecError::format("header checksum mismatch"));
        }
        let mut model_id = [0u8; 16];
        model_id.copy_from_slice(&data[5..21]);
        let header = StreamHeader {
            model_id,
            width: u16::from_le_bytes([data[21], data[22]]),
            height: u16::from_le_bytes([data[23], data[24]]),
            intra_period: data[25],
            lambda_index: data[26],
            frame_count: u16::from_le_bytes([data[27], data[28]]),
        };
        Ok(BitstreamReader { data, pos: HEADER_LEN, header, next_frame: 0 })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    pub fn frames_remaining(&self) -> usize {
        self.header.frame_count as usize - self.next_frame
    }

    pub fn next_record(&mut self) -> Result<FrameRecord> {
        let frame = self.next_frame;
        let fail = |reason: &str| CodecError::decode(frame, reason);
        if frame >= self.header.frame_count as usize {
            return Err(fail("no records left"));
        }
        let start = self.pos;
        let rest = &self.data[start..];
        if rest.len() < 9 {
            return Err(fail("truncated record header"));
        }
        let kind = FrameKind::from_u8(rest[0]).map_err(|e| fail(&e.to_string()))?;
        let motion_len = u32::from_le_bytes(rest[1..5].try_into().unwrap()) as usize;
        let latent_len = u32::from_le_bytes(rest[5..9].try_into().unwrap()) as usize;
        let total = 9 + motion_len + latent_len + 4;
        if rest.len() < total {
            return Err(fail("truncated payload"));
        }
        let crc_stored =
            u32::from_le_bytes(rest[total - 4..total].try_into().unwrap());
        if crc32(&rest[..total - 4]) != crc_stored {
            return Err(fail("record checksum mismatch"));
        }
        let motion = rest[9..9 + motion_len].to_vec();
        let latent = rest[9 + motion_len..9 + motion_len + latent_len].to_vec();
        self.pos = start + total;
        self.next_frame += 1;
        Ok(FrameRecord { kind, motion, latent })
    }

    /// After the last record, the stream must end exactly.
    pub fn finish(self) -> Result<()> {
        if self.next_frame != self.header.frame_count as usize {
            return Err(CodecError::format("not all records read"));
        }
        if self.pos != self.data.len() {
            return Err(CodecError::format("trailing bytes after last record"));
        }
        Ok(())
    }
}

/// Strict whole-stream parse.
pub fn read_bitstream(data: &[u8]) -> Result<(StreamHeader, Vec<FrameRecord>)> {
    let mut reader = BitstreamReader::new(data)?;
    let mut records = Vec::with_capacity(reader.frames_remaining());
    while reader.frames_remaining() > 0 {
        records.push(reader.next_record()?);
    }
    let header = reader.header().clone();
    reader.finish()?;
    Ok((header, records))
}

/// Bits per pixel over the original (uncropped) dimensions.
pub fn bits_per_pixel(total_bytes: usize, width: usize, height: usize, frames: usize) -> f64 {
    (total_bytes * 8) as f64 / (frames * width * height) as f64
}

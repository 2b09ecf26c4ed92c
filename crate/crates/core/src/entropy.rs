//! Quantization, Gaussian likelihoods, and exact range coding.
//!
//! ## Symbol model
//! Values are quantized with mean-centered rounding, `round(y - mu) + mu`, so
//! the coded integers are residuals `k = round(y - mu)` modeled by a zero-mean
//! discretized Gaussian: `p(k) = Phi((k+0.5)/sigma) - Phi((k-0.5)/sigma)`.
//! `sigma` is clamped to at least [`SIGMA_MIN`] and interval probabilities are
//! floored at 2^-16, so no symbol ever costs more than 16 bits plus escape
//! overhead.
//!
//! ## Coding tables
//! Scales are binned (rounded up) into [`N_SIGMA_BINS`] log-spaced bins; each
//! bin lazily builds one 16-bit quantized CDF over residuals `-K..=K` with the
//! tails folded into the boundary symbols. Residuals beyond `K` code the
//! boundary symbol and then the excess as order-0 exp-Golomb bypass bits.
//!
//! ## Payload layout
//! `[range bytes][bypass bytes, reversed][crc32]`. The range section is read
//! forward, the bypass section backward from the end; both consume exactly the
//! bytes the encoder wrote, so no inner length prefix is needed. The CRC32
//! trailer (IEEE polynomial) covers everything before it and detects any
//! single-byte corruption.
//!
//! ## Rate accounting
//! Training uses the continuous floored likelihood (differentiable); inference
//! uses the exact coding-table bit cost, so the coded payload length always
//! lies in `[estimate, estimate * 1.02 + 64 bits]` for payloads of nontrivial
//! size (the 2% covers CDF quantization, the 64 bits cover flush + CRC).

use crate::error::{CodecError, Result};
use dvco_autograd::tensor::{Arr, Tensor};
use std::cell::RefCell;
use std::rc::Rc;

pub const SIGMA_MIN: f64 = 0.11;
pub const SIGMA_MAX: f64 = 1.0e5;
pub const N_SIGMA_BINS: usize = 512;
/// Largest residual magnitude kept inside the coding table.
pub const K_MAX: i64 = 128;
const CDF_BITS: u32 = 16;
const CDF_TOTAL: u32 = 1 << CDF_BITS;
const PROB_FLOOR: f64 = 1.0 / CDF_TOTAL as f64;

// ----- CRC32 (IEEE, reflected 0xEDB88320) ----------------------------------

const fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

static CRC_TABLE: [u32; 256] = crc32_table();

pub fn crc32(data: &[u8]) -> u32 {
    let mut c = 0xFFFF_FFFFu32;
    for &b in data {
        c = CRC_TABLE[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

// ----- quantization --------------------------------------------------------

/// Mean-centered hard quantization: `round(y - mu) + mu`.
/// Rust's `round` is half-away-from-zero, so a residual of exactly 0.5
/// quantizes to 1 and -0.5 to -1.
pub fn quantize_infer(y: &Arr, mu: &Arr) -> Arr {
    let mut out = y.clone();
    out.zip_mut_with(mu, |v, &m| *v = (*v - m).round() + m);
    out
}

/// Integer residuals `round(y - mu)` in standard layout order.
pub fn residuals(y: &Arr, mu: &Arr) -> Vec<i64> {
    y.iter().zip(mu.iter()).map(|(&v, &m)| (v - m).round() as i64).collect()
}

/// Training-mode quantization proxy: add uniform noise in [-0.5, 0.5].
/// The noise is drawn outside the graph, so gradients pass straight through.
pub fn quantize_train(y: &Tensor, noise: &Arr) -> Tensor {
    y.add(&Tensor::constant(noise.clone()))
}

/// Straight-through estimator: hard-quantized forward value, identity gradient.
pub fn quantize_ste(y: &Tensor, mu: &Arr) -> Tensor {
    let hard = quantize_infer(y.data(), mu);
    let delta = &hard - y.data();
    y.add(&Tensor::constant(delta))
}

// ----- continuous likelihood (training) ------------------------------------

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Standard normal CDF via erfc (accurate in both tails).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * INV_SQRT2)
}

/// Interval probability of residual `r` under a zero-mean Gaussian (no floor).
pub fn interval_prob(r: f64, sigma: f64) -> f64 {
    let s = sigma.max(SIGMA_MIN);
    normal_cdf((r + 0.5) / s) - normal_cdf((r - 0.5) / s)
}

/// Total coding cost in bits under the floored continuous likelihood.
pub fn likelihood_bits_f64(v: &Arr, mu: &Arr, sigma: &Arr) -> f64 {
    let mut bits = 0.0;
    for ((&x, &m), &s) in v.iter().zip(mu.iter()).zip(sigma.iter()) {
        let p = interval_prob(x - m, s).max(PROB_FLOOR);
        bits -= p.log2();
    }
    bits
}

/// Differentiable total bits: `-sum log2 p` with `sigma` clamped to
/// [`SIGMA_MIN`] and interval probabilities floored at 2^-16.
pub fn likelihood_bits(v: &Tensor, mu: &Tensor, sigma: &Tensor) -> Tensor {
    let s = sigma.clamp_min(SIGMA_MIN);
    let centered = v.sub(mu);
    let hi = centered.add_scalar(0.5).div(&s).scale(INV_SQRT2).erf();
    let lo = centered.add_scalar(-0.5).div(&s).scale(INV_SQRT2).erf();
    let p = hi.sub(&lo).scale(0.5).clamp_min(PROB_FLOOR);
    p.ln().sum_all().scale(-std::f64::consts::LOG2_E)
}

// ----- sigma bins and CDF tables -------------------------------------------

/// Index of the smallest bin scale that is >= sigma (round up).
pub fn sigma_bin_index(sigma: f64) -> usize {
    let s = sigma.clamp(SIGMA_MIN, SIGMA_MAX);
    let ratio = (SIGMA_MAX / SIGMA_MIN).ln();
    let pos = (s / SIGMA_MIN).ln() / ratio * (N_SIGMA_BINS - 1) as f64;
    // Guard against the log mapping landing a hair above the true bin.
    let idx = (pos.ceil() as usize).min(N_SIGMA_BINS - 1);
    if idx > 0 && bin_sigma(idx - 1) >= s {
        idx - 1
    } else {
        idx
    }
}

/// Representative (upper-edge) scale of a bin.
pub fn bin_sigma(idx: usize) -> f64 {
    let t = idx as f64 / (N_SIGMA_BINS - 1) as f64;
    SIGMA_MIN * (SIGMA_MAX / SIGMA_MIN).powf(t)
}

/// Quantized CDF over residuals `-k_max ..= k_max` with folded tails.
pub struct CdfTable {
    pub k_max: i64,
    /// `cdf[j]` for `j in 0..=n_symbols`; `cdf[n] = 2^16`; every freq >= 1.
    pub cdf: Vec<u32>,
}

impl CdfTable {
    fn build(sigma: f64) -> CdfTable {
        let k_max = (((6.0 * sigma).ceil() as i64) + 1).min(K_MAX);
        let n = (2 * k_max + 1) as usize;
        let span = (CDF_TOTAL as usize - n) as f64;
        // Truncated Gaussian renormalized over the support, so a huge sigma
        // degrades gracefully to a uniform table instead of piling the tail
        // mass onto the boundary symbols.
        let lo = normal_cdf((-(k_max as f64) - 0.5) / sigma);
        let hi = normal_cdf((k_max as f64 + 0.5) / sigma);
        let z = hi - lo;
        let mut cdf = Vec::with_capacity(n + 1);
        cdf.push(0);
        for j in 1..n {
            // upper edge of symbol j-1: k = j - 1 - k_max, edge at k + 0.5
            let edge = (j as i64 - 1 - k_max) as f64 + 0.5;
            let c = (normal_cdf(edge / sigma) - lo) / z;
            cdf.push((c * span).floor() as u32 + j as u32);
        }
        cdf.push(CDF_TOTAL);
        CdfTable { k_max, cdf }
    }

    pub fn n_symbols(&self) -> usize {
        self.cdf.len() - 1
    }

    /// Table symbol index for a residual, clamping to the boundary escapes.
    pub fn symbol_index(&self, k: i64) -> usize {
        (k.clamp(-self.k_max, self.k_max) + self.k_max) as usize
    }

    pub fn freq(&self, idx: usize) -> u32 {
        self.cdf[idx + 1] - self.cdf[idx]
    }

    /// Exact cost in bits of coding residual `k` with this table, including
    /// exp-Golomb escape bits for residuals beyond the boundary.
    pub fn bits_for(&self, k: i64) -> f64 {
        let idx = self.symbol_index(k);
        let mut bits = (CDF_TOTAL as f64 / self.freq(idx) as f64).log2();
        let excess = k.unsigned_abs().saturating_sub(self.k_max as u64);
        if k.abs() >= self.k_max {
            bits += exp_golomb_len(excess as u32) as f64;
        }
        bits
    }
}

/// Lazily built cache of one CDF table per sigma bin. Shared read-mostly.
#[derive(Default)]
pub struct CdfStore {
    bins: RefCell<Vec<Option<Rc<CdfTable>>>>,
}

impl CdfStore {
    pub fn new() -> Self {
        CdfStore { bins: RefCell::new(vec![None; N_SIGMA_BINS]) }
    }

    pub fn table(&self, sigma: f64) -> Rc<CdfTable> {
        let idx = sigma_bin_index(sigma);
        let mut bins = self.bins.borrow_mut();
        if bins[idx].is_none() {
            bins[idx] = Some(Rc::new(CdfTable::build(bin_sigma(idx))));
        }
        Rc::clone(bins[idx].as_ref().unwrap())
    }
}

// ----- exp-Golomb ----------------------------------------------------------

/// Order-0 exp-Golomb length in bits for a non-negative value.
pub fn exp_golomb_len(v: u32) -> u32 {
    let m = v as u64 + 1;
    let nbits = 64 - m.leading_zeros();
    2 * nbits - 1
}

struct BitWriter {
    bytes: Vec<u8>,
    cur: u8,
    nbits: u8,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter { bytes: Vec::new(), cur: 0, nbits: 0 }
    }

    fn put_bit(&mut self, bit: bool) {
        self.cur = (self.cur << 1) | bit as u8;
        self.nbits += 1;
        if self.nbits == 8 {
            self.bytes.push(self.cur);
            self.cur = 0;
            self.nbits = 0;
        }
    }

    fn put_exp_golomb(&mut self, v: u32) {
        let m = v as u64 + 1;
        let nbits = 64 - m.leading_zeros();
        for _ in 0..nbits - 1 {
            self.put_bit(false);
        }
        for i in (0..nbits).rev() {
            self.put_bit((m >> i) & 1 == 1);
        }
    }

    /// Final bytes, partial byte padded with zeros in the low bits.
    fn finish(mut self) -> Vec<u8> {
        if self.nbits > 0 {
            self.cur <<= 8 - self.nbits;
            self.bytes.push(self.cur);
        }
        self.bytes
    }
}

/// Reads bits in write order from a section stored reversed at the end of a
/// payload: bytes are walked from the back, bits MSB-first within each byte.
struct BitReader<'a> {
    data: &'a [u8],
    /// Next byte position, counting from the end (0 = last byte).
    byte: usize,
    nbits: u8,
    cur: u8,
}

impl<'a> BitReader<'a> {
    fn new(data: &'a [u8]) -> Self {
        BitReader { data, byte: 0, nbits: 0, cur: 0 }
    }

    fn get_bit(&mut self) -> Result<bool> {
        if self.nbits == 0 {
            if self.byte >= self.data.len() {
                return Err(CodecError::format("bypass section exhausted"));
            }
            self.cur = self.data[self.data.len() - 1 - self.byte];
            self.byte += 1;
            self.nbits = 8;
        }
        let bit = self.cur & 0x80 != 0;
        self.cur <<= 1;
        self.nbits -= 1;
        Ok(bit)
    }

    fn get_exp_golomb(&mut self) -> Result<u32> {
        let mut zeros = 0u32;
        while !self.get_bit()? {
            zeros += 1;
            if zeros > 40 {
                return Err(CodecError::format("malformed exp-Golomb code"));
            }
        }
        let mut m = 1u64;
        for _ in 0..zeros {
            m = (m << 1) | self.get_bit()? as u64;
        }
        Ok((m - 1) as u32)
    }

    fn bytes_consumed(&self) -> usize {
        self.byte
    }
}

// ----- range coder ---------------------------------------------------------

const RC_TOP: u32 = 1 << 24;

struct RangeEncoder {
    low: u64,
    range: u32,
    out: Vec<u8>,
}

impl RangeEncoder {
    fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, out: Vec::new() }
    }

    fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= CDF_TOTAL);
        let r = self.range >> CDF_BITS;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        // carry propagation into already-emitted bytes
        if self.low >= 1 << 32 {
            self.low &= (1 << 32) - 1;
            let mut i = self.out.len();
            loop {
                debug_assert!(i > 0, "carry out of empty buffer");
                i -= 1;
                if self.out[i] == 0xFF {
                    self.out[i] = 0;
                } else {
                    self.out[i] += 1;
                    break;
                }
            }
        }
        while self.range < RC_TOP {
            self.out.push((self.low >> 24) as u8);
            self.low = (self.low << 8) & ((1 << 32) - 1);
            self.range <<= 8;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low = (self.low << 8) & ((1 << 32) - 1);
        }
        self.out
    }
}

struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    fn new(data: &'a [u8]) -> Result<Self> {
        if data.len() < 4 {
            return Err(CodecError::format("range section shorter than flush"));
        }
        let code = u32::from_be_bytes([data[0], data[1], data[2], data[3]]);
        Ok(RangeDecoder { code, range: u32::MAX, data, pos: 4 })
    }

    /// Cumulative-frequency position of the next symbol.
    fn decode_target(&self) -> u32 {
        let r = self.range >> CDF_BITS;
        (self.code / r).min(CDF_TOTAL - 1)
    }

    fn consume(&mut self, cum: u32, freq: u32) -> Result<()> {
        let r = self.range >> CDF_BITS;
        self.code -= r * cum;
        self.range = r * freq;
        while self.range < RC_TOP {
            let b = if self.pos < self.data.len() {
                let b = self.data[self.pos];
                self.pos += 1;
                b
            } else {
                return Err(CodecError::format("range section exhausted"));
            };
            self.code = (self.code << 8) | b as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    fn bytes_consumed(&self) -> usize {
        self.pos
    }
}

// ----- payload coding ------------------------------------------------------

/// Encode residuals under per-symbol scales. Returns the full payload
/// (range section, reversed bypass section, CRC32 trailer).
pub fn encode_residuals(ks: &[i64], sigmas: &[f64], store: &CdfStore) -> Vec<u8> {
    assert_eq!(ks.len(), sigmas.len());
    let mut rc = RangeEncoder::new();
    let mut bypass = BitWriter::new();
    for (&k, &s) in ks.iter().zip(sigmas) {
        let table = store.table(s);
        let idx = table.symbol_index(k);
        rc.encode(table.cdf[idx], table.freq(idx));
        if k.abs() >= table.k_max {
            let excess = k.unsigned_abs() - table.k_max as u64;
            bypass.put_exp_golomb(excess as u32);
        }
    }
    let mut payload = rc.finish();
    let mut bits = bypass.finish();
    bits.reverse();
    payload.extend_from_slice(&bits);
    let crc = crc32(&payload);
    payload.extend_from_slice(&crc.to_le_bytes());
    payload
}

/// Decode `sigmas.len()` residuals from a payload produced by
/// [`encode_residuals`] with the same scales.
pub fn decode_residuals(payload: &[u8], sigmas: &[f64], store: &CdfStore) -> Result<Vec<i64>> {
    if payload.len() < 8 {
        return Err(CodecError::format("payload too short"));
    }
    let (content, trailer) = payload.split_at(payload.len() - 4);
    let stored = u32::from_le_bytes([trailer[0], trailer[1], trailer[2], trailer[3]]);
    if crc32(content) != stored {
        return Err(CodecError::format("payload checksum mismatch"));
    }
    let mut rc = RangeDecoder::new(content)?;
    let mut bypass = BitReader::new(content);
    let mut out = Vec::with_capacity(sigmas.len());
    for &s in sigmas {
        let table = store.table(s);
        let target = rc.decode_target();
        // cdf is strictly increasing (freq >= 1): greatest idx with cdf[idx] <= target
        let idx = match table.cdf.binary_search(&target) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        rc.consume(table.cdf[idx], table.freq(idx))?;
        let mut k = idx as i64 - table.k_max;
        if k.abs() == table.k_max {
            let excess = bypass.get_exp_golomb()? as i64;
            k += excess * k.signum();
        }
        out.push(k);
    }
    if rc.bytes_consumed() + bypass.bytes_consumed() > content.len() {
        return Err(CodecError::format("payload sections overlap"));
    }
    Ok(out)
}

/// Exact bit cost the coding tables assign to these residuals. The actual
/// payload is this plus flush and CRC (64 bits) and sub-1% coder slack.
pub fn table_rate_bits(ks: &[i64], sigmas: &[f64], store: &CdfStore) -> f64 {
    ks.iter()
        .zip(sigmas)
        .map(|(&k, &s)| store.table(s).bits_for(k))
        .sum()
}

/// Convenience wrapper: quantize `y` against `mu`, entropy-code the residuals
/// under `sigma`, and return (payload, reconstruction, coded table bits).
pub fn code_gaussian(y: &Arr, mu: &Arr, sigma: &Arr, store: &CdfStore) -> (Vec<u8>, Arr, f64) {
    let ks = residuals(y, mu);
    let sig: Vec<f64> = sigma.iter().copied().collect();
    let payload = encode_residuals(&ks, &sig, store);
    let mut recon = mu.clone();
    for (r, &k) in recon.iter_mut().zip(ks.iter()) {
        *r += k as f64;
    }
    let bits = table_rate_bits(&ks, &sig, store);
    (payload, recon, bits)
}

/// Decoder-side counterpart of [`code_gaussian`].
pub fn decode_gaussian(payload: &[u8], mu: &Arr, sigma: &Arr, store: &CdfStore) -> Result<Arr> {
    let sig: Vec<f64> = sigma.iter().copied().collect();
    let ks = decode_residuals(payload, &sig, store)?;
    let mut recon = mu.clone();
    for (r, &k) in recon.iter_mut().zip(ks.iter()) {
        *r += k as f64;
    }
    Ok(recon)
}

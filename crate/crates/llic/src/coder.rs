//! Bit-exact entropy coding: a 32-bit carry-less range coder with 16-bit
//! probability precision, quantized Gaussian CDF tables indexed by a fixed
//! 64-entry scale set, and the image bitstream container.
//!
//! Everything past table construction is integer arithmetic, so encoder
//! and decoder agree byte for byte. Out-of-alphabet symbols go through an
//! escape slot followed by a sign bit and the excess magnitude in two raw
//! 16-bit chunks.

use crate::error::{Error, Result};
use crate::math::{erfc, gaussian_bin_mass, Rng, SQRT_2};
use crate::model::{GaussianParams, Model, SIGMA_MAX, SIGMA_MIN};
use crate::nn::{crop, replicate_pad};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
/// Per-side tail mass left outside the coded alphabet: 2^-17.
pub const TAIL_MASS: f64 = 1.0 / (1u64 << 17) as f64;
pub const NUM_SCALES: usize = 64;

const RANGE_TOP: u32 = 1 << 24;
const RANGE_BOT: u32 = 1 << 16;

// ---------------------------------------------------------------------------
// Range coder
// ---------------------------------------------------------------------------

pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Encode a symbol occupying [cum, cum + freq) of the 2^16 total.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= PROB_TOTAL);
        self.range /= PROB_TOTAL;
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) < RANGE_TOP {
                // Top byte settled.
            } else if self.range < RANGE_BOT {
                // Carry-less underflow handling: shrink the range to the
                // current 64K boundary.
                self.range = self.low.wrapping_neg() & (RANGE_BOT - 1);
            } else {
                break;
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    buf: &'a [u8],
    pos: usize,
    low: u32,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            buf,
            pos: 0,
            low: 0,
            range: u32::MAX,
            code: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.buf.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Cumulative frequency of the next symbol. Errors on streams that
    /// decode outside the probability total (corruption).
    pub fn decode_cum(&mut self) -> Result<u32> {
        self.range /= PROB_TOTAL;
        let cum = self.code.wrapping_sub(self.low) / self.range;
        if cum >= PROB_TOTAL {
            return Err(Error::Format(format!(
                "corrupt range-coded stream: cumulative {cum} out of bounds"
            )));
        }
        Ok(cum)
    }

    /// Consume the symbol identified by [cum, cum + freq).
    pub fn decode_advance(&mut self, cum: u32, freq: u32) {
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) < RANGE_TOP {
            } else if self.range < RANGE_BOT {
                self.range = self.low.wrapping_neg() & (RANGE_BOT - 1);
            } else {
                break;
            }
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
    }
}

// ---------------------------------------------------------------------------
// Quantized CDF tables
// ---------------------------------------------------------------------------

/// Quantized CDF over the symbol alphabet [-L, L] (shifted by `offset`)
/// plus a trailing escape slot. Strictly increasing from 0 to 2^16.
#[derive(Clone, Debug)]
pub struct CdfTable {
    pub cdf: Vec<u32>,
    pub l: i64,
    pub offset: i64,
}

impl CdfTable {
    pub fn num_symbols(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn escape_slot(&self) -> usize {
        self.num_symbols() - 1
    }

    /// Table slot of an integer value, or None if it must be escaped.
    pub fn slot_of(&self, v: i64) -> Option<usize> {
        let idx = v - self.offset + self.l;
        if (0..=2 * self.l).contains(&idx) {
            Some(idx as usize)
        } else {
            None
        }
    }

    pub fn value_of(&self, slot: usize) -> i64 {
        slot as i64 - self.l + self.offset
    }

    pub fn freq(&self, slot: usize) -> u32 {
        self.cdf[slot + 1] - self.cdf[slot]
    }

    pub fn cum(&self, slot: usize) -> u32 {
        self.cdf[slot]
    }

    /// Slot containing the cumulative value (binary search).
    pub fn lookup(&self, cum: u32) -> usize {
        let mut lo = 0usize;
        let mut hi = self.num_symbols();
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.cdf[mid] <= cum {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn entropy_bits(&self, slot: usize) -> f64 {
        -((self.freq(slot) as f64) / PROB_TOTAL as f64).log2()
    }
}

/// 64 scales spaced logarithmically over [SIGMA_MIN, SIGMA_MAX], endpoints
/// exact.
pub fn build_scale_table() -> Vec<f64> {
    let lo = SIGMA_MIN.ln();
    let hi = SIGMA_MAX.ln();
    let mut scales: Vec<f64> = (0..NUM_SCALES)
        .map(|i| (lo + (hi - lo) * i as f64 / (NUM_SCALES - 1) as f64).exp())
        .collect();
    scales[0] = SIGMA_MIN;
    scales[NUM_SCALES - 1] = SIGMA_MAX;
    scales
}

/// Index of the smallest scale >= sigma (sigma already clamped).
pub fn scale_index(scales: &[f64], sigma: f64) -> usize {
    debug_assert!(sigma <= scales[scales.len() - 1]);
    scales.partition_point(|&s| s < sigma).min(scales.len() - 1)
}

/// Upper-tail mass of N(mean=frac, sigma) beyond L + 1/2, worst side.
fn tail_beyond(l: i64, frac: f64, sigma: f64) -> f64 {
    let reach = (l as f64 + 0.5 - frac.abs()).max(0.0);
    0.5 * erfc(reach / (sigma * SQRT_2))
}

fn choose_alphabet_bound(frac: f64, sigma: f64) -> i64 {
    let mut l = 0i64;
    while tail_beyond(l, frac, sigma) >= TAIL_MASS {
        l += 1;
    }
    l
}

/// Largest-remainder quantization of a PMF (escape mass last) onto the
/// 2^16 grid with every slot >= 1 quantum. Per-slot error < 1 quantum.
fn quantize_pmf(pmf: &[f64]) -> Vec<u32> {
    let n = pmf.len();
    let mut floor = vec![0u32; n];
    let mut frac = vec![0.0f64; n];
    let mut sum_floor: u64 = 0;
    for i in 0..n {
        let exact = pmf[i].max(0.0) * PROB_TOTAL as f64;
        floor[i] = exact as u32;
        frac[i] = exact - floor[i] as f64;
        sum_floor += floor[i] as u64;
    }
    assert!(
        sum_floor <= PROB_TOTAL as u64,
        "pmf mass exceeds 1 by more than rounding"
    );
    let mut q: Vec<u32> = floor.clone();
    let remaining = (PROB_TOTAL as u64 - sum_floor) as usize;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(a.cmp(&b)));
    let mut topped = vec![false; n];
    for &i in order.iter().take(remaining.min(n)) {
        q[i] += 1;
        topped[i] = true;
    }

    // Every slot needs at least one quantum; reclaim from topped-up donors
    // (their error stays below one quantum after giving the unit back).
    let mut donors: Vec<usize> = order
        .iter()
        .rev()
        .copied()
        .filter(|&i| topped[i] && q[i] >= 2)
        .collect();
    for i in 0..n {
        if q[i] == 0 {
            let donor = donors
                .iter()
                .position(|&d| q[d] >= 2)
                .expect("CDF quantization infeasible: not enough probability mass");
            let d = donors.remove(donor);
            q[d] -= 1;
            q[i] = 1;
        }
    }
    debug_assert_eq!(q.iter().map(|&v| v as u64).sum::<u64>(), PROB_TOTAL as u64);
    q
}

fn cdf_from_freqs(freqs: &[u32], l: i64, offset: i64) -> CdfTable {
    let mut cdf = Vec::with_capacity(freqs.len() + 1);
    let mut acc = 0u32;
    cdf.push(0);
    for &f in freqs {
        acc += f;
        cdf.push(acc);
    }
    assert_eq!(acc, PROB_TOTAL);
    CdfTable { cdf, l, offset }
}

/// Table for zero-mean Gaussian residuals at the given coding scale.
pub fn build_gaussian_cdf(sigma: f64) -> CdfTable {
    let l = choose_alphabet_bound(0.0, sigma);
    let mut pmf = Vec::with_capacity((2 * l + 2) as usize);
    let mut mass = 0.0;
    for v in -l..=l {
        let p = gaussian_bin_mass(v as f64, sigma);
        mass += p;
        pmf.push(p);
    }
    pmf.push((1.0 - mass).max(0.0)); // escape
    cdf_from_freqs(&quantize_pmf(&pmf), l, 0)
}

/// Table for a hyper-latent channel with learned (loc, scale); the symbol
/// alphabet is centered on round(loc).
pub fn build_prior_cdf(loc: f64, scale: f64) -> CdfTable {
    let offset = loc.round() as i64;
    let frac = loc - offset as f64;
    let l = choose_alphabet_bound(frac, scale);
    let mut pmf = Vec::with_capacity((2 * l + 2) as usize);
    let mut mass = 0.0;
    for idx in -l..=l {
        let v = (idx + offset) as f64;
        let p = gaussian_bin_mass(v - loc, scale);
        mass += p;
        pmf.push(p);
    }
    pmf.push((1.0 - mass).max(0.0));
    cdf_from_freqs(&quantize_pmf(&pmf), l, offset)
}

// ---------------------------------------------------------------------------
// Symbol streams with escape fallback
// ---------------------------------------------------------------------------

fn encode_escape(enc: &mut RangeEncoder, table: &CdfTable, v: i64) {
    let slot = table.escape_slot();
    enc.encode(table.cum(slot), table.freq(slot));
    let (sign, excess) = if v > table.offset + table.l {
        (0u32, (v - (table.offset + table.l + 1)) as u64)
    } else {
        (1u32, ((table.offset - table.l - 1) - v) as u64)
    };
    assert!(excess <= u32::MAX as u64, "escape symbol out of 32-bit range");
    enc.encode(sign * 32768, 32768); // one raw sign bit
    enc.encode((excess & 0xFFFF) as u32, 1); // low 16-bit chunk
    enc.encode(((excess >> 16) & 0xFFFF) as u32, 1); // high 16-bit chunk
}

fn decode_escape(dec: &mut RangeDecoder, table: &CdfTable) -> Result<i64> {
    let sign = {
        let cum = dec.decode_cum()?;
        let bit = (cum >= 32768) as u32;
        dec.decode_advance(bit * 32768, 32768);
        bit
    };
    let lo = {
        let cum = dec.decode_cum()?;
        dec.decode_advance(cum, 1);
        cum as u64
    };
    let hi = {
        let cum = dec.decode_cum()?;
        dec.decode_advance(cum, 1);
        cum as u64
    };
    let excess = (hi << 16 | lo) as i64;
    Ok(if sign == 0 {
        table.offset + table.l + 1 + excess
    } else {
        table.offset - table.l - 1 - excess
    })
}

/// Encode one symbol against its table (escaping when out of alphabet).
pub fn encode_symbol(enc: &mut RangeEncoder, table: &CdfTable, v: i64) {
    match table.slot_of(v) {
        Some(slot) => enc.encode(table.cum(slot), table.freq(slot)),
        None => encode_escape(enc, table, v),
    }
}

pub fn decode_symbol(dec: &mut RangeDecoder, table: &CdfTable) -> Result<i64> {
    let cum = dec.decode_cum()?;
    let slot = table.lookup(cum);
    dec.decode_advance(table.cum(slot), table.freq(slot));
    if slot == table.escape_slot() {
        decode_escape(dec, table)
    } else {
        Ok(table.value_of(slot))
    }
}

/// Encode a full stream where `table_of(i)` names each symbol's context.
pub fn encode_stream(symbols: &[i64], table_of: impl Fn(usize) -> usize, tables: &[CdfTable]) -> Vec<u8> {
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        encode_symbol(&mut enc, &tables[table_of(i)], s);
    }
    enc.finish()
}

pub fn decode_stream(
    bytes: &[u8],
    count: usize,
    table_of: impl Fn(usize) -> usize,
    tables: &[CdfTable],
) -> Result<Vec<i64>> {
    let mut dec = RangeDecoder::new(bytes);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        out.push(decode_symbol(&mut dec, &tables[table_of(i)])?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Image bitstream
// ---------------------------------------------------------------------------

pub const MAGIC: &[u8; 4] = b"LLIC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 22;
/// Images pad (replicate) to multiples of 16 with a floor that keeps the
/// latent at least 3x3 for the condition branches.
pub const MIN_PADDED: usize = 48;

/// Self-describing compressed image: 22-byte header, z payload, y payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub lambda_index: u8,
    pub orig_h: u32,
    pub orig_w: u32,
    pub z_payload: Vec<u8>,
    pub y_payload: Vec<u8>,
}

pub fn padded_extent(v: usize) -> usize {
    (v.div_ceil(16) * 16).max(MIN_PADDED)
}

impl Bitstream {
    pub fn padded_h(&self) -> usize {
        padded_extent(self.orig_h as usize)
    }

    pub fn padded_w(&self) -> usize {
        padded_extent(self.orig_w as usize)
    }

    pub fn total_len(&self) -> usize {
        HEADER_LEN + self.z_payload.len() + self.y_payload.len()
    }

    pub fn payload_bits(&self) -> u64 {
        8 * (self.z_payload.len() + self.y_payload.len()) as u64
    }

    pub fn bpp(&self) -> f64 {
        (8 * self.total_len()) as f64 / (self.orig_h as f64 * self.orig_w as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.lambda_index);
        out.extend_from_slice(&self.orig_h.to_le_bytes());
        out.extend_from_slice(&self.orig_w.to_le_bytes());
        out.extend_from_slice(&(self.z_payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.y_payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.z_payload);
        out.extend_from_slice(&self.y_payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format("bitstream shorter than header".into()));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format("bad magic: not an LLIC bitstream".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!(
                "unsupported bitstream version {}",
                bytes[4]
            )));
        }
        let rd32 = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let (orig_h, orig_w) = (rd32(6), rd32(10));
        let (z_len, y_len) = (rd32(14) as usize, rd32(18) as usize);
        if bytes.len() != HEADER_LEN + z_len + y_len {
            return Err(Error::Format(format!(
                "bitstream length {} does not match header ({})",
                bytes.len(),
                HEADER_LEN + z_len + y_len
            )));
        }
        if orig_h == 0 || orig_w == 0 {
            return Err(Error::Format("zero image dimensions in header".into()));
        }
        Ok(Bitstream {
            lambda_index: bytes[5],
            orig_h,
            orig_w,
            z_payload: bytes[HEADER_LEN..HEADER_LEN + z_len].to_vec(),
            y_payload: bytes[HEADER_LEN + z_len..].to_vec(),
        })
    }
}

/// All CDF tables a codec instance needs: the 64 Gaussian residual tables
/// plus one per hyper channel from the factorized prior.
pub struct CodecTables {
    pub scales: Vec<f64>,
    pub gaussian: Vec<CdfTable>,
    pub prior: Vec<CdfTable>,
}

impl CodecTables {
    pub fn new(model: &Model, ps: &ParamStore) -> Self {
        let scales = build_scale_table();
        let gaussian = scales.iter().map(|&s| build_gaussian_cdf(s)).collect();
        let (loc, scale) = model.prior(ps, None);
        let prior = loc
            .data()
            .iter()
            .zip(scale.data().iter())
            .map(|(&l, &s)| build_prior_cdf(l, s))
            .collect();
        CodecTables {
            scales,
            gaussian,
            prior,
        }
    }
}

pub struct EncodeResult {
    pub bitstream: Bitstream,
    /// The dequantized latent the decoder will reconstruct (bitwise).
    pub y_hat: Tensor,
    /// Escape-coded y symbols (diagnostics).
    pub escapes: usize,
}

/// Encode one RGB image (1, 3, h, w) in [0, 1].
pub fn encode_image(
    model: &Model,
    ps: &ParamStore,
    tables: &CodecTables,
    x: &Tensor,
    lambda_index: u8,
) -> Result<EncodeResult> {
    let (n, c, h, w) = x.dims4();
    if n != 1 || c != 3 {
        return Err(Error::Usage(format!(
            "encode expects a single RGB image, got shape ({n},{c},{h},{w})"
        )));
    }
    let (ph, pw) = (padded_extent(h), padded_extent(w));
    let padded = replicate_pad(x, ph, pw);
    let y = model.analysis(ps, &padded);
    let (_, m, ly, lx) = y.dims4();
    let z = model.hyper_analysis(ps, &y);
    let (_, _, zh, zw) = z.dims4();

    // z: round and code with per-channel prior tables.
    let z_syms: Vec<i64> = z.data().iter().map(|&v| v.round() as i64).collect();
    let zplane = zh * zw;
    let z_payload = encode_stream(&z_syms, |i| i / zplane, &tables.prior);

    let z_hat = Tensor::from_vec(
        z.shape().to_vec(),
        z_syms.iter().map(|&v| v as f64).collect(),
    );
    let GaussianParams { mu, sigma } = model.hyper_synthesis_at(ps, &z_hat, ly, lx);

    // y: round the residual against the predicted mean, code with the
    // Gaussian table of the smallest scale >= sigma.
    let mut y_syms = Vec::with_capacity(y.len());
    let mut ctx = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let r = (y.data()[i] - mu.data()[i]).round() as i64;
        y_syms.push(r);
        ctx.push(scale_index(&tables.scales, sigma.data()[i]));
    }
    let escapes = y_syms
        .iter()
        .zip(ctx.iter())
        .filter(|&(&s, &t)| tables.gaussian[t].slot_of(s).is_none())
        .count();
    let y_payload = encode_stream(&y_syms, |i| ctx[i], &tables.gaussian);

    let y_hat = Tensor::from_vec(
        vec![1, m, ly, lx],
        y_syms
            .iter()
            .zip(mu.data().iter())
            .map(|(&s, &m)| s as f64 + m)
            .collect(),
    );

    Ok(EncodeResult {
        bitstream: Bitstream {
            lambda_index,
            orig_h: h as u32,
            orig_w: w as u32,
            z_payload,
            y_payload,
        },
        y_hat,
        escapes,
    })
}

pub struct DecodeResult {
    pub image: Tensor,
    pub y_hat: Tensor,
}

/// Decode a bitstream back to an RGB image of the original dimensions.
pub fn decode_image(
    model: &Model,
    ps: &ParamStore,
    tables: &CodecTables,
    bs: &Bitstream,
) -> Result<DecodeResult> {
    let (h, w) = (bs.orig_h as usize, bs.orig_w as usize);
    let (ph, pw) = (bs.padded_h(), bs.padded_w());
    let (ly, lx) = (ph / 16, pw / 16);
    let (zh, zw) = (ly.div_ceil(4), lx.div_ceil(4));
    let zc = model.config.hyper;
    let m = model.config.m;

    let zplane = zh * zw;
    let z_syms = decode_stream(&bs.z_payload, zc * zplane, |i| i / zplane, &tables.prior)?;
    let z_hat = Tensor::from_vec(
        vec![1, zc, zh, zw],
        z_syms.iter().map(|&v| v as f64).collect(),
    );
    let GaussianParams { mu, sigma } = model.hyper_synthesis_at(ps, &z_hat, ly, lx);

    let count = m * ly * lx;
    let ctx: Vec<usize> = sigma
        .data()
        .iter()
        .map(|&s| scale_index(&tables.scales, s))
        .collect();
    let y_syms = decode_stream(&bs.y_payload, count, |i| ctx[i], &tables.gaussian)?;
    let y_hat = Tensor::from_vec(
        vec![1, m, ly, lx],
        y_syms
            .iter()
            .zip(mu.data().iter())
            .map(|(&s, &m)| s as f64 + m)
            .collect(),
    );

    let xhat_padded = model.synthesis(ps, &y_hat, true);
    let image = crop(&xhat_padded, h, w);
    Ok(DecodeResult { image, y_hat })
}

/// Convenience: deterministic random CDF table for tests and self-checks.
pub fn random_table(rng: &mut Rng, max_l: i64) -> CdfTable {
    let l = 1 + (rng.below(max_l as usize)) as i64;
    let n = (2 * l + 2) as usize;
    let mut pmf: Vec<f64> = (0..n).map(|_| rng.next_f64().max(1e-6)).collect();
    let sum: f64 = pmf.iter().sum();
    for p in pmf.iter_mut() {
        *p /= sum;
    }
    cdf_from_freqs(&quantize_pmf(&pmf), l, 0)
}

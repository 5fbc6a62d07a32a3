//! rANS coder over quantised prior PMFs, and the `.bgv` container.
//!
//! Coder: 32-bit state, byte-wise renormalisation, 16-bit frequencies.
//! Symbols are pushed in decoding order; the encoder replays them in reverse
//! so the decoder reads forwards.
//!
//! Container layout (little endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "BGVC"
//!      4     1  version (1)
//!      5     4  lambda, IEEE-754 f32
//!      9     2  width, u16
//!     11     2  height, u16
//!     13     *  rANS payload
//! ```

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::latent::{pmf_table, ALPHABET, SIGMA_MIN, SYMBOL_MAX};

pub const PROB_BITS: u32 = 16;
pub const PROB_SCALE: u32 = 1 << PROB_BITS;
const RANS_L: u32 = 1 << 23;
// Buckets at least this large absorb the minimum-frequency excess. The
// largest bucket always qualifies since 65536 / 129 > 256.
const BIG_BUCKET: i64 = 256;

pub const MAGIC: [u8; 4] = *b"BGVC";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 13;

/// Cumulative 16-bit frequencies for the symbols `-SYMBOL_MAX..=SYMBOL_MAX`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodingTable {
    cdf: Vec<u32>,
}

impl CodingTable {
    /// Quantises a PMF over the alphabet (index `i` is symbol
    /// `i - SYMBOL_MAX`). Every symbol keeps frequency at least 1 and the
    /// frequencies sum to `PROB_SCALE`.
    pub fn from_pmf(pmf: &[f64]) -> Result<Self> {
        if pmf.len() != ALPHABET {
            return Err(Error::Coding(format!(
                "PMF has {} entries, alphabet has {ALPHABET}",
                pmf.len()
            )));
        }
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Coding("PMF entries must be finite and non-negative".into()));
        }
        let total: f64 = pmf.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Coding("PMF has no mass".into()));
        }
        let scaled: Vec<f64> = pmf.iter().map(|p| p / total * PROB_SCALE as f64).collect();
        let mut freq: Vec<i64> = scaled.iter().map(|s| (s.floor() as i64).max(1)).collect();
        let excess: i64 = freq.iter().sum::<i64>() - PROB_SCALE as i64;
        if excess < 0 {
            // Hand out the deficit by largest fractional part.
            let mut order: Vec<usize> = (0..ALPHABET).collect();
            order.sort_by(|&a, &b| {
                let fa = scaled[a] - scaled[a].floor();
                let fb = scaled[b] - scaled[b].floor();
                fb.total_cmp(&fa).then(a.cmp(&b))
            });
            for &i in order.iter().cycle().take((-excess) as usize) {
                freq[i] += 1;
            }
        }
        if excess > 0 {
            // Counts forced up to 1 are paid back one at a time, round-robin
            // over the large buckets, so no single symbol absorbs the whole
            // excess. Mirrored symbols sit next to each other in this order,
            // which keeps symmetry to within one count.
            let mut order: Vec<usize> = (0..ALPHABET).filter(|&i| freq[i] >= BIG_BUCKET).collect();
            order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
            for &i in order.iter().cycle().take(excess as usize) {
                freq[i] -= 1;
            }
        }
        let mut cdf = Vec::with_capacity(ALPHABET + 1);
        let mut acc = 0u32;
        cdf.push(0);
        for f in freq {
            acc += f as u32;
            cdf.push(acc);
        }
        debug_assert_eq!(acc, PROB_SCALE);
        Ok(Self { cdf })
    }

    /// Table for the discretised Gaussian with scale `sigma_hat`.
    pub fn for_sigma(sigma_hat: f64) -> Result<Self> {
        if !(sigma_hat >= SIGMA_MIN * (1.0 - 1e-6)) || !sigma_hat.is_finite() {
            return Err(Error::Domain(format!(
                "coding tables need sigma >= {SIGMA_MIN}, got {sigma_hat}"
            )));
        }
        Self::from_pmf(&pmf_table(sigma_hat))
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    /// Frequency of symbol `n`.
    pub fn frequency(&self, n: i64) -> Result<u32> {
        let i = index_of(n)?;
        Ok(self.cdf[i + 1] - self.cdf[i])
    }

    fn interval(&self, n: i64) -> Result<(u32, u32)> {
        let i = index_of(n)?;
        Ok((self.cdf[i], self.cdf[i + 1] - self.cdf[i]))
    }

    fn lookup(&self, slot: u32) -> usize {
        // Largest i with cdf[i] <= slot.
        self.cdf.partition_point(|&c| c <= slot) - 1
    }
}

fn index_of(n: i64) -> Result<usize> {
    if n.abs() > SYMBOL_MAX {
        return Err(Error::Coding(format!(
            "symbol {n} outside [-{SYMBOL_MAX}, {SYMBOL_MAX}]"
        )));
    }
    Ok((n + SYMBOL_MAX) as usize)
}

/// Memoises tables by the exact bit pattern of the scale.
#[derive(Debug, Default)]
pub struct TableCache {
    tables: HashMap<u64, CodingTable>,
}

impl TableCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, sigma_hat: f64) -> Result<&CodingTable> {
        use std::collections::hash_map::Entry;
        match self.tables.entry(sigma_hat.to_bits()) {
            Entry::Occupied(e) => Ok(e.into_mut()),
            Entry::Vacant(e) => Ok(e.insert(CodingTable::for_sigma(sigma_hat)?)),
        }
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }
}

/// Collects symbols in decoding order and emits the payload on `finish`.
#[derive(Debug, Default)]
pub struct RansEncoder {
    pending: Vec<(u32, u32)>,
}

impl RansEncoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, symbol: i64, table: &CodingTable) -> Result<()> {
        self.pending.push(table.interval(symbol)?);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn finish(self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pending.len() / 4 + 4);
        let mut x = RANS_L;
        for &(start, freq) in self.pending.iter().rev() {
            let x_max = ((RANS_L >> PROB_BITS) << 8) * freq;
            while x >= x_max {
                out.push(x as u8);
                x >>= 8;
            }
            x = ((x / freq) << PROB_BITS) + (x % freq) + start;
        }
        for shift in [0, 8, 16, 24] {
            out.push((x >> shift) as u8);
        }
        out.reverse();
        out
    }
}

/// Incremental decoder over one payload.
#[derive(Debug)]
pub struct RansDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    state: u32,
}

impl<'a> RansDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        if data.len() < 4 {
            return Err(Error::Decode(format!(
                "payload of {} bytes is shorter than the coder state",
                data.len()
            )));
        }
        let state = u32::from_be_bytes([data[0], data[1], data[2], data[3]]);
        Ok(Self { data, pos: 4, state })
    }

    pub fn decode(&mut self, table: &CodingTable) -> Result<i64> {
        let slot = self.state & (PROB_SCALE - 1);
        let i = table.lookup(slot);
        let start = table.cdf[i];
        let freq = table.cdf[i + 1] - start;
        self.state = freq * (self.state >> PROB_BITS) + slot - start;
        while self.state < RANS_L {
            let byte = *self
                .data
                .get(self.pos)
                .ok_or_else(|| Error::Decode("payload ended mid-stream".into()))?;
            self.state = (self.state << 8) | byte as u32;
            self.pos += 1;
        }
        Ok(i as i64 - SYMBOL_MAX)
    }

    /// Checks that the stream was consumed exactly. A wrong table set almost
    /// always leaves a different final state or unread bytes.
    pub fn finish(self) -> Result<()> {
        if self.state != RANS_L || self.pos != self.data.len() {
            return Err(Error::Decode(format!(
                "stream did not terminate cleanly ({} of {} bytes read)",
                self.pos,
                self.data.len()
            )));
        }
        Ok(())
    }
}

pub fn encode_symbols(symbols: &[i64], tables: &[&CodingTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::Coding(format!(
            "{} symbols but {} tables",
            symbols.len(),
            tables.len()
        )));
    }
    let mut enc = RansEncoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.push(s, t)?;
    }
    Ok(enc.finish())
}

pub fn decode_symbols(payload: &[u8], tables: &[&CodingTable]) -> Result<Vec<i64>> {
    let mut dec = RansDecoder::new(payload)?;
    let out = tables
        .iter()
        .map(|t| dec.decode(t))
        .collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}

/// A parsed `.bgv` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub lambda: f32,
    pub width: u16,
    pub height: u16,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&self.lambda.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "{} bytes is shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {}", bytes[4])));
        }
        let lambda = f32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
        let width = u16::from_le_bytes([bytes[9], bytes[10]]);
        let height = u16::from_le_bytes([bytes[11], bytes[12]]);
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Format(format!("invalid lambda {lambda}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Format(format!("invalid image size {width}x{height}")));
        }
        Ok(Self {
            lambda,
            width,
            height,
            payload: bytes[HEADER_LEN..].to_vec(),
        })
    }

    pub fn payload_bits(&self) -> usize {
        self.payload.len() * 8
    }

    /// Payload bits per pixel of the original image.
    pub fn bpp(&self) -> f64 {
        self.payload_bits() as f64 / (self.width as f64 * self.height as f64)
    }
}

//! Uniform scalar quantization, canonical Huffman coding, and the
//! shortest-prefix encoding of basis-index sets.
//!
//! Everything here is losslessly invertible on its own domain: bin indices
//! round-trip through Huffman exactly, index sets round-trip through the
//! prefix code exactly, and dequantization maps every bin to its center so
//! the reconstruction never drifts more than half a bin from the input.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::bits::{BitReader, BitWriter, BitsError};

/// Bins outside this range escape to a raw float.
pub const MAX_BIN: i64 = i32::MAX as i64;

#[derive(Debug, Error, PartialEq)]
pub enum EntropyError {
    #[error("bin size must be positive and finite, got {0}")]
    BadBinSize(f64),
    #[error("cannot build a Huffman table over an empty alphabet")]
    EmptyAlphabet,
    #[error("Huffman code length {0} exceeds 64 bits")]
    CodeTooLong(u32),
    #[error("Huffman table is not a valid prefix code")]
    BadTable,
    #[error("bitstream does not decode to a known symbol")]
    BadCode,
    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: u32, dim: u32 },
    #[error("index prefix of length {0} does not end in a set bit")]
    DanglingPrefix(u32),
    #[error(transparent)]
    Bits(#[from] BitsError),
}

/// Uniform scalar quantizer with bin width `d`; values are represented by
/// their bin center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quantizer {
    bin_size: f64,
}

/// A coded scalar: either a bin index or an escaped raw float for values
/// whose bin index would not fit the archive's index width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum QuantizedValue {
    Bin(i64),
    Raw(f32),
}

impl Quantizer {
    pub fn new(bin_size: f64) -> Result<Self, EntropyError> {
        if !(bin_size.is_finite() && bin_size > 0.0) {
            return Err(EntropyError::BadBinSize(bin_size));
        }
        Ok(Quantizer { bin_size })
    }

    pub fn bin_size(&self) -> f64 {
        self.bin_size
    }

    /// Bin index of `v`: floor(v/d), nudged by at most one bin when the
    /// floating-point division rounds across a bin boundary, so that the
    /// reconstruction error never exceeds d/2.
    pub fn quantize(&self, v: f64) -> i64 {
        let ratio = v / self.bin_size;
        let mut best = if ratio.is_finite() {
            ratio.floor() as i64 // saturating cast
        } else if ratio > 0.0 {
            i64::MAX
        } else {
            i64::MIN
        };
        let err = |b: i64| (v - self.dequantize(b)).abs();
        for cand in [best.saturating_sub(1), best.saturating_add(1)] {
            if err(cand) < err(best) {
                best = cand;
            }
        }
        best
    }

    /// Center of `bin`: (bin + 0.5) * d.
    pub fn dequantize(&self, bin: i64) -> f64 {
        (bin as f64 + 0.5) * self.bin_size
    }

    /// Quantize with the escape rule applied.
    pub fn code(&self, v: f64) -> QuantizedValue {
        let bin = self.quantize(v);
        if bin.abs() > MAX_BIN {
            QuantizedValue::Raw(v as f32)
        } else {
            QuantizedValue::Bin(bin)
        }
    }

    /// Reconstructed value of a coded scalar.
    pub fn decode(&self, value: QuantizedValue) -> f64 {
        match value {
            QuantizedValue::Bin(bin) => self.dequantize(bin),
            QuantizedValue::Raw(raw) => raw as f64,
        }
    }
}

/// Symbols of the entropy-coded streams: bin indices plus one escape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Symbol {
    Bin(i64),
    Escape,
}

impl QuantizedValue {
    pub fn symbol(&self) -> Symbol {
        match self {
            QuantizedValue::Bin(b) => Symbol::Bin(*b),
            QuantizedValue::Raw(_) => Symbol::Escape,
        }
    }
}

/// Canonical Huffman table.
///
/// Only code lengths are stored; codes are assigned canonically by
/// (length, symbol) order, so a table serializes to the entry list alone.
#[derive(Clone, Debug)]
pub struct HuffmanTable {
    /// (symbol, code length), sorted by (length, symbol).
    entries: Vec<(Symbol, u8)>,
    /// Canonical code of entries[i], aligned to the low bits.
    codes: Vec<u64>,
    /// Entry index per symbol, sorted by symbol, for encoding.
    by_symbol: Vec<(Symbol, u32)>,
    /// Per code length: (first canonical code, first entry index, count).
    levels: Vec<(u64, u32, u32)>,
    max_len: u8,
}

impl PartialEq for HuffmanTable {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl HuffmanTable {
    /// Build from symbol frequencies. Zero-frequency entries are ignored;
    /// a single-symbol alphabet gets one 1-bit code.
    pub fn build(freqs: &BTreeMap<Symbol, u64>) -> Result<Self, EntropyError> {
        let alive: Vec<(Symbol, u64)> = freqs
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(&s, &n)| (s, n))
            .collect();
        if alive.is_empty() {
            return Err(EntropyError::EmptyAlphabet);
        }
        let lengths: Vec<(Symbol, u8)> = if alive.len() == 1 {
            vec![(alive[0].0, 1)]
        } else {
            huffman_lengths(&alive)?
        };
        Self::from_lengths(lengths)
    }

    /// Assemble from explicit code lengths (the serialized form).
    pub fn from_lengths(mut entries: Vec<(Symbol, u8)>) -> Result<Self, EntropyError> {
        if entries.is_empty() {
            return Err(EntropyError::EmptyAlphabet);
        }
        entries.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
        // Kraft sum must not exceed one, lengths must be in 1..=64, and
        // symbols must be distinct.
        let mut kraft = 0u128;
        for window in entries.windows(2) {
            if window[0].0 == window[1].0 {
                return Err(EntropyError::BadTable);
            }
        }
        for &(_, len) in &entries {
            if len == 0 || len > 64 {
                return Err(EntropyError::BadTable);
            }
            kraft += 1u128 << (64 - len as u32);
        }
        if kraft > 1u128 << 64 {
            return Err(EntropyError::BadTable);
        }
        let mut codes = Vec::with_capacity(entries.len());
        let mut code = 0u64;
        let mut prev_len = 0u8;
        for &(_, len) in &entries {
            if prev_len != 0 {
                code = (code + 1) << (len - prev_len);
            }
            codes.push(code);
            prev_len = len;
        }
        let max_len = entries.iter().map(|&(_, l)| l).max().unwrap_or(0);
        let mut levels = vec![(0u64, 0u32, 0u32); max_len as usize + 1];
        for (i, &(_, len)) in entries.iter().enumerate() {
            let level = &mut levels[len as usize];
            if level.2 == 0 {
                *level = (codes[i], i as u32, 1);
            } else {
                level.2 += 1;
            }
        }
        let mut by_symbol: Vec<(Symbol, u32)> = entries
            .iter()
            .enumerate()
            .map(|(i, &(s, _))| (s, i as u32))
            .collect();
        by_symbol.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(HuffmanTable {
            entries,
            codes,
            by_symbol,
            levels,
            max_len,
        })
    }

    pub fn entries(&self) -> &[(Symbol, u8)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn code_len(&self, symbol: Symbol) -> Option<u8> {
        self.entries
            .iter()
            .find(|(s, _)| *s == symbol)
            .map(|&(_, len)| len)
    }

    fn lookup(&self, symbol: Symbol) -> Result<(u64, u8), EntropyError> {
        let i = self
            .by_symbol
            .binary_search_by(|(s, _)| s.cmp(&symbol))
            .map_err(|_| EntropyError::BadCode)?;
        let entry = self.by_symbol[i].1 as usize;
        Ok((self.codes[entry], self.entries[entry].1))
    }

    pub fn encode_symbol(&self, symbol: Symbol, w: &mut BitWriter) -> Result<(), EntropyError> {
        let (code, len) = self.lookup(symbol)?;
        w.push_bits(code, len as u32);
        Ok(())
    }

    pub fn decode_symbol(&self, r: &mut BitReader) -> Result<Symbol, EntropyError> {
        let mut code = 0u64;
        for len in 1..=self.max_len {
            code = (code << 1) | r.read_bit()? as u64;
            let (first, start, count) = self.levels[len as usize];
            if count > 0 && code >= first && code - first < count as u64 {
                return Ok(self.entries[start as usize + (code - first) as usize].0);
            }
        }
        Err(EntropyError::BadCode)
    }
}

/// Per-symbol frequency map of a coded-value stream.
pub fn count_values(values: impl IntoIterator<Item = QuantizedValue>) -> BTreeMap<Symbol, u64> {
    let mut freqs = BTreeMap::new();
    for v in values {
        *freqs.entry(v.symbol()).or_insert(0) += 1;
    }
    freqs
}

fn huffman_lengths(alive: &[(Symbol, u64)]) -> Result<Vec<(Symbol, u8)>, EntropyError> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    // Ties on weight break on insertion order (leaves in symbol order first,
    // then merge nodes as created) so the tree is deterministic.
    let n = alive.len();
    let mut parent = vec![usize::MAX; 2 * n - 1];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = (0..n)
        .map(|i| Reverse((alive[i].1, i)))
        .collect();
    let mut next = n;
    while heap.len() > 1 {
        let Reverse((wa, a)) = heap.pop().unwrap();
        let Reverse((wb, b)) = heap.pop().unwrap();
        parent[a] = next;
        parent[b] = next;
        heap.push(Reverse((wa + wb, next)));
        next += 1;
    }
    let mut lengths = Vec::with_capacity(n);
    for (i, &(symbol, _)) in alive.iter().enumerate() {
        let mut depth = 0u32;
        let mut node = i;
        while parent[node] != usize::MAX {
            node = parent[node];
            depth += 1;
        }
        if depth > 64 {
            return Err(EntropyError::CodeTooLong(depth));
        }
        lengths.push((symbol, depth as u8));
    }
    Ok(lengths)
}

/// Encode a value stream; escapes append their raw 32 float bits inline.
pub fn encode_values(
    values: &[QuantizedValue],
    table: &HuffmanTable,
    w: &mut BitWriter,
) -> Result<(), EntropyError> {
    for &v in values {
        table.encode_symbol(v.symbol(), w)?;
        if let QuantizedValue::Raw(raw) = v {
            w.push_f32_bits(raw);
        }
    }
    Ok(())
}

/// Decode exactly `count` values written by [`encode_values`].
pub fn decode_values(
    count: usize,
    table: &HuffmanTable,
    r: &mut BitReader,
) -> Result<Vec<QuantizedValue>, EntropyError> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        match table.decode_symbol(r)? {
            Symbol::Bin(b) => out.push(QuantizedValue::Bin(b)),
            Symbol::Escape => out.push(QuantizedValue::Raw(r.read_f32_bits()?)),
        }
    }
    Ok(out)
}

/// Shortest prefix of the membership bitvector that still contains every
/// set bit, plus its length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexCode {
    pub prefix_len: u32,
    /// `prefix_len` bits; bit i is set iff index i is selected.
    pub bits: Vec<bool>,
}

/// Encode a selected-index set over dimension `dim`.
pub fn index_encode(selected: &[u32], dim: u32) -> Result<IndexCode, EntropyError> {
    let mut max = None;
    for &i in selected {
        if i >= dim {
            return Err(EntropyError::IndexOutOfRange { index: i, dim });
        }
        max = Some(max.map_or(i, |m: u32| m.max(i)));
    }
    let prefix_len = max.map_or(0, |m| m + 1);
    let mut bits = vec![false; prefix_len as usize];
    for &i in selected {
        bits[i as usize] = true;
    }
    Ok(IndexCode { prefix_len, bits })
}

/// Recover the ascending index set from a prefix code.
pub fn index_decode(code: &IndexCode, dim: u32) -> Result<Vec<u32>, EntropyError> {
    if code.prefix_len > dim || code.bits.len() != code.prefix_len as usize {
        return Err(EntropyError::IndexOutOfRange {
            index: code.prefix_len,
            dim,
        });
    }
    if code.prefix_len > 0 && !code.bits[code.prefix_len as usize - 1] {
        return Err(EntropyError::DanglingPrefix(code.prefix_len));
    }
    Ok(code
        .bits
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| i as u32)
        .collect())
}

pub fn write_index_bits(code: &IndexCode, w: &mut BitWriter) {
    for &b in &code.bits {
        w.push_bit(b);
    }
}

pub fn read_index_code(prefix_len: u32, r: &mut BitReader) -> Result<IndexCode, EntropyError> {
    let mut bits = Vec::with_capacity(prefix_len as usize);
    for _ in 0..prefix_len {
        bits.push(r.read_bit()?);
    }
    Ok(IndexCode { prefix_len, bits })
}

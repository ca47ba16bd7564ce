//! MSB-first bit packing shared by the entropy coders and the archive.
//!
//! Bit i of a stream lives in byte i/8 at bit position 7 - (i mod 8).
//! Length fields elsewhere in the container are little-endian; only the
//! packing order within a byte is fixed here.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BitsError {
    #[error("bitstream ended after {0} bits")]
    UnexpectedEnd(u64),
    #[error("cannot read {0} bits at once (max 64)")]
    WidthTooLarge(u32),
}

/// Append-only bit sink.
#[derive(Default, Debug, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bit_len: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bit_len(&self) -> u64 {
        self.bit_len
    }

    #[inline]
    pub fn push_bit(&mut self, bit: bool) {
        let offset = (self.bit_len % 8) as u8;
        if offset == 0 {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().unwrap() |= 1 << (7 - offset);
        }
        self.bit_len += 1;
    }

    /// Push the low `count` bits of `value`, most significant first.
    pub fn push_bits(&mut self, value: u64, count: u32) {
        debug_assert!(count <= 64);
        for i in (0..count).rev() {
            self.push_bit((value >> i) & 1 == 1);
        }
    }

    pub fn push_f32_bits(&mut self, value: f32) {
        self.push_bits(value.to_bits() as u64, 32);
    }

    /// Zero-padded bytes plus the exact bit length.
    pub fn finish(self) -> (Vec<u8>, u64) {
        (self.bytes, self.bit_len)
    }
}

/// Bounds-checked reader over a packed bit buffer.
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
    limit: u64,
}

impl<'a> BitReader<'a> {
    /// `limit` is the number of valid bits; it must fit in `bytes`.
    pub fn new(bytes: &'a [u8], limit: u64) -> Result<Self, BitsError> {
        if limit > bytes.len() as u64 * 8 {
            return Err(BitsError::UnexpectedEnd(bytes.len() as u64 * 8));
        }
        Ok(BitReader {
            bytes,
            pos: 0,
            limit,
        })
    }

    pub fn remaining(&self) -> u64 {
        self.limit - self.pos
    }

    #[inline]
    pub fn read_bit(&mut self) -> Result<bool, BitsError> {
        if self.pos >= self.limit {
            return Err(BitsError::UnexpectedEnd(self.pos));
        }
        let byte = self.bytes[(self.pos / 8) as usize];
        let bit = (byte >> (7 - (self.pos % 8) as u8)) & 1 == 1;
        self.pos += 1;
        Ok(bit)
    }

    /// Read `count` bits, most significant first.
    pub fn read_bits(&mut self, count: u32) -> Result<u64, BitsError> {
        if count > 64 {
            return Err(BitsError::WidthTooLarge(count));
        }
        let mut value = 0u64;
        for _ in 0..count {
            value = (value << 1) | self.read_bit()? as u64;
        }
        Ok(value)
    }

    pub fn read_f32_bits(&mut self) -> Result<f32, BitsError> {
        Ok(f32::from_bits(self.read_bits(32)? as u32))
    }
}

//! Fixed-length binary descriptors compared by Hamming distance.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default descriptor length, matching 384-bit BRISK.
pub const DEFAULT_DESCRIPTOR_BITS: usize = 384;

/// A packed bit string. Bit `i` lives in `words[i / 64]` at position `i % 64`;
/// bits past `len` are always zero.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDescriptor")]
pub struct Descriptor {
    len: usize,
    words: Vec<u64>,
}

impl Descriptor {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut d = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            d.set(i, b);
        }
        d
    }

    /// Build from raw words, masking anything past `len`.
    pub fn from_words(len: usize, mut words: Vec<u64>) -> Self {
        words.resize(len.div_ceil(64), 0);
        let mut d = Self { len, words };
        d.mask_tail();
        d
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        debug_assert!(i < self.len);
        let mask = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    #[inline]
    pub fn flip(&mut self, i: usize) {
        self.words[i / 64] ^= 1u64 << (i % 64);
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Hamming distance. Panics in debug builds on length mismatch; use
    /// [`Descriptor::try_hamming`] when lengths are not already validated.
    #[inline]
    pub fn hamming(&self, other: &Descriptor) -> u32 {
        debug_assert_eq!(self.len, other.len);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    pub fn try_hamming(&self, other: &Descriptor) -> Result<u32> {
        if self.len != other.len {
            return Err(Error::LengthMismatch {
                expected: self.len,
                actual: other.len,
            });
        }
        Ok(self.hamming(other))
    }

    pub fn complement(&self) -> Descriptor {
        let words = self.words.iter().map(|w| !w).collect();
        Descriptor::from_words(self.len, words)
    }

    /// Lowercase hex of the little-endian byte sequence. Requires `len % 8 == 0`.
    pub fn to_hex(&self) -> String {
        let nbytes = self.len / 8;
        let bytes: Vec<u8> = self
            .words
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .take(nbytes)
            .collect();
        hex::encode(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::InvalidMap(format!("bad descriptor hex: {e}")))?;
        let len = bytes.len() * 8;
        let mut words = vec![0u64; len.div_ceil(64)];
        for (i, b) in bytes.iter().enumerate() {
            words[i / 8] |= (*b as u64) << (8 * (i % 8));
        }
        Ok(Descriptor { len, words })
    }

    fn mask_tail(&mut self) {
        let rem = self.len % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }
}

#[derive(Deserialize)]
struct RawDescriptor {
    len: usize,
    words: Vec<u64>,
}

impl TryFrom<RawDescriptor> for Descriptor {
    type Error = Error;

    fn try_from(raw: RawDescriptor) -> Result<Self> {
        if raw.words.len() != raw.len.div_ceil(64) {
            return Err(Error::LengthMismatch {
                expected: raw.len.div_ceil(64),
                actual: raw.words.len(),
            });
        }
        Ok(Descriptor::from_words(raw.len, raw.words))
    }
}

impl fmt::Debug for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Descriptor({} bits, ", self.len)?;
        if self.len % 8 == 0 {
            write!(f, "{})", self.to_hex())
        } else {
            write!(f, "{:x?})", self.words)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_round_trip_and_bit_order() {
        let mut d = Descriptor::zeros(16);
        d.set(0, true);
        d.set(9, true);
        assert_eq!(d.to_hex(), "0102");
        assert_eq!(Descriptor::from_hex("0102").unwrap(), d);
    }

    #[test]
    fn complement_masks_tail() {
        let d = Descriptor::zeros(70);
        let c = d.complement();
        assert_eq!(c.count_ones(), 70);
        assert_eq!(d.hamming(&c), 70);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let a = Descriptor::zeros(8);
        let b = Descriptor::zeros(16);
        assert!(matches!(a.try_hamming(&b), Err(Error::LengthMismatch { .. })));
    }
}

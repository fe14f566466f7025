//! Q9.9 fixed point: 18-bit two's-complement words with 9 fractional bits.

use super::PhyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPointCodec {
    pub int_bits: u32,
    pub frac_bits: u32,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        Self::Q9_9
    }
}

impl FixedPointCodec {
    pub const Q9_9: FixedPointCodec = FixedPointCodec {
        int_bits: 9,
        frac_bits: 9,
    };

    pub const fn word_bits(&self) -> u32 {
        self.int_bits + self.frac_bits
    }

    pub fn resolution(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    fn min_word(&self) -> i64 {
        -(1i64 << (self.word_bits() - 1))
    }

    fn max_word(&self) -> i64 {
        (1i64 << (self.word_bits() - 1)) - 1
    }

    pub fn min_value(&self) -> f64 {
        self.min_word() as f64 * self.resolution()
    }

    pub fn max_value(&self) -> f64 {
        self.max_word() as f64 * self.resolution()
    }

    /// Nearest representable word, saturating outside the range. The
    /// result holds the two's-complement bit pattern in its low bits.
    pub fn encode(&self, value: f64) -> Result<u32, PhyError> {
        if value.is_nan() {
            return Err(PhyError::NotANumber);
        }
        let scaled = (value * (self.frac_bits as f64).exp2()).round();
        let word = if scaled <= self.min_word() as f64 {
            self.min_word()
        } else if scaled >= self.max_word() as f64 {
            self.max_word()
        } else {
            scaled as i64
        };
        let mask = (1u64 << self.word_bits()) - 1;
        Ok((word as u64 & mask) as u32)
    }

    pub fn decode(&self, word: u32) -> f64 {
        let bits = self.word_bits();
        let raw = i64::from(word & ((1u32 << bits) - 1));
        let signed = if raw >= 1 << (bits - 1) {
            raw - (1 << bits)
        } else {
            raw
        };
        signed as f64 * self.resolution()
    }

    /// Round-trips `value` through the codec.
    pub fn quantize(&self, value: f64) -> Result<f64, PhyError> {
        Ok(self.decode(self.encode(value)?))
    }
}

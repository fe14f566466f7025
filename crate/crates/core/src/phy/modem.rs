//! Gray-mapped square constellations with unit average symbol energy.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    Qpsk,
    Qam64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Symbol {
    pub i: f64,
    pub q: f64,
}

impl Modulation {
    pub fn bits_per_symbol(self) -> usize {
        match self {
            Modulation::Qpsk => 2,
            Modulation::Qam64 => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modulation::Qpsk => "QPSK",
            Modulation::Qam64 => "64QAM",
        }
    }

    fn bits_per_axis(self) -> usize {
        self.bits_per_symbol() / 2
    }

    fn levels(self) -> usize {
        1 << self.bits_per_axis()
    }

    /// Scale that brings the constellation to unit average energy.
    fn scale(self) -> f64 {
        let m = self.levels() as f64;
        // mean of (2i - m + 1)^2 over one axis is (m^2 - 1) / 3, two axes
        (2.0 * (m * m - 1.0) / 3.0).sqrt().recip()
    }

    fn axis_level(self, bits: &[bool]) -> f64 {
        let gray = bits
            .iter()
            .fold(0usize, |acc, &b| (acc << 1) | usize::from(b));
        let mut index = gray;
        let mut shift = gray >> 1;
        while shift > 0 {
            index ^= shift;
            shift >>= 1;
        }
        let m = self.levels() as f64;
        (2.0 * index as f64 - m + 1.0) * self.scale()
    }

    fn axis_bits(self, value: f64, out: &mut Vec<bool>) {
        let m = self.levels();
        let raw = (value / self.scale() + m as f64 - 1.0) / 2.0;
        let index = raw.round().clamp(0.0, (m - 1) as f64) as usize;
        let gray = index ^ (index >> 1);
        for k in (0..self.bits_per_axis()).rev() {
            out.push((gray >> k) & 1 == 1);
        }
    }

    /// Maps exactly `bits_per_symbol` bits: the first half picks the
    /// in-phase level, the second half the quadrature level.
    pub fn map(self, bits: &[bool]) -> Symbol {
        debug_assert_eq!(bits.len(), self.bits_per_symbol());
        let half = self.bits_per_axis();
        // bit 0 maps to the positive level for QPSK
        let (i, q) = (
            self.axis_level(&bits[..half]),
            self.axis_level(&bits[half..]),
        );
        match self {
            Modulation::Qpsk => Symbol { i: -i, q: -q },
            Modulation::Qam64 => Symbol { i, q },
        }
    }

    /// Hard-decision nearest-point demapping.
    pub fn demap(self, s: Symbol, out: &mut Vec<bool>) {
        let (i, q) = match self {
            Modulation::Qpsk => (-s.i, -s.q),
            Modulation::Qam64 => (s.i, s.q),
        };
        self.axis_bits(i, out);
        self.axis_bits(q, out);
    }

    /// Every point with its bit label, in label order.
    pub fn constellation(self) -> Vec<(Vec<bool>, Symbol)> {
        let k = self.bits_per_symbol();
        (0..1usize << k)
            .map(|label| {
                let bits: Vec<bool> = (0..k).rev().map(|b| (label >> b) & 1 == 1).collect();
                let s = self.map(&bits);
                (bits, s)
            })
            .collect()
    }
}

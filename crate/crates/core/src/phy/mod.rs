//! Physical layer: fixed-point payloads, Gray-mapped QPSK/64QAM over AWGN,
//! and airtime accounting.

mod codec;
mod modem;

use bitvec::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::rng;

pub use codec::FixedPointCodec;
pub use modem::{Modulation, Symbol};

pub type Bits = BitVec<u8, Msb0>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhyError {
    #[error("cannot encode NaN")]
    NotANumber,
    #[error("payload of {bits} bits is not a whole number of {word}-bit words")]
    Misaligned { bits: usize, word: usize },
    #[error("data rate must be positive, got {0}")]
    Rate(f64),
    #[error("membership mask of {bits} bits cannot describe {classes} classes")]
    MaskLength { bits: usize, classes: usize },
    #[error("malformed payload dump: {0}")]
    Dump(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PayloadKind {
    RawData,
    LatentData,
    Softmax,
    ConformalSet,
    Result,
    Control,
}

impl PayloadKind {
    pub const ALL: [PayloadKind; 6] = [
        PayloadKind::RawData,
        PayloadKind::LatentData,
        PayloadKind::Softmax,
        PayloadKind::ConformalSet,
        PayloadKind::Result,
        PayloadKind::Control,
    ];

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Kinds that carry Q9.9 words.
    pub fn is_real_valued(self) -> bool {
        matches!(
            self,
            PayloadKind::RawData
                | PayloadKind::LatentData
                | PayloadKind::Softmax
                | PayloadKind::Result
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPayload {
    pub bits: Bits,
    pub kind: PayloadKind,
}

impl BitPayload {
    pub fn new(kind: PayloadKind, bits: Bits) -> Self {
        Self { bits, kind }
    }

    pub fn empty(kind: PayloadKind) -> Self {
        Self::new(kind, Bits::new())
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Header (kind byte, little-endian u32 bit length) then the bits
    /// packed MSB-first, zero-padded to a whole byte.
    pub fn dump(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.bits.len().div_ceil(8));
        out.push(self.kind.code());
        out.extend_from_slice(&(self.bits.len() as u32).to_le_bytes());
        let mut bits = self.bits.clone();
        bits.set_uninitialized(false);
        out.extend_from_slice(bits.as_raw_slice());
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, PhyError> {
        if bytes.len() < 5 {
            return Err(PhyError::Dump("header truncated".into()));
        }
        let kind = PayloadKind::from_code(bytes[0])
            .ok_or_else(|| PhyError::Dump(format!("unknown kind {}", bytes[0])))?;
        let len = u32::from_le_bytes(bytes[1..5].try_into().expect("four header bytes")) as usize;
        let body = &bytes[5..];
        if body.len() != len.div_ceil(8) {
            return Err(PhyError::Dump(format!(
                "{len} bits need {} bytes, found {}",
                len.div_ceil(8),
                body.len()
            )));
        }
        let mut bits = Bits::from_slice(body);
        bits.truncate(len);
        Ok(Self { bits, kind })
    }
}

/// Q9.9-encodes `values`, one 18-bit word per value, most significant bit first.
pub fn encode_reals(values: &[f64], kind: PayloadKind) -> Result<BitPayload, PhyError> {
    let codec = FixedPointCodec::Q9_9;
    let word = codec.word_bits() as usize;
    let mut bits = Bits::with_capacity(values.len() * word);
    for &v in values {
        let w = codec.encode(v)?;
        for k in (0..word).rev() {
            bits.push((w >> k) & 1 == 1);
        }
    }
    Ok(BitPayload::new(kind, bits))
}

pub fn decode_reals(p: &BitPayload) -> Result<Vec<f64>, PhyError> {
    let codec = FixedPointCodec::Q9_9;
    let word = codec.word_bits() as usize;
    if !p.bits.len().is_multiple_of(word) {
        return Err(PhyError::Misaligned {
            bits: p.bits.len(),
            word,
        });
    }
    Ok(p.bits
        .chunks(word)
        .map(|c| codec.decode(c.iter().fold(0u32, |acc, b| (acc << 1) | u32::from(*b))))
        .collect())
}

/// One bit per class, set when the class is a member.
pub fn encode_mask(members: impl IntoIterator<Item = usize>, classes: usize) -> BitPayload {
    let mut bits = bitvec![u8, Msb0; 0; classes];
    for m in members {
        if m < classes {
            bits.set(m, true);
        }
    }
    BitPayload::new(PayloadKind::ConformalSet, bits)
}

pub fn decode_mask(p: &BitPayload, classes: usize) -> Result<Vec<usize>, PhyError> {
    if p.bits.len() != classes {
        return Err(PhyError::MaskLength {
            bits: p.bits.len(),
            classes,
        });
    }
    Ok(p.bits.iter_ones().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Es/N0 in dB; `f64::INFINITY` disables the noise.
    pub snr_db: f64,
    pub modulation: Modulation,
    pub rate_bps: f64,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn new(
        snr_db: f64,
        modulation: Modulation,
        rate_bps: f64,
        seed: u64,
    ) -> Result<Self, PhyError> {
        if !(rate_bps > 0.0 && rate_bps.is_finite()) {
            return Err(PhyError::Rate(rate_bps));
        }
        Ok(Self {
            snr_db,
            modulation,
            rate_bps,
            seed,
        })
    }

    pub fn is_noiseless(&self) -> bool {
        self.snr_db == f64::INFINITY
    }

    /// Per-component noise standard deviation for unit-energy symbols.
    pub fn noise_sigma(&self) -> f64 {
        let snr = db_to_linear(self.snr_db);
        (0.5 / snr).sqrt()
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Modulates, adds complex Gaussian noise, and hard-demaps. The tail is
/// zero-padded to a whole symbol and stripped again on the way out.
pub fn transmit(p: &BitPayload, cfg: &ChannelConfig) -> BitPayload {
    if cfg.is_noiseless() || p.is_empty() {
        return p.clone();
    }
    let m = cfg.modulation;
    let k = m.bits_per_symbol();
    let sigma = cfg.noise_sigma();
    let mut rng = rng::stream(cfg.seed, &[]);
    let mut out = Vec::with_capacity(p.len() + k);
    let mut chunk = vec![false; k];
    for start in (0..p.len()).step_by(k) {
        for (j, slot) in chunk.iter_mut().enumerate() {
            *slot = p.bits.get(start + j).is_some_and(|b| *b);
        }
        let s = m.map(&chunk);
        let ni: f64 = rng.sample(StandardNormal);
        let nq: f64 = rng.sample(StandardNormal);
        m.demap(
            Symbol {
                i: s.i + sigma * ni,
                q: s.q + sigma * nq,
            },
            &mut out,
        );
    }
    out.truncate(p.len());
    BitPayload::new(p.kind, out.into_iter().collect())
}

/// Adds Gaussian noise directly to real values, with variance set by the
/// mean signal power and the SNR. An alternative to the bit-level path.
pub fn perturb_reals(values: &[f64], snr_db: f64, seed: u64) -> Vec<f64> {
    if snr_db == f64::INFINITY || values.is_empty() {
        return values.to_vec();
    }
    let power = values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64;
    let sigma = (power / db_to_linear(snr_db)).sqrt();
    let mut rng = rng::stream(seed, &[]);
    values
        .iter()
        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn airtime(p: &BitPayload, cfg: &ChannelConfig) -> f64 {
    airtime_bits(p.len(), cfg.rate_bps)
}

pub fn airtime_bits(bits: usize, rate_bps: f64) -> f64 {
    bits as f64 / rate_bps
}

pub fn bit_errors(a: &BitPayload, b: &BitPayload) -> usize {
    a.bits
        .iter()
        .zip(b.bits.iter())
        .filter(|(x, y)| **x != **y)
        .count()
}

/// Gaussian tail probability.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Gray QPSK bit error rate at the given Eb/N0 (dB).
pub fn qpsk_ber(eb_n0_db: f64) -> f64 {
    q_function((2.0 * db_to_linear(eb_n0_db)).sqrt())
}

/// Nearest-neighbour approximation of Gray square M-QAM bit error rate at the
/// given Es/N0 (dB).
pub fn square_qam_ber(order: usize, es_n0_db: f64) -> f64 {
    let m = order as f64;
    let sqrt_m = m.sqrt();
    let k = m.log2();
    let es_n0 = db_to_linear(es_n0_db);
    (4.0 / k) * (1.0 - 1.0 / sqrt_m) * q_function((3.0 * es_n0 / (m - 1.0)).sqrt())
}

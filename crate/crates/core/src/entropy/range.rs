//! Binary-renormalizing arithmetic coder with 32-bit registers.
//!
//! Every renormalization shift contributes exactly one output bit and the
//! flush contributes two, so a stream of `s` shifts is `s + 2` bits long. The
//! decoder counts its own shifts and rejects payloads shorter than that.

use super::bits::{BitReader, BitWriter};
use super::{QuantizedDistribution, FREQ_TOTAL};
use crate::error::{CodecError, Result};

const HALF: u64 = 1 << 31;
const QUARTER: u64 = 1 << 30;
const TOP: u64 = (1 << 32) - 1;

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u64,
    high: u64,
    pending: u64,
    out: BitWriter,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            high: TOP,
            pending: 0,
            out: BitWriter::new(),
        }
    }

    fn emit(&mut self, bit: bool) {
        self.out.push(bit);
        for _ in 0..self.pending {
            self.out.push(!bit);
        }
        self.pending = 0;
    }

    pub fn encode(&mut self, q: &QuantizedDistribution, symbol: u32) {
        let (lo, hi) = q.interval(symbol);
        let range = self.high - self.low + 1;
        self.high = self.low + range * hi as u64 / FREQ_TOTAL as u64 - 1;
        self.low += range * lo as u64 / FREQ_TOTAL as u64;
        loop {
            if self.high < HALF {
                self.emit(false);
            } else if self.low >= HALF {
                self.emit(true);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < 3 * QUARTER {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
        }
    }

    /// Bits that will be in the payload if the stream ended now.
    pub fn projected_bits(&self) -> u64 {
        self.out.bit_count() + self.pending + 2
    }

    pub fn finish(mut self) -> (Vec<u8>, u64) {
        self.pending += 1;
        let bit = self.low >= QUARTER;
        self.emit(bit);
        self.out.into_parts()
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    low: u64,
    high: u64,
    value: u64,
    shifts: u64,
    input: BitReader<'a>,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(mut input: BitReader<'a>) -> Self {
        let mut value = 0;
        for _ in 0..32 {
            value = (value << 1) | u64::from(input.read_or_zero());
        }
        Self {
            low: 0,
            high: TOP,
            value,
            shifts: 0,
            input,
        }
    }

    pub fn decode(&mut self, q: &QuantizedDistribution) -> Result<u32> {
        let range = self.high - self.low + 1;
        let scaled = ((self.value - self.low + 1) * FREQ_TOTAL as u64 - 1) / range;
        let symbol = q.symbol_at(scaled as u32);
        let (lo, hi) = q.interval(symbol);
        self.high = self.low + range * hi as u64 / FREQ_TOTAL as u64 - 1;
        self.low += range * lo as u64 / FREQ_TOTAL as u64;
        if self.value < self.low || self.value > self.high {
            return Err(CodecError::CorruptStream(
                "arithmetic decoder left its interval".into(),
            ));
        }
        loop {
            if self.high < HALF {
            } else if self.low >= HALF {
                self.low -= HALF;
                self.high -= HALF;
                self.value -= HALF;
            } else if self.low >= QUARTER && self.high < 3 * QUARTER {
                self.low -= QUARTER;
                self.high -= QUARTER;
                self.value -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
            self.value = (self.value << 1) | u64::from(self.input.read_or_zero());
            self.shifts += 1;
        }
        Ok(symbol)
    }

    /// Checks that the payload holds every bit the encoder must have written
    /// and that it ends in the flush pattern.
    pub fn finish(self) -> Result<()> {
        let flush = if self.low < QUARTER { QUARTER } else { HALF };
        if self.value != flush {
            return Err(CodecError::CorruptStream(
                "payload does not end in a valid flush".into(),
            ));
        }
        let needed = self.shifts + 2;
        let have = self.input.bit_count();
        if needed > have {
            return Err(CodecError::CorruptStream(format!(
                "payload has {have} bits, stream needs {needed}"
            )));
        }
        // Only byte padding may follow.
        if have - needed >= 8 {
            return Err(CodecError::CorruptStream(format!(
                "{} unexpected bits after the stream",
                have - needed
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probmodel::StepDistribution;
    use num_bigint::BigUint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_q(rng: &mut ChaCha8Rng, n: usize) -> QuantizedDistribution {
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(4)).collect();
        super::super::quantize_distribution(&StepDistribution::from_weights(&w).unwrap())
    }

    /// `-log2` of the exact product of interval widths.
    fn exact_code_length(qs: &[QuantizedDistribution], syms: &[u32]) -> f64 {
        let mut prod = BigUint::from(1u32);
        for (q, &s) in qs.iter().zip(syms) {
            prod *= q.freqs()[s as usize];
        }
        let shift = prod.bits().saturating_sub(53);
        let top = (&prod >> shift).to_u64_digits()[0];
        16.0 * syms.len() as f64 - (shift as f64 + (top as f64).log2())
    }

    fn round_trip(qs: &[QuantizedDistribution], syms: &[u32]) -> u64 {
        let mut enc = RangeEncoder::new();
        for (q, &s) in qs.iter().zip(syms) {
            enc.encode(q, s);
        }
        let projected = enc.projected_bits();
        let (bytes, n) = enc.finish();
        assert_eq!(n, projected);
        let mut dec = RangeDecoder::new(BitReader::new(&bytes, n));
        for (q, &s) in qs.iter().zip(syms) {
            assert_eq!(dec.decode(q).unwrap(), s);
        }
        dec.finish().unwrap();
        n
    }

    #[test]
    fn lengths_bracket_the_exact_rational_code_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..200 {
            let n = if trial % 2 == 0 { 16 } else { 1024 };
            let len = rng.random_range(1..300);
            let qs: Vec<_> = (0..len).map(|_| random_q(&mut rng, n)).collect();
            let syms: Vec<u32> = qs
                .iter()
                .map(|q| {
                    // Draw from q itself so the stream is typical.
                    let u = rng.random_range(0..FREQ_TOTAL);
                    q.symbol_at(u)
                })
                .collect();
            let bits = round_trip(&qs, &syms) as f64;
            let exact = exact_code_length(&qs, &syms);
            assert!(bits >= exact - 1e-6, "{bits} < {exact}");
            assert!(bits <= exact + 32.0, "{bits} > {exact} + 32");
        }
    }

    #[test]
    fn thousand_half_probability_symbols() {
        let mut freqs = vec![1u32; 16];
        freqs[3] = FREQ_TOTAL / 2 - 7;
        freqs[9] = FREQ_TOTAL / 2 - 7;
        let q = QuantizedDistribution::from_freqs(freqs).unwrap();
        let syms: Vec<u32> = (0..1000).map(|i| if i % 3 == 0 { 3 } else { 9 }).collect();
        let qs = vec![q; 1000];
        let bits = round_trip(&qs, &syms);
        assert!(bits <= 1032, "{bits}");
    }

    #[test]
    fn empty_stream_is_two_bits() {
        let (_, n) = RangeEncoder::new().finish();
        assert_eq!(n, 2);
    }

    #[test]
    fn truncation_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let qs: Vec<_> = (0..40).map(|_| random_q(&mut rng, 32)).collect();
            let syms: Vec<u32> = (0..40).map(|_| rng.random_range(0..32)).collect();
            let mut enc = RangeEncoder::new();
            for (q, &s) in qs.iter().zip(&syms) {
                enc.encode(q, s);
            }
            let (bytes, n) = enc.finish();
            let mut dec = RangeDecoder::new(BitReader::new(&bytes, n - 1));
            let ok = qs.iter().all(|q| dec.decode(q).is_ok());
            assert!(!ok || dec.finish().is_err());
        }
    }
}

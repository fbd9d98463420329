use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::bits::{BitReader, BitWriter};
use super::QuantizedDistribution;
use crate::error::{CodecError, Result};

/// Canonical prefix code: codes are assigned in (length, symbol) order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanCode {
    lengths: Vec<u8>,
    codes: Vec<u32>,
    /// Symbols sorted by (length, symbol).
    sorted: Vec<u32>,
    /// Per length: first canonical code, and offset into `sorted`.
    first: Vec<u32>,
    offset: Vec<usize>,
    count: Vec<usize>,
}

/// Optimal code lengths for positive weights. Merges take the two lightest
/// nodes, ties broken by creation order (leaves by symbol index first).
pub fn code_lengths(weights: &[u32]) -> Vec<u8> {
    let n = weights.len();
    if n == 1 {
        return vec![1];
    }
    let mut parent = vec![usize::MAX; 2 * n - 1];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| Reverse((w as u64, i)))
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
    // Internal nodes are created after their children, so depths resolve top-down.
    let mut depth = vec![0u8; 2 * n - 1];
    for v in (0..2 * n - 2).rev() {
        depth[v] = depth[parent[v]] + 1;
    }
    depth.truncate(n);
    depth
}

impl HuffmanCode {
    pub fn from_lengths(lengths: Vec<u8>) -> Self {
        let max = *lengths.iter().max().unwrap_or(&0) as usize;
        let mut sorted: Vec<u32> = (0..lengths.len() as u32).collect();
        sorted.sort_by_key(|&s| (lengths[s as usize], s));
        let mut count = vec![0usize; max + 1];
        for &l in &lengths {
            count[l as usize] += 1;
        }
        let mut first = vec![0u32; max + 1];
        let mut offset = vec![0usize; max + 1];
        let mut code = 0u32;
        let mut at = 0;
        for len in 1..=max {
            let shorter = if len == 1 { 0 } else { count[len - 1] as u32 };
            code = (code + shorter) << 1;
            first[len] = code;
            offset[len] = at;
            at += count[len];
        }
        let mut codes = vec![0u32; lengths.len()];
        for len in 1..=max {
            for i in 0..count[len] {
                codes[sorted[offset[len] + i] as usize] = first[len] + i as u32;
            }
        }
        Self {
            lengths,
            codes,
            sorted,
            first,
            offset,
            count,
        }
    }

    pub fn lengths(&self) -> &[u8] {
        &self.lengths
    }

    pub fn code(&self, symbol: u32) -> (u32, u8) {
        (self.codes[symbol as usize], self.lengths[symbol as usize])
    }

    pub fn encode(&self, symbol: u32, w: &mut BitWriter) {
        let (c, l) = self.code(symbol);
        w.push_bits(c, l);
    }

    pub fn decode(&self, r: &mut BitReader) -> Result<u32> {
        let mut code = 0u32;
        for len in 1..self.first.len() {
            let bit = r.read().ok_or_else(|| {
                CodecError::CorruptStream("payload ends inside a codeword".into())
            })?;
            code = (code << 1) | u32::from(bit);
            let rel = code.wrapping_sub(self.first[len]);
            if code >= self.first[len] && (rel as usize) < self.count[len] {
                return Ok(self.sorted[self.offset[len] + rel as usize]);
            }
        }
        Err(CodecError::CorruptStream("invalid codeword".into()))
    }

    /// Σ 2^(max - len): equals 2^max exactly for a complete code.
    pub fn kraft_numerator(&self) -> (u128, u32) {
        let max = *self.lengths.iter().max().unwrap_or(&0) as u32;
        let sum = self
            .lengths
            .iter()
            .map(|&l| 1u128 << (max - l as u32))
            .sum();
        (sum, max)
    }

    /// Expected length in bits under `q`.
    pub fn expected_length(&self, q: &QuantizedDistribution) -> f64 {
        let total: u64 = q
            .freqs()
            .iter()
            .zip(&self.lengths)
            .map(|(&f, &l)| f as u64 * l as u64)
            .sum();
        total as f64 / super::FREQ_TOTAL as f64
    }
}

/// Canonical Huffman code for a quantized distribution.
pub fn huffman_codebook(q: &QuantizedDistribution) -> HuffmanCode {
    HuffmanCode::from_lengths(code_lengths(q.freqs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Minimum expected length over every length vector satisfying Kraft.
    fn brute_force_optimum(weights: &[u32]) -> u64 {
        let n = weights.len();
        let max = n.max(2) - 1;
        let mut best = u64::MAX;
        let mut lens = vec![1usize; n];
        loop {
            let kraft: u64 = lens.iter().map(|&l| 1u64 << (max - l)).sum();
            if kraft <= 1 << max {
                let cost = lens
                    .iter()
                    .zip(weights)
                    .map(|(&l, &w)| l as u64 * w as u64)
                    .sum();
                best = best.min(cost);
            }
            let mut i = 0;
            while i < n && lens[i] == max {
                lens[i] = 1;
                i += 1;
            }
            if i == n {
                return best;
            }
            lens[i] += 1;
        }
    }

    fn cost(weights: &[u32], lens: &[u8]) -> u64 {
        lens.iter()
            .zip(weights)
            .map(|(&l, &w)| l as u64 * w as u64)
            .sum()
    }

    #[test]
    fn four_symbol_example() {
        let w = [4, 3, 2, 1];
        let lens = code_lengths(&w);
        assert_eq!(lens, vec![1, 2, 3, 3]);
        assert_eq!(cost(&w, &lens), brute_force_optimum(&w));
        let expected = cost(&w, &lens) as f64 / 10.0;
        assert!((expected - 1.9).abs() < 1e-12);
        let h: f64 = [0.4f64, 0.3, 0.2, 0.1].iter().map(|p| -p * p.log2()).sum();
        assert!((h - 1.8465).abs() < 1e-4);
    }

    #[test]
    fn balanced_and_binary_cases() {
        assert_eq!(code_lengths(&[7; 16]), vec![4; 16]);
        assert_eq!(code_lengths(&[1, 65535]), vec![1, 1]);
        assert_eq!(code_lengths(&[30000, 35536]), vec![1, 1]);
    }

    #[test]
    fn canonical_codes() {
        let c = HuffmanCode::from_lengths(vec![2, 1, 3, 3]);
        assert_eq!(c.code(1), (0b0, 1));
        assert_eq!(c.code(0), (0b10, 2));
        assert_eq!(c.code(2), (0b110, 3));
        assert_eq!(c.code(3), (0b111, 3));
        assert_eq!(c.kraft_numerator(), (8, 3));
    }

    #[test]
    fn decode_rejects_running_out() {
        let c = HuffmanCode::from_lengths(vec![1, 2, 2]);
        let mut w = BitWriter::new();
        w.push(true);
        let (b, n) = w.into_parts();
        assert!(matches!(
            c.decode(&mut BitReader::new(&b, n)),
            Err(CodecError::CorruptStream(_))
        ));
    }

    proptest! {
        #[test]
        fn matches_brute_force_optimum(w in proptest::collection::vec(1u32..50, 2..7)) {
            let lens = code_lengths(&w);
            prop_assert_eq!(cost(&w, &lens), brute_force_optimum(&w));
        }

        #[test]
        fn codes_are_prefix_free_and_round_trip(w in proptest::collection::vec(1u32..1000, 2..40)) {
            let code = HuffmanCode::from_lengths(code_lengths(&w));
            let (num, max) = code.kraft_numerator();
            prop_assert_eq!(num, 1u128 << max);
            let mut bw = BitWriter::new();
            for s in 0..w.len() as u32 {
                code.encode(s, &mut bw);
            }
            let (bytes, n) = bw.into_parts();
            let mut r = BitReader::new(&bytes, n);
            for s in 0..w.len() as u32 {
                prop_assert_eq!(code.decode(&mut r).unwrap(), s);
            }
            prop_assert_eq!(r.remaining(), 0);
        }
    }
}

/// MSB-first bit writer.
#[derive(Debug, Clone, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bits: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bit: bool) {
        if self.bits % 8 == 0 {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().unwrap() |= 0x80 >> (self.bits % 8);
        }
        self.bits += 1;
    }

    /// Writes the low `len` bits of `code`, most significant first.
    pub fn push_bits(&mut self, code: u32, len: u8) {
        for i in (0..len).rev() {
            self.push((code >> i) & 1 == 1);
        }
    }

    pub fn bit_count(&self) -> u64 {
        self.bits
    }

    pub fn into_parts(self) -> (Vec<u8>, u64) {
        (self.bytes, self.bits)
    }
}

/// MSB-first reader over the first `bit_count` bits of a buffer.
#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    data: &'a [u8],
    bit_count: u64,
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(data: &'a [u8], bit_count: u64) -> Self {
        Self {
            data,
            bit_count: bit_count.min(data.len() as u64 * 8),
            pos: 0,
        }
    }

    /// Next bit, or `None` past the end.
    pub fn read(&mut self) -> Option<bool> {
        if self.pos >= self.bit_count {
            return None;
        }
        let b = self.data[(self.pos / 8) as usize] & (0x80 >> (self.pos % 8)) != 0;
        self.pos += 1;
        Some(b)
    }

    /// Next bit, reading zeros past the end.
    pub fn read_or_zero(&mut self) -> bool {
        self.read().unwrap_or(false)
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    pub fn bit_count(&self) -> u64 {
        self.bit_count
    }

    /// Bits left before the end.
    pub fn remaining(&self) -> u64 {
        self.bit_count.saturating_sub(self.pos)
    }
}

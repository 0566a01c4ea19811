//! LSB-first bit buffers. Bit `j` lives in byte `j / 8` at position `j % 8`.

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BitWriter {
    bytes: Vec<u8>,
    len: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of bits written so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push_bit(&mut self, bit: bool) {
        if self.len % 8 == 0 {
            self.bytes.push(0);
        }
        if bit {
            self.bytes[self.len / 8] |= 1 << (self.len % 8);
        }
        self.len += 1;
    }

    /// Appends the low `width` bits of `value`; bits past 64 repeat bit 63.
    pub fn push(&mut self, value: u64, width: usize) {
        for i in 0..width {
            self.push_bit(value >> i.min(63) & 1 == 1);
        }
    }

    /// Zero-pads to the next byte boundary.
    pub fn align(&mut self) {
        self.len = self.bytes.len() * 8;
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

#[derive(Clone, Debug)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() * 8 - self.pos
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn read_bit(&mut self) -> Option<bool> {
        let byte = *self.bytes.get(self.pos / 8)?;
        let bit = byte >> (self.pos % 8) & 1 == 1;
        self.pos += 1;
        Some(bit)
    }

    /// Reads `width` bits (at most 64) as an unsigned value.
    pub fn read(&mut self, width: usize) -> Option<u64> {
        debug_assert!(width <= 64);
        if self.remaining() < width {
            return None;
        }
        let mut value = 0u64;
        for i in 0..width {
            if self.read_bit()? {
                value |= 1 << i;
            }
        }
        Some(value)
    }

    pub fn skip(&mut self, width: usize) -> Option<()> {
        if self.remaining() < width {
            return None;
        }
        self.pos += width;
        Some(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lsb_first_layout() {
        let mut w = BitWriter::new();
        w.push(0b11, 2);
        w.push(0b01, 2);
        w.push(1, 1);
        assert_eq!(w.len(), 5);
        assert_eq!(w.clone().into_bytes(), vec![0b1_0111]);
        w.align();
        w.push(0xff, 4);
        assert_eq!(w.into_bytes(), vec![0b1_0111, 0x0f]);
    }

    #[test]
    fn reader_matches_writer() {
        let mut w = BitWriter::new();
        w.push(0x2a, 7);
        w.push(u64::MAX, 64);
        w.push(0x5, 3);
        let bytes = w.into_bytes();
        let mut r = BitReader::new(&bytes);
        assert_eq!(r.read(7), Some(0x2a));
        assert_eq!(r.read(64), Some(u64::MAX));
        assert_eq!(r.read(3), Some(0x5));
        assert_eq!(r.remaining(), 6);
        assert_eq!(r.read(7), None);
    }
}

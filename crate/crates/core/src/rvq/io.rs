//! `TCQ1` codebook container.
//!
//! Little-endian: magic, version u16, codebook size u32, layer count u16,
//! embed dim u16, then every layer's table as row-major f32, then the CRC32
//! of all preceding bytes.

use std::path::Path;

use super::Codebooks;
use crate::error::{CodecError, Result};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"TCQ1";
pub const CODEBOOK_VERSION: u16 = 1;

impl Codebooks {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            16 + self.layers.len() * self.layers.first().map_or(0, Vec::len) * 4,
        );
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.codebook_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u16).to_le_bytes());
        out.extend_from_slice(&(self.embed_dim as u16).to_le_bytes());
        for table in &self.layers {
            for v in table {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 2 + 4 + 2 + 2;
        if bytes.len() < HEADER + 4 || &bytes[..4] != CODEBOOK_MAGIC {
            return Err(CodecError::Format("not a TCQ1 codebook file".into()));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
            return Err(CodecError::Format("codebook checksum mismatch".into()));
        }
        let version = u16::from_le_bytes([body[4], body[5]]);
        if version != CODEBOOK_VERSION {
            return Err(CodecError::Format(format!(
                "unsupported codebook version {version}"
            )));
        }
        let size = u32::from_le_bytes(body[6..10].try_into().unwrap()) as usize;
        let n_layers = u16::from_le_bytes([body[10], body[11]]) as usize;
        let dim = u16::from_le_bytes([body[12], body[13]]) as usize;
        let per_layer = size * dim;
        if body.len() != HEADER + n_layers * per_layer * 4 {
            return Err(CodecError::Format(format!(
                "codebook payload is {} bytes, header implies {}",
                body.len() - HEADER,
                n_layers * per_layer * 4
            )));
        }
        let floats: Vec<f32> = body[HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let layers = floats
            .chunks(per_layer.max(1))
            .take(n_layers)
            .map(|c| c.to_vec())
            .collect();
        Codebooks::new(size, dim, layers)
    }
}

pub fn write_codebooks(path: impl AsRef<Path>, cb: &Codebooks) -> Result<()> {
    std::fs::write(path, cb.to_bytes())?;
    Ok(())
}

pub fn read_codebooks(path: impl AsRef<Path>) -> Result<Codebooks> {
    Codebooks::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let cb =
            Codebooks::new(2, 3, vec![vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![0.0; 6]]).unwrap();
        let bytes = cb.to_bytes();
        assert_eq!(&bytes[..4], b"TCQ1");
        assert_eq!(bytes.len(), 14 + 2 * 6 * 4 + 4);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[14..18].try_into().unwrap()), 1.0);
        assert_eq!(Codebooks::from_bytes(&bytes).unwrap(), cb);
    }

    #[test]
    fn detects_corruption() {
        let cb = Codebooks::new(2, 1, vec![vec![1.0, 2.0]]).unwrap();
        let mut bytes = cb.to_bytes();
        bytes[15] ^= 1;
        assert!(matches!(
            Codebooks::from_bytes(&bytes),
            Err(CodecError::Format(_))
        ));
        assert!(Codebooks::from_bytes(b"TCQ0xxxxxxxxxxxxxxxxxx").is_err());
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{CodecError, Result};

/// Upper bound on the codebook size. Every symbol keeps at least one count
/// out of the 2^16 coding total, so the alphabet must stay well below that.
pub const MAX_CODEBOOK_SIZE: usize = 1 << 14;

/// Token geometry shared by the quantizer, the token models and the bitstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Codewords per quantizer layer.
    pub codebook_size: usize,
    /// Coarse layers: entropy coded and transmitted.
    pub n_coarse: usize,
    /// Fine layers: synthesized at the receiver.
    pub n_fine: usize,
    pub embed_dim: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            codebook_size: 1024,
            n_coarse: 4,
            n_fine: 8,
            embed_dim: 320,
        }
    }
}

impl CodecConfig {
    pub fn new(
        codebook_size: usize,
        n_coarse: usize,
        n_fine: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        let cfg = Self {
            codebook_size,
            n_coarse,
            n_fine,
            embed_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_coarse == 0 {
            return Err(CodecError::InvalidConfig(
                "at least one coarse layer is required".into(),
            ));
        }
        if !(2..=MAX_CODEBOOK_SIZE).contains(&self.codebook_size) {
            return Err(CodecError::InvalidConfig(format!(
                "codebook size {} outside [2, {MAX_CODEBOOK_SIZE}]",
                self.codebook_size
            )));
        }
        if self.n_layers() > u8::MAX as usize {
            return Err(CodecError::InvalidConfig(format!(
                "{} layers is too many",
                self.n_layers()
            )));
        }
        if self.embed_dim == 0 || self.embed_dim > u16::MAX as usize {
            return Err(CodecError::InvalidConfig(format!(
                "embed_dim {} out of range",
                self.embed_dim
            )));
        }
        Ok(())
    }

    /// Total quantizer layers, coarse plus fine.
    pub fn n_layers(&self) -> usize {
        self.n_coarse + self.n_fine
    }

    pub fn bits_per_code(&self) -> u32 {
        usize::BITS - (self.codebook_size - 1).leading_zeros()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_per_code_is_ceil_log2() {
        for (nc, bits) in [
            (2, 1),
            (3, 2),
            (4, 2),
            (16, 4),
            (1000, 10),
            (1024, 10),
            (1025, 11),
        ] {
            let cfg = CodecConfig {
                codebook_size: nc,
                ..Default::default()
            };
            assert_eq!(cfg.bits_per_code(), bits, "Nc = {nc}");
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(CodecConfig::new(1024, 0, 4, 320).is_err());
        assert!(CodecConfig::new(1, 1, 0, 320).is_err());
        assert!(CodecConfig::new(1 << 15, 1, 0, 320).is_err());
        assert!(CodecConfig::new(1024, 4, 8, 0).is_err());
        assert_eq!(CodecConfig::new(1024, 4, 8, 320).unwrap().n_layers(), 12);
    }
}

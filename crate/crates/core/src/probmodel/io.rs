//! `TCM1` model files.
//!
//! Layout (little-endian): magic, role u8, kind u8, config block
//! (codebook size u32, coarse layers u8, fine layers u8, embed dim u16),
//! parameter blob (u64 length + bytes), then the 32-byte model id, which is
//! the SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::context::{ContextModel, Counts};
use super::transformer::{Layout, Transformer};
use super::{ModelId, ModelKind, ModelParams, Role, TokenModel};
use crate::config::CodecConfig;
use crate::error::{CodecError, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"TCM1";

fn kind_byte(k: ModelKind) -> u8 {
    match k {
        ModelKind::Context => 0,
        ModelKind::Transformer => 1,
    }
}

fn params_blob(params: &ModelParams) -> Vec<u8> {
    let mut b = Vec::new();
    match params {
        ModelParams::Context(m) => {
            b.extend((m.order as u16).to_le_bytes());
            let mut keys: Vec<&(u16, Vec<u32>)> = m.table.keys().collect();
            keys.sort();
            b.extend((keys.len() as u64).to_le_bytes());
            for key in keys {
                let counts = &m.table[key];
                b.extend(key.0.to_le_bytes());
                b.extend((key.1.len() as u16).to_le_bytes());
                for s in &key.1 {
                    b.extend(s.to_le_bytes());
                }
                b.extend((counts.sparse.len() as u32).to_le_bytes());
                for &(s, c) in &counts.sparse {
                    b.extend(s.to_le_bytes());
                    b.extend(c.to_le_bytes());
                }
            }
        }
        ModelParams::Transformer(t) => {
            let l = &t.layout;
            b.extend((l.blocks as u16).to_le_bytes());
            b.extend((l.heads as u16).to_le_bytes());
            b.extend((l.d as u32).to_le_bytes());
            b.extend(((l.max_frames * l.per_frame) as u32).to_le_bytes());
            b.extend((t.params.len() as u64).to_le_bytes());
            for p in &t.params {
                b.extend(p.to_le_bytes());
            }
        }
    }
    b
}

fn body(m: &TokenModel) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend(MODEL_MAGIC);
    b.push(m.role.as_byte());
    b.push(kind_byte(m.kind()));
    b.extend((m.config.codebook_size as u32).to_le_bytes());
    b.push(m.config.n_coarse as u8);
    b.push(m.config.n_fine as u8);
    b.extend((m.config.embed_dim as u16).to_le_bytes());
    let blob = params_blob(&m.params);
    b.extend((blob.len() as u64).to_le_bytes());
    b.extend(blob);
    b
}

pub(crate) fn compute_id(m: &TokenModel) -> ModelId {
    ModelId(Sha256::digest(body(m)).into())
}

pub fn to_bytes(m: &TokenModel) -> Vec<u8> {
    let mut b = body(m);
    b.extend(m.model_id.0);
    b
}

struct Cursor<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.at < n {
            return Err(CodecError::Format("model file is truncated".into()));
        }
        let s = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.at == self.data.len()
    }
}

fn parse_context(c: &mut Cursor, cfg: &CodecConfig) -> Result<ContextModel> {
    let order = c.u16()? as usize;
    if order == 0 {
        return Err(CodecError::Format("context order 0".into()));
    }
    let n = c.u64()?;
    let mut m = ContextModel::empty(order, cfg.codebook_size);
    let mut prev: Option<(u16, Vec<u32>)> = None;
    for _ in 0..n {
        let layer = c.u16()?;
        let len = c.u16()? as usize;
        if len > order {
            return Err(CodecError::Format(format!(
                "context of {len} symbols exceeds order {order}"
            )));
        }
        let ctx = (0..len).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let key = (layer, ctx);
        if prev.as_ref().is_some_and(|p| *p >= key) {
            return Err(CodecError::Format("context entries out of order".into()));
        }
        let k = c.u32()? as usize;
        let mut sparse = Vec::with_capacity(k.min(cfg.codebook_size));
        for _ in 0..k {
            let s = c.u32()?;
            let n = c.u32()?;
            if s as usize >= cfg.codebook_size
                || sparse.last().is_some_and(|&(p, _): &(u32, u32)| p >= s)
            {
                return Err(CodecError::Format(format!(
                    "bad count entry for symbol {s}"
                )));
            }
            sparse.push((s, n));
        }
        let total = sparse.iter().map(|&(_, n)| n as u64).sum();
        m.table.insert(key.clone(), Counts { total, sparse });
        prev = Some(key);
    }
    Ok(m)
}

fn parse_transformer(c: &mut Cursor, cfg: &CodecConfig, role: Role) -> Result<Transformer> {
    let blocks = c.u16()? as usize;
    let heads = c.u16()? as usize;
    let d = c.u32()? as usize;
    let context = c.u32()? as usize;
    let n = c.u64()? as usize;
    let per_frame = super::Flattening::new(role, cfg).per_frame();
    if blocks == 0
        || heads == 0
        || d == 0
        || d % heads != 0
        || context < per_frame
        || context % per_frame != 0
    {
        return Err(CodecError::Format("inconsistent transformer shape".into()));
    }
    let layout = Layout::new(
        cfg.codebook_size,
        d,
        heads,
        blocks,
        context / per_frame,
        per_frame,
    );
    if layout.total != n {
        return Err(CodecError::Format(format!(
            "transformer declares {n} parameters, shape implies {}",
            layout.total
        )));
    }
    let params = (0..n).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
    if params.iter().any(|p| !p.is_finite()) {
        return Err(CodecError::Format(
            "non-finite transformer parameter".into(),
        ));
    }
    Ok(Transformer { layout, params })
}

pub fn from_bytes(data: &[u8]) -> Result<TokenModel> {
    if data.len() < 4 + 2 + 8 + 8 + 32 || &data[..4] != MODEL_MAGIC {
        return Err(CodecError::Format("not a TCM1 model file".into()));
    }
    let (body_bytes, trailer) = data.split_at(data.len() - 32);
    let id = ModelId(trailer.try_into().unwrap());
    if ModelId(Sha256::digest(body_bytes).into()) != id {
        return Err(CodecError::Format(
            "model id does not match contents".into(),
        ));
    }
    let mut c = Cursor {
        data: body_bytes,
        at: 4,
    };
    let role =
        Role::from_byte(c.u8()?).ok_or_else(|| CodecError::Format("unknown role byte".into()))?;
    let kind = c.u8()?;
    let config = CodecConfig {
        codebook_size: c.u32()? as usize,
        n_coarse: c.u8()? as usize,
        n_fine: c.u8()? as usize,
        embed_dim: c.u16()? as usize,
    };
    config.validate()?;
    let len = c.u64()? as usize;
    if len != body_bytes.len() - c.at {
        return Err(CodecError::Format("parameter blob length mismatch".into()));
    }
    let params = match kind {
        0 => ModelParams::Context(parse_context(&mut c, &config)?),
        1 => ModelParams::Transformer(parse_transformer(&mut c, &config, role)?),
        k => return Err(CodecError::Format(format!("unknown model kind {k}"))),
    };
    if !c.done() {
        return Err(CodecError::Format(
            "trailing bytes in parameter blob".into(),
        ));
    }
    let m = TokenModel {
        role,
        config,
        params,
        model_id: id,
    };
    debug_assert_eq!(compute_id(&m), id);
    Ok(m)
}

pub fn write_model(m: &TokenModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(m))?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<TokenModel> {
    from_bytes(&fs::read(path)?)
}

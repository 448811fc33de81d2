//! Binary checkpoint container.
//!
//! Layout (little-endian): `SWBC`, u32 version, u32 config length, config
//! text, u32 tensor count, then per tensor: u32 name length, name, u8 dtype
//! (0 = f32, 1 = f64), u32 rank, u32 dims, payload.

use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::masktools::{interpolate_rows_temporal, MaskGrid};
use crate::model::{CaptionModel, ParamStore, MASK_PARAM, VIDEO_POS_PARAM};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SWBC";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RestoreScope {
    All,
    MaskOnly,
}

pub fn encode(model: &CaptionModel<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config.to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in &model.params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<CaptionModel<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let config = ModelConfig::from_text(&r.string()?)?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let dtype = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match dtype {
            DTYPE_F32 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            DTYPE_F64 => r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
                .collect(),
            other => {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}`: unknown dtype {other}"
                )))
            }
        };
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let expected = crate::model::param_shapes(&config);
    if expected.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, configuration needs {}",
            params.len(),
            expected.len()
        )));
    }
    for (name, shape) in expected {
        match params.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
        }
    }
    Ok(CaptionModel { config, params })
}

pub fn save(model: &CaptionModel<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<CaptionModel<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Mask pre-activations of `source` resampled to `target_t` temporal blocks.
pub fn resample_mask(source: &CaptionModel<f32>, target_t: usize) -> Result<Tensor<f32>> {
    let grid = source.config.grid();
    let p = source.param(MASK_PARAM)?;
    if grid.t == target_t {
        return Ok(p.clone());
    }
    Ok(MaskGrid::from_logits(p, grid)?
        .interpolate_temporal(target_t)?
        .to_logits())
}

/// Copies tensors from `checkpoint` into `target`. Mask-only restores
/// resample the mask along time when only the temporal grid differs.
pub fn restore(
    checkpoint: &CaptionModel<f32>,
    scope: RestoreScope,
    target: &mut CaptionModel<f32>,
) -> Result<()> {
    match scope {
        RestoreScope::All => {
            for (name, t) in &checkpoint.params {
                let slot = target
                    .params
                    .get_mut(name)
                    .ok_or_else(|| Error::Checkpoint(format!("target has no tensor `{name}`")))?;
                if slot.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}`: checkpoint {:?} vs target {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.clone();
            }
            if checkpoint.params.len() != target.params.len() {
                return Err(Error::Checkpoint(
                    "checkpoint does not cover every target tensor".into(),
                ));
            }
            target.config = checkpoint.config.clone();
            Ok(())
        }
        RestoreScope::MaskOnly => {
            let (from, to) = (checkpoint.config.grid(), target.config.grid());
            if (from.h, from.w) != (to.h, to.w) {
                return Err(Error::Checkpoint(format!(
                    "mask spatial grid {}x{} cannot be mapped onto {}x{}",
                    from.h, from.w, to.h, to.w
                )));
            }
            let p = resample_mask(checkpoint, to.t)?;
            target.params.insert(MASK_PARAM.to_string(), p);
            Ok(())
        }
    }
}

/// The whole model moved to a new frame count: mask and video position
/// embeddings resampled along time, everything else copied.
pub fn retime(model: &CaptionModel<f32>, frames: usize) -> Result<CaptionModel<f32>> {
    let mut config = model.config.clone();
    config.frames = frames;
    config.validate()?;
    let (old, new) = (model.config.grid(), config.grid());
    let mut params = model.params.clone();
    params.insert(MASK_PARAM.to_string(), resample_mask(model, new.t)?);
    let pos = interpolate_rows_temporal(model.param(VIDEO_POS_PARAM)?, old, new.t)?;
    params.insert(VIDEO_POS_PARAM.to_string(), pos);
    Ok(CaptionModel { config, params })
}

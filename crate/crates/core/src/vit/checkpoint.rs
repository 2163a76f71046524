//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! | field | encoding |
//! |---|---|
//! | magic | `b"PVIT"` |
//! | version | `u32` (currently 1) |
//! | num_layers, embed_dim, mlp_dim, num_heads, image_size, patch_size, channels, num_classes | `u32` each |
//! | gelu_granularity | `u8`: 0 per-token, 1 per-element |
//! | attn_variant | `u8`: 0 squared, 1 scale, 2 uniform |
//! | epsilon | `f64` |
//! | gelu_frozen, softmax_frozen | `u8` each (0/1) |
//! | weights | `f64` values of every tensor in canonical [`Params`] order |
//! | gelu switches, softmax switches | `f64` values |
//!
//! Tensor lengths follow from the config, so the file carries no per-tensor
//! headers. Trailing bytes are rejected.
//!
//! [`Params`]: super::Params

use std::fs;
use std::path::Path;

use super::{
    AttentionVariant, GeluGranularity, Model, ModelConfig, ModelParams, SwitchSet, VitError,
};
use crate::autodiff::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PVIT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(model: &Model) -> Vec<u8> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(64 + 8 * model.params.num_values());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        cfg.num_layers,
        cfg.embed_dim,
        cfg.mlp_dim,
        cfg.num_heads,
        cfg.image_size,
        cfg.patch_size,
        cfg.channels,
        cfg.num_classes,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(match cfg.gelu_granularity {
        GeluGranularity::PerToken => 0,
        GeluGranularity::PerElement => 1,
    });
    out.push(match cfg.attn_variant {
        AttentionVariant::Squared => 0,
        AttentionVariant::Scale => 1,
        AttentionVariant::Uniform => 2,
    });
    let sw = &model.switches;
    out.extend_from_slice(&sw.epsilon.to_le_bytes());
    out.push(sw.gelu_frozen as u8);
    out.push(sw.softmax_frozen as u8);
    for t in model
        .params
        .refs()
        .into_iter()
        .chain([&sw.gelu, &sw.softmax])
    {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], VitError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(VitError::Checkpoint(format!(
                "truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, VitError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, VitError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, VitError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor, VitError> {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| self.f64())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Tensor::new(shape, data)?)
    }

    fn flag(&mut self, what: &str) -> Result<bool, VitError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(VitError::Checkpoint(format!("bad {what} flag {v}"))),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model, VitError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(VitError::Checkpoint(
            "bad magic, not a PVIT checkpoint".into(),
        ));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(VitError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut dims = [0usize; 8];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let gelu_granularity = match r.u8()? {
        0 => GeluGranularity::PerToken,
        1 => GeluGranularity::PerElement,
        v => return Err(VitError::Checkpoint(format!("bad granularity code {v}"))),
    };
    let attn_variant = match r.u8()? {
        0 => AttentionVariant::Squared,
        1 => AttentionVariant::Scale,
        2 => AttentionVariant::Uniform,
        v => {
            return Err(VitError::Checkpoint(format!(
                "bad attention variant code {v}"
            )))
        }
    };
    let config = ModelConfig {
        num_layers: dims[0],
        embed_dim: dims[1],
        mlp_dim: dims[2],
        num_heads: dims[3],
        image_size: dims[4],
        patch_size: dims[5],
        channels: dims[6],
        num_classes: dims[7],
        gelu_granularity,
        attn_variant,
    };
    config.validate()?;
    let epsilon = r.f64()?;
    let gelu_frozen = r.flag("gelu_frozen")?;
    let softmax_frozen = r.flag("softmax_frozen")?;

    let shapes = ModelParams::shapes(&config);
    let tensors = shapes
        .refs()
        .into_iter()
        .map(|s| r.tensor(s))
        .collect::<Result<Vec<_>, _>>()?;
    let params = ModelParams::from_flat(config.num_layers, tensors);
    let switches = SwitchSet {
        gelu: r.tensor(&config.gelu_switch_shape())?,
        softmax: r.tensor(&config.softmax_switch_shape())?,
        epsilon,
        gelu_frozen,
        softmax_frozen,
    };
    if r.pos != bytes.len() {
        return Err(VitError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Model {
        config,
        params,
        switches,
    })
}

pub fn write_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), VitError> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Model, VitError> {
    decode(&fs::read(path)?)
}

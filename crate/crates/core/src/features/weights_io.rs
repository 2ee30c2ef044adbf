//! Binary weight file for the conv stack.
//!
//! Little-endian layout:
//!   magic  b"CVWT"
//!   u32    version (1)
//!   u32    layer count
//!   per layer: u32 kernel_h, kernel_w, in_channels, out_channels, stride;
//!              u8 flags (bit 0 max-pool, bit 1 rectifier)
//!   f64    weights in layer order, each kernel row-major [out][in][ky][kx]
//!
//! Round trips are bit-exact: reals are stored as raw IEEE-754 bits.

use crate::error::{Error, Result};
use crate::features::conv::{ConvLayerSpec, ConvStackSpec, ConvWeights};
use std::io::{Read, Write};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"CVWT";
pub const WEIGHTS_VERSION: u32 = 1;

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

/// Write a spec descriptor plus raw weights.
pub fn write_weights<W: Write>(
    w: &mut W,
    spec: &ConvStackSpec,
    weights: &ConvWeights,
) -> Result<()> {
    weights.matches(spec)?;
    w.write_all(&WEIGHTS_MAGIC)?;
    write_u32(w, WEIGHTS_VERSION)?;
    write_u32(w, spec.layers.len() as u32)?;
    for layer in &spec.layers {
        for v in [
            layer.kernel_h,
            layer.kernel_w,
            layer.in_channels,
            layer.out_channels,
            layer.stride,
        ] {
            write_u32(w, v as u32)?;
        }
        let flags = (layer.max_pool as u8) | ((layer.relu as u8) << 1);
        w.write_all(&[flags])?;
    }
    for kernel in &weights.kernels {
        for &v in kernel.iter() {
            write_f64(w, v)?;
        }
    }
    Ok(())
}

/// Read a weight file written by [`write_weights`].
pub fn read_weights<R: Read>(r: &mut R) -> Result<(ConvStackSpec, ConvWeights)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != WEIGHTS_MAGIC {
        return Err(Error::Format("not a weight file (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported weight version {version}")));
    }
    let layer_count = read_u32(r)? as usize;
    if layer_count == 0 || layer_count > 64 {
        return Err(Error::Format(format!("implausible layer count {layer_count}")));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let kernel_h = read_u32(r)? as usize;
        let kernel_w = read_u32(r)? as usize;
        let in_channels = read_u32(r)? as usize;
        let out_channels = read_u32(r)? as usize;
        let stride = read_u32(r)? as usize;
        let mut flags = [0u8; 1];
        r.read_exact(&mut flags)?;
        layers.push(ConvLayerSpec {
            kernel_h,
            kernel_w,
            in_channels,
            out_channels,
            stride,
            max_pool: flags[0] & 1 != 0,
            relu: flags[0] & 2 != 0,
        });
    }
    let spec = ConvStackSpec { layers };
    spec.validate()?;
    let mut weights = ConvWeights::zeros(&spec);
    for kernel in weights.kernels.iter_mut() {
        for v in kernel.iter_mut() {
            *v = read_f64(r)?;
        }
    }
    Ok((spec, weights))
}

//! Raw flow dump: `PIEH`, little-endian `i32` width and height, then
//! row-major `f32` (dx, dy) pairs.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PIEH";

/// Writes the first field of a `(N, 2, H, W)` flow tensor.
pub fn write_flo(path: &Path, flow: &Tensor) -> Result<()> {
    let (_, c, h, w) = flow.dims4()?;
    if c != 2 {
        return Err(Error::Shape(format!("flow with {c} channels")));
    }
    let planes = flow.get(0)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut buf = Vec::with_capacity(12 + 8 * h * w);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(w as i32).to_le_bytes());
    buf.extend_from_slice(&(h as i32).to_le_bytes());
    for i in 0..h * w {
        buf.extend_from_slice(&planes[i].to_le_bytes());
        buf.extend_from_slice(&planes[h * w + i].to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a flow dump into a `(1, 2, H, W)` tensor.
pub fn read_flo(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::InvalidArgument(format!("{} is not a flow dump", path.display())));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 {
        return Err(Error::InvalidArgument(format!("bad flow size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 12 + 8 * w * h {
        return Err(Error::InvalidArgument("truncated flow dump".into()));
    }
    let mut planes = vec![0f32; 2 * w * h];
    for (i, pair) in bytes[12..].chunks_exact(8).enumerate() {
        planes[i] = f32::from_le_bytes(pair[..4].try_into().unwrap());
        planes[w * h + i] = f32::from_le_bytes(pair[4..].try_into().unwrap());
    }
    Ok(Tensor::from_vec(planes, (1, 2, h, w), &Device::Cpu)?)
}

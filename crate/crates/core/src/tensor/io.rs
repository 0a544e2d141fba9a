//! Tensor (de)serialization.
//!
//! Layout: 8 magic bytes `AVTNSR1\0`, rank as u32 LE, then one u64 LE per
//! dimension, then the row-major payload as IEEE-754 f32 LE. In-memory math
//! is f64; the payload narrows to f32 at the boundary.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AVTNSR1\0";

/// Refuse to allocate for obviously corrupt headers.
const MAX_ELEMENTS: u64 = 1 << 33;

pub fn write_tensor_to(w: &mut impl Write, t: &Tensor, label: &str) -> Result<()> {
    let io_err = |e| Error::io(label, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&(t.rank() as u32).to_le_bytes()).map_err(io_err)?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf).map_err(io_err)
}

pub fn read_tensor_from(r: &mut impl Read, label: &str) -> Result<Tensor> {
    let io_err = |e| Error::io(label, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::parse(label, None, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let mut rank_buf = [0u8; 4];
    r.read_exact(&mut rank_buf).map_err(io_err)?;
    let rank = u32::from_le_bytes(rank_buf) as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::parse(label, None, format!("unreasonable rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let mut dim_buf = [0u8; 8];
        r.read_exact(&mut dim_buf).map_err(io_err)?;
        let d = u64::from_le_bytes(dim_buf);
        numel = numel.saturating_mul(d.max(1));
        if numel > MAX_ELEMENTS {
            return Err(Error::parse(label, None, format!("element count overflows: {shape:?} x {d}")));
        }
        shape.push(d as usize);
    }
    let count: usize = shape.iter().product();
    let mut payload = vec![0u8; count * 4];
    r.read_exact(&mut payload).map_err(|e| {
        Error::parse(label, None, format!("payload truncated ({count} f32 expected): {e}"))
    })?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    write_tensor_to(&mut f, t, &path.display().to_string())?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::io(path, e))?,
    );
    let t = read_tensor_from(&mut f, &path.display().to_string())?;
    // Trailing garbage means the file is not a bare tensor.
    let mut probe = [0u8; 1];
    match f.read(&mut probe) {
        Ok(0) => Ok(t),
        Ok(_) => Err(Error::parse(
            path.display().to_string(),
            None,
            "trailing bytes after tensor payload",
        )),
        Err(e) => Err(Error::io(path, e)),
    }
}

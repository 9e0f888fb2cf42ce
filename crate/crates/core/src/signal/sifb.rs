//! SIFB feature files.
//!
//! | offset | bytes | content |
//! |--------|-------|---------|
//! | 0      | 4     | magic `SIFB` |
//! | 4      | 4     | version `u32` = 1 |
//! | 8      | 4     | dtype `u32`, 0 = 32-bit float little-endian |
//! | 12     | 4     | `n_dims` `u32`, 2 (`[frames, dim]`) or 3 (`[layers, frames, dim]`) |
//! | 16     | 8·n   | dims as `u64` |
//! | 16+8n  | ...   | row-major payload |
//!
//! All integers are little-endian.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIFB_MAGIC: &[u8; 4] = b"SIFB";
pub const SIFB_VERSION: u32 = 1;
pub const SIFB_DTYPE_F32: u32 = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureHeader {
    pub dims: Vec<usize>,
    /// Byte offset of the first payload value.
    pub payload_offset: u64,
}

impl FeatureHeader {
    pub fn layers(&self) -> Option<usize> {
        (self.dims.len() == 3).then(|| self.dims[0])
    }

    pub fn frames(&self) -> usize {
        self.dims[self.dims.len() - 2]
    }

    pub fn dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    fn payload_bytes(&self) -> u64 {
        4 * self.dims.iter().map(|&d| d as u64).product::<u64>()
    }
}

fn u32_at(buf: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(buf[off..off + 4].try_into().unwrap())
}

fn parse_header(file: &mut File, path: &Path) -> Result<FeatureHeader> {
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut fixed = [0u8; 16];
    read_exact_at(file, path, &mut fixed, 0, file_len)?;
    if &fixed[..4] != SIFB_MAGIC {
        return Err(Error::format(0, "bad magic, not a SIFB file"));
    }
    let version = u32_at(&fixed, 4);
    if version != SIFB_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let dtype = u32_at(&fixed, 8);
    if dtype != SIFB_DTYPE_F32 {
        return Err(Error::format(8, format!("unsupported dtype code {dtype}")));
    }
    let n_dims = u32_at(&fixed, 12);
    if !(2..=3).contains(&n_dims) {
        return Err(Error::format(12, format!("n_dims must be 2 or 3, got {n_dims}")));
    }
    let mut raw = vec![0u8; 8 * n_dims as usize];
    read_exact_at(file, path, &mut raw, 16, file_len)?;
    let mut dims = Vec::with_capacity(n_dims as usize);
    for (i, c) in raw.chunks_exact(8).enumerate() {
        let d = u64::from_le_bytes(c.try_into().unwrap());
        if d == 0 || d > u32::MAX as u64 {
            return Err(Error::format(16 + 8 * i as u64, format!("invalid dimension {d}")));
        }
        dims.push(d as usize);
    }
    let header = FeatureHeader {
        dims,
        payload_offset: 16 + 8 * n_dims as u64,
    };
    let have = file_len - header.payload_offset;
    if have != header.payload_bytes() {
        return Err(Error::format(
            header.payload_offset,
            format!(
                "payload is {have} bytes but dims {:?} need {}",
                header.dims,
                header.payload_bytes()
            ),
        ));
    }
    Ok(header)
}

fn read_exact_at(file: &mut File, path: &Path, buf: &mut [u8], off: u64, file_len: u64) -> Result<()> {
    if off + buf.len() as u64 > file_len {
        return Err(Error::format(file_len, "file ends inside the header"));
    }
    file.seek(SeekFrom::Start(off)).map_err(|e| Error::io(path, e))?;
    file.read_exact(buf).map_err(|e| Error::io(path, e))
}

/// Validate a file's header and length without reading the payload.
pub fn read_feature_header(path: &Path) -> Result<FeatureHeader> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_header(&mut f, path)
}

/// Read a whole file, or with `layer` one `[frames × dim]` slice of a 3-D
/// file.
pub fn read_feature_file(path: &Path, layer: Option<usize>) -> Result<Tensor<f32>> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let h = parse_header(&mut f, path)?;
    let (shape, start, count) = match (layer, h.layers()) {
        (None, _) => (h.dims.clone(), h.payload_offset, h.payload_bytes() as usize / 4),
        (Some(l), Some(n)) => {
            if l >= n {
                return Err(Error::contract(format!(
                    "layer index {l} out of range for a file with {n} layers"
                )));
            }
            let slab = h.frames() * h.dim();
            (
                vec![h.frames(), h.dim()],
                h.payload_offset + 4 * (l * slab) as u64,
                slab,
            )
        }
        (Some(l), None) => {
            return Err(Error::contract(format!(
                "layer {l} requested from a 2-D file {}",
                path.display()
            )))
        }
    };
    let mut bytes = vec![0u8; 4 * count];
    f.seek(SeekFrom::Start(start)).map_err(|e| Error::io(path, e))?;
    f.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_feature_file(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let dims = t.shape();
    if !(2..=3).contains(&dims.len()) {
        return Err(Error::contract(format!(
            "feature files hold 2-D or 3-D tensors, got shape {dims:?}"
        )));
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut head = Vec::with_capacity(16 + 8 * dims.len());
    head.extend_from_slice(SIFB_MAGIC);
    head.extend_from_slice(&SIFB_VERSION.to_le_bytes());
    head.extend_from_slice(&SIFB_DTYPE_F32.to_le_bytes());
    head.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        head.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let io = |e| Error::io(path, e);
    w.write_all(&head).map_err(io)?;
    for &x in t.data() {
        w.write_all(&x.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

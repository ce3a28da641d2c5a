//! Binary file formats: network checkpoints, gate caches, datasets.
//!
//! All multi-byte values are little-endian; matrix blocks are `f64`
//! row-major. Errors report the exact byte offset at which decoding failed.
//!
//! - Checkpoint (`GRNW`): magic, `u32` version = 1, `u32` flags (bit 0 set
//!   when the gate-chain blocks are omitted, i.e. a plain ReLU net), shape as
//!   4 x `u64` (`d_x`, `d_y`, `m`, `depth`), then `C`, `B`, `Psi_1..Psi_L`
//!   (unless omitted), `W_1..W_L`.
//! - Gate cache (`GRGP`): magic, `u64` `n`, `u64` layer count (`L + 1`),
//!   `u64` `m`, then bit-packed masks padded to byte boundaries.
//! - Dataset (`GRND`): magic, `u32` version = 1, `u64` `n`, `u64` `d_x`,
//!   `u64` `d_y`, `f64` label scale, then `X` and `Y`.

use grelu_core::data::Dataset;
use grelu_core::matrix::Matrix;
use grelu_core::model::{GReluNetwork, GatePattern, NetworkShape, ReluNetwork};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const NETWORK_MAGIC: &[u8; 4] = b"GRNW";
const GATES_MAGIC: &[u8; 4] = b"GRGP";
const DATASET_MAGIC: &[u8; 4] = b"GRND";
const FORMAT_VERSION: u32 = 1;
const FLAG_PSI_OMITTED: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic at byte {offset}: expected {expected}")]
    BadMagic { offset: u64, expected: &'static str },
    #[error("unsupported version {got} at byte {offset}")]
    UnsupportedVersion { offset: u64, got: u32 },
    #[error("file truncated at byte {offset}")]
    Truncated { offset: u64 },
    #[error("trailing bytes after byte {offset}")]
    TrailingBytes { offset: u64 },
    #[error("invalid field at byte {offset}: {what}")]
    Invalid { offset: u64, what: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reader wrapper that tracks the byte offset for error reporting.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn new(inner: R) -> Self {
        Cursor { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), FormatError> {
        let start = self.offset;
        let mut filled = 0;
        while filled < buf.len() {
            let n = self.inner.read(&mut buf[filled..])?;
            if n == 0 {
                return Err(FormatError::Truncated { offset: start + filled as u64 });
            }
            filled += n;
            self.offset += n as u64;
        }
        Ok(())
    }

    fn read_u32(&mut self) -> Result<u32, FormatError> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u64(&mut self) -> Result<u64, FormatError> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn read_f64(&mut self) -> Result<f64, FormatError> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn read_usize(&mut self, what: &str) -> Result<usize, FormatError> {
        let offset = self.offset;
        let v = self.read_u64()?;
        usize::try_from(v)
            .map_err(|_| FormatError::Invalid { offset, what: format!("{what} = {v} overflows") })
    }

    fn expect_magic(&mut self, magic: &'static [u8; 4], name: &'static str) -> Result<(), FormatError> {
        let offset = self.offset;
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        if &b != magic {
            return Err(FormatError::BadMagic { offset, expected: name });
        }
        Ok(())
    }

    fn expect_version(&mut self) -> Result<(), FormatError> {
        let offset = self.offset;
        let v = self.read_u32()?;
        if v != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion { offset, got: v });
        }
        Ok(())
    }

    fn read_matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix, FormatError> {
        let mut m = Matrix::zeros(rows, cols);
        let offset = self.offset;
        let data = m.data_mut();
        // Bulk read, then decode.
        let mut bytes = vec![0u8; rows * cols * 8];
        self.read_exact(&mut bytes)?;
        for (i, chunk) in bytes.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(FormatError::Invalid {
                    offset: offset + 8 * i as u64,
                    what: format!("non-finite matrix entry {v}"),
                });
            }
            data[i] = v;
        }
        Ok(m)
    }

    fn expect_eof(&mut self) -> Result<(), FormatError> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(FormatError::TrailingBytes { offset: self.offset }),
        }
    }
}

fn write_matrix(w: &mut impl Write, m: &Matrix) -> std::io::Result<()> {
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Either kind of network a checkpoint can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum NetworkCheckpoint {
    Grelu(GReluNetwork),
    Relu(ReluNetwork),
}

impl NetworkCheckpoint {
    pub fn shape(&self) -> NetworkShape {
        match self {
            NetworkCheckpoint::Grelu(n) => n.shape,
            NetworkCheckpoint::Relu(n) => n.shape,
        }
    }
}

pub fn write_network(w: &mut impl Write, net: &NetworkCheckpoint) -> std::io::Result<()> {
    let (shape, c, b, psi, weights) = match net {
        NetworkCheckpoint::Grelu(n) => (n.shape, &n.c, &n.b, Some(&n.psi), &n.w),
        NetworkCheckpoint::Relu(n) => (n.shape, &n.c, &n.b, None, &n.w),
    };
    w.write_all(NETWORK_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let flags = if psi.is_none() { FLAG_PSI_OMITTED } else { 0 };
    w.write_all(&flags.to_le_bytes())?;
    for dim in [shape.d_x, shape.d_y, shape.m, shape.depth] {
        w.write_all(&(dim as u64).to_le_bytes())?;
    }
    write_matrix(w, c)?;
    write_matrix(w, b)?;
    if let Some(psi) = psi {
        for p in psi {
            write_matrix(w, p)?;
        }
    }
    for layer in weights {
        write_matrix(w, layer)?;
    }
    Ok(())
}

pub fn read_network(r: impl Read) -> Result<NetworkCheckpoint, FormatError> {
    let mut c = Cursor::new(r);
    c.expect_magic(NETWORK_MAGIC, "GRNW")?;
    c.expect_version()?;
    let flags_offset = c.offset;
    let flags = c.read_u32()?;
    if flags & !FLAG_PSI_OMITTED != 0 {
        return Err(FormatError::Invalid {
            offset: flags_offset,
            what: format!("unknown flag bits {flags:#x}"),
        });
    }
    let shape_offset = c.offset;
    let d_x = c.read_usize("d_x")?;
    let d_y = c.read_usize("d_y")?;
    let m = c.read_usize("m")?;
    let depth = c.read_usize("depth")?;
    if d_x == 0 || d_y == 0 || m == 0 || depth == 0 {
        return Err(FormatError::Invalid { offset: shape_offset, what: "zero shape field".into() });
    }
    let shape = NetworkShape::new(d_x, d_y, m, depth);
    let cmat = c.read_matrix(m, d_x)?;
    let bmat = c.read_matrix(d_y, m)?;
    let psi = if flags & FLAG_PSI_OMITTED == 0 {
        Some((0..depth).map(|_| c.read_matrix(m, m)).collect::<Result<Vec<_>, _>>()?)
    } else {
        None
    };
    let w = (0..depth).map(|_| c.read_matrix(m, m)).collect::<Result<Vec<_>, _>>()?;
    c.expect_eof()?;
    Ok(match psi {
        Some(psi) => {
            NetworkCheckpoint::Grelu(GReluNetwork { shape, c: cmat, b: bmat, psi, w })
        }
        None => NetworkCheckpoint::Relu(ReluNetwork::from_parts(shape, cmat, bmat, w)),
    })
}

pub fn write_gates(w: &mut impl Write, gates: &GatePattern) -> std::io::Result<()> {
    w.write_all(GATES_MAGIC)?;
    for v in [gates.examples(), gates.layers(), gates.width()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&gates.pack_bytes())?;
    Ok(())
}

pub fn read_gates(r: impl Read) -> Result<GatePattern, FormatError> {
    let mut c = Cursor::new(r);
    c.expect_magic(GATES_MAGIC, "GRGP")?;
    let header_offset = c.offset;
    let n = c.read_usize("n")?;
    let layers = c.read_usize("layers")?;
    let m = c.read_usize("m")?;
    let bytes_per_mask = m.div_ceil(8);
    let total = n
        .checked_mul(layers)
        .and_then(|v| v.checked_mul(bytes_per_mask))
        .ok_or(FormatError::Invalid { offset: header_offset, what: "mask size overflows".into() })?;
    let mut bytes = vec![0u8; total];
    let payload_offset = c.offset;
    c.read_exact(&mut bytes)?;
    c.expect_eof()?;
    GatePattern::unpack_bytes(n, layers, m, &bytes).ok_or(FormatError::Invalid {
        offset: payload_offset,
        what: "mask payload inconsistent with header".into(),
    })
}

pub fn write_dataset(w: &mut impl Write, ds: &Dataset) -> std::io::Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for v in [ds.n(), ds.d_x(), ds.d_y()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&ds.label_scale.to_le_bytes())?;
    write_matrix(w, &ds.x)?;
    write_matrix(w, &ds.y)
}

pub fn read_dataset(r: impl Read) -> Result<Dataset, FormatError> {
    let mut c = Cursor::new(r);
    c.expect_magic(DATASET_MAGIC, "GRND")?;
    c.expect_version()?;
    let header_offset = c.offset;
    let n = c.read_usize("n")?;
    let d_x = c.read_usize("d_x")?;
    let d_y = c.read_usize("d_y")?;
    let scale_offset = c.offset;
    let label_scale = c.read_f64()?;
    if !label_scale.is_finite() {
        return Err(FormatError::Invalid { offset: scale_offset, what: "non-finite label scale".into() });
    }
    let x = c.read_matrix(n, d_x)?;
    let y = c.read_matrix(n, d_y)?;
    c.expect_eof()?;
    Dataset::from_parts(x, y, label_scale)
        .map_err(|e| FormatError::Invalid { offset: header_offset, what: e.to_string() })
}

pub fn save_network(path: &Path, net: &NetworkCheckpoint) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_network(&mut w, net)?;
    Ok(w.flush()?)
}

pub fn load_network(path: &Path) -> Result<NetworkCheckpoint, FormatError> {
    read_network(BufReader::new(File::open(path)?))
}

pub fn save_gates(path: &Path, gates: &GatePattern) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_gates(&mut w, gates)?;
    Ok(w.flush()?)
}

pub fn load_gates(path: &Path) -> Result<GatePattern, FormatError> {
    read_gates(BufReader::new(File::open(path)?))
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, ds)?;
    Ok(w.flush()?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, FormatError> {
    read_dataset(BufReader::new(File::open(path)?))
}

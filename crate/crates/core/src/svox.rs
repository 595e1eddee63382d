//! SVOX binary serialization for dense volumes and sparse voxel sets.
//!
//! Layout (little-endian, no padding):
//! - magic `"SVX1"` (4 bytes)
//! - kind `u8`: 0 = dense, 1 = sparse
//! - resolution `u32`
//! - dense: `R^3` `f32` values, row-major (x slowest)
//! - sparse: tau `f32`, count `u64`, `count * 3` `u16` coordinates in
//!   lexicographic order, then `count` `f32` sdf values
//!
//! Storage is `f32`; the in-memory `f32` aliases round-trip bit-exactly.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::volume::{SdfVolume, SparseVoxelSet, VolumeError};

pub const MAGIC: [u8; 4] = *b"SVX1";
pub const KIND_DENSE: u8 = 0;
pub const KIND_SPARSE: u8 = 1;

#[derive(Debug, Error)]
pub enum SvoxError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {found:?} at byte offset 0 (expected {MAGIC:?})")]
    BadMagic { found: [u8; 4] },
    #[error("unknown kind {kind} at byte offset {offset}")]
    UnknownKind { kind: u8, offset: u64 },
    #[error("truncated payload at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: u64, needed: usize },
    #[error("trailing {extra} bytes after payload at byte offset {offset}")]
    TrailingBytes { offset: u64, extra: usize },
    #[error("coordinate component {0} exceeds u16 range")]
    CoordTooLarge(u32),
    #[error("invalid payload: {0}")]
    Invalid(#[from] VolumeError),
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), SvoxError> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(SvoxError::Truncated {
                        offset: self.offset + filled as u64,
                        needed: buf.len() - filled,
                    })
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self) -> Result<u8, SvoxError> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b)?;
        Ok(b[0])
    }

    fn u16(&mut self) -> Result<u16, SvoxError> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32, SvoxError> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64, SvoxError> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f32(&mut self) -> Result<f32, SvoxError> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    fn expect_eof(&mut self) -> Result<(), SvoxError> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            n => Err(SvoxError::TrailingBytes {
                offset: self.offset,
                extra: n,
            }),
        }
    }
}

fn read_header<R: Read>(cur: &mut Cursor<R>, expect_kind: u8) -> Result<u32, SvoxError> {
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(SvoxError::BadMagic { found: magic });
    }
    let kind = cur.u8()?;
    if kind != expect_kind {
        return Err(SvoxError::UnknownKind { kind, offset: 4 });
    }
    cur.u32()
}

pub fn write_volume<W: Write>(volume: &SdfVolume<f32>, mut w: W) -> Result<(), SvoxError> {
    w.write_all(&MAGIC)?;
    w.write_all(&[KIND_DENSE])?;
    w.write_all(&volume.resolution().to_le_bytes())?;
    for &v in volume.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_volume<R: Read>(r: R) -> Result<SdfVolume<f32>, SvoxError> {
    let mut cur = Cursor {
        inner: r,
        offset: 0,
    };
    let resolution = read_header(&mut cur, KIND_DENSE)?;
    let n = (resolution as usize)
        .checked_pow(3)
        .ok_or(VolumeError::BadResolution(resolution))?;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(cur.f32()?);
    }
    cur.expect_eof()?;
    Ok(SdfVolume::new(resolution, values)?)
}

pub fn write_sparse<W: Write>(set: &SparseVoxelSet<f32>, mut w: W) -> Result<(), SvoxError> {
    w.write_all(&MAGIC)?;
    w.write_all(&[KIND_SPARSE])?;
    w.write_all(&set.resolution().to_le_bytes())?;
    w.write_all(&set.tau().to_le_bytes())?;
    w.write_all(&(set.len() as u64).to_le_bytes())?;
    for c in set.coords() {
        for &x in c {
            let x16 = u16::try_from(x).map_err(|_| SvoxError::CoordTooLarge(x))?;
            w.write_all(&x16.to_le_bytes())?;
        }
    }
    for &s in set.sdf() {
        w.write_all(&s.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_sparse<R: Read>(r: R) -> Result<SparseVoxelSet<f32>, SvoxError> {
    let mut cur = Cursor {
        inner: r,
        offset: 0,
    };
    let resolution = read_header(&mut cur, KIND_SPARSE)?;
    let tau = cur.f32()?;
    let count = cur.u64()? as usize;
    let mut coords = Vec::with_capacity(count);
    for _ in 0..count {
        let c = [cur.u16()? as u32, cur.u16()? as u32, cur.u16()? as u32];
        coords.push(c);
    }
    let mut sdf = Vec::with_capacity(count);
    for _ in 0..count {
        sdf.push(cur.f32()?);
    }
    cur.expect_eof()?;
    Ok(SparseVoxelSet::new(resolution, tau, coords, sdf)?)
}

pub fn write_volume_file(volume: &SdfVolume<f32>, path: &Path) -> Result<(), SvoxError> {
    write_volume(volume, io::BufWriter::new(File::create(path)?))
}

pub fn read_volume_file(path: &Path) -> Result<SdfVolume<f32>, SvoxError> {
    read_volume(io::BufReader::new(File::open(path)?))
}

pub fn write_sparse_file(set: &SparseVoxelSet<f32>, path: &Path) -> Result<(), SvoxError> {
    write_sparse(set, io::BufWriter::new(File::create(path)?))
}

pub fn read_sparse_file(path: &Path) -> Result<SparseVoxelSet<f32>, SvoxError> {
    read_sparse(io::BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{analytic_sdf, extract_active_voxels, ShapeSpec};

    fn roundtrip_sparse(set: &SparseVoxelSet<f32>) -> SparseVoxelSet<f32> {
        let mut buf = Vec::new();
        write_sparse(set, &mut buf).unwrap();
        read_sparse(&buf[..]).unwrap()
    }

    #[test]
    fn empty_sparse_roundtrips() {
        let set = SparseVoxelSet::new(16, 0.01f32, vec![], vec![]).unwrap();
        let back = roundtrip_sparse(&set);
        assert_eq!(back.len(), 0);
        assert_eq!(back.resolution(), 16);
    }

    #[test]
    fn three_voxel_roundtrip() {
        let set = SparseVoxelSet::new(
            8,
            0.5f32,
            vec![[0, 0, 1], [0, 2, 0], [7, 7, 7]],
            vec![0.25, -0.125, 0.0],
        )
        .unwrap();
        assert_eq!(roundtrip_sparse(&set), set);
    }

    #[test]
    fn serialization_is_deterministic() {
        let vol = analytic_sdf::<f32>(&ShapeSpec::sphere([0.0; 3], 0.5), 64).unwrap();
        let set = extract_active_voxels(&vol, 1.0 / 128.0).unwrap();
        assert!(set.len() > 1000);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_sparse(&set, &mut a).unwrap();
        write_sparse(&set, &mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(roundtrip_sparse(&set), set);
    }

    #[test]
    fn dense_roundtrip() {
        let vol = analytic_sdf::<f32>(&ShapeSpec::sphere([0.0; 3], 0.4), 8).unwrap();
        let mut buf = Vec::new();
        write_volume(&vol, &mut buf).unwrap();
        assert_eq!(read_volume(&buf[..]).unwrap(), vol);
    }

    #[test]
    fn bad_magic_reported() {
        let err = read_volume(&b"NOPE\x00"[..]).unwrap_err();
        assert!(matches!(err, SvoxError::BadMagic { found } if &found == b"NOPE"));
    }

    #[test]
    fn unknown_kind_reports_offset() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.push(7);
        buf.extend_from_slice(&4u32.to_le_bytes());
        let err = read_volume(&buf[..]).unwrap_err();
        assert!(matches!(err, SvoxError::UnknownKind { kind: 7, offset: 4 }));
    }

    #[test]
    fn truncation_reports_offset() {
        let vol = analytic_sdf::<f32>(&ShapeSpec::sphere([0.0; 3], 0.4), 4).unwrap();
        let mut buf = Vec::new();
        write_volume(&vol, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_volume(&buf[..]).unwrap_err();
        match err {
            SvoxError::Truncated { offset, .. } => assert_eq!(offset, buf.len() as u64),
            other => panic!("unexpected error {other:?}"),
        }
    }
}

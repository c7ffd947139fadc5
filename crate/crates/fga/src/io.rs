//! Little-endian primitives shared by the FGAT/FGAD/FGAC binary formats.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{FgaError, Result};

pub(crate) fn write_u8<W: Write>(w: &mut W, path: &Path, v: u8) -> Result<()> {
    w.write_all(&[v]).map_err(|e| FgaError::io(path, e))
}

pub(crate) fn write_u16<W: Write>(w: &mut W, path: &Path, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| FgaError::io(path, e))
}

pub(crate) fn write_u32<W: Write>(w: &mut W, path: &Path, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| FgaError::io(path, e))
}

pub(crate) fn write_f64<W: Write>(w: &mut W, path: &Path, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| FgaError::io(path, e))
}

pub(crate) fn write_bytes<W: Write>(w: &mut W, path: &Path, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes).map_err(|e| FgaError::io(path, e))
}

pub(crate) fn read_exact<R: Read>(r: &mut R, path: &Path, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| FgaError::io(path, e))
}

pub(crate) fn read_u8<R: Read>(r: &mut R, path: &Path) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, path, &mut b)?;
    Ok(b[0])
}

pub(crate) fn read_u16<R: Read>(r: &mut R, path: &Path) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, path, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, path, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R, path: &Path) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, path, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn expect_magic<R: Read>(
    r: &mut R,
    path: &Path,
    format: &'static str,
    magic: &[u8; 4],
) -> Result<()> {
    let mut b = [0u8; 4];
    read_exact(r, path, &mut b)?;
    if &b != magic {
        return Err(FgaError::format(
            format,
            path,
            format!("bad magic {:?}, expected {:?}", b, magic),
        ));
    }
    Ok(())
}

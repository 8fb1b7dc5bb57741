//! Little-endian primitives shared by the binary containers (`SSNS`, `SSW1`, `SSF1`, `SSE1`).

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) fn write_header<W: Write>(w: &mut W, magic: &[u8; 4], version: u32) -> Result<()> {
    w.write_all(magic)?;
    write_u32(w, version)
}

/// Checks the magic and returns the version, rejecting versions above `max_version`.
pub(crate) fn read_header<R: Read>(r: &mut R, magic: &[u8; 4], max_version: u32) -> Result<u32> {
    let mut got = [0u8; 4];
    read_exact(r, &mut got, "magic")?;
    if &got != magic {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u32(r)?;
    if version == 0 || version > max_version {
        return Err(Error::format(format!("unsupported container version {version}")));
    }
    Ok(version)
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, "u32 field")?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, vals: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n.checked_mul(4).ok_or_else(|| Error::format("payload too large"))?];
    read_exact(r, &mut buf, "f32 payload")?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub(crate) fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    write_u32(w, bytes.len() as u32)?;
    w.write_all(bytes)?;
    Ok(())
}

pub(crate) fn read_bytes<R: Read>(r: &mut R, limit: usize) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    if n > limit {
        return Err(Error::format(format!("length field {n} exceeds limit {limit}")));
    }
    let mut buf = vec![0u8; n];
    read_exact(r, &mut buf, "byte string")?;
    Ok(buf)
}

/// Fails with a format error if any bytes remain.
pub(crate) fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => Err(Error::format("trailing bytes after payload")),
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(format!("truncated file while reading {what}")),
        _ => Error::Io(e),
    })
}

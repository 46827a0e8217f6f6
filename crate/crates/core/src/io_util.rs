//! Little-endian binary IO helpers shared by the container formats.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, VocaError};

pub fn write_u32<W: Write + ?Sized>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_i32<W: Write + ?Sized>(w: &mut W, v: i32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f32<W: Write + ?Sized>(w: &mut W, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f32_slice<W: Write + ?Sized>(w: &mut W, vs: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 4);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Length-prefixed UTF-8 string (u32 byte count, then bytes).
pub fn write_str<W: Write + ?Sized>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_u32<R: Read + ?Sized>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_i32<R: Read + ?Sized>(r: &mut R) -> Result<i32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(i32::from_le_bytes(b))
}

pub fn read_f32<R: Read + ?Sized>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

pub fn read_f32_vec<R: Read + ?Sized>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    let mut out = Vec::with_capacity(n);
    for chunk in buf.chunks_exact(4) {
        out.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Ok(out)
}

pub fn read_str<R: Read + ?Sized>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(VocaError::Format(format!("string length {} is implausible", len)));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| VocaError::Format("string is not valid UTF-8".into()))
}

/// Check a 4-byte magic tag at the reader's current position.
pub fn expect_magic<R: Read + ?Sized>(r: &mut R, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    if &b != magic {
        return Err(VocaError::Format(format!(
            "{}: bad magic {:?}, expected {:?}",
            what,
            String::from_utf8_lossy(&b),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

/// Write a file atomically: serialize to a sibling temp file, then rename.
pub fn atomic_write(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| VocaError::Parameter(format!("path {:?} has no file name", path)))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        write(&mut f)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn round_trip_primitives() {
        let mut buf = Vec::new();
        write_u32(&mut buf, 0xdeadbeef).unwrap();
        write_i32(&mut buf, -7).unwrap();
        write_f32(&mut buf, 1.5).unwrap();
        write_str(&mut buf, "jaw").unwrap();
        write_f32_slice(&mut buf, &[0.25, -0.5]).unwrap();

        let mut r = Cursor::new(buf);
        assert_eq!(read_u32(&mut r).unwrap(), 0xdeadbeef);
        assert_eq!(read_i32(&mut r).unwrap(), -7);
        assert_eq!(read_f32(&mut r).unwrap(), 1.5);
        assert_eq!(read_str(&mut r).unwrap(), "jaw");
        assert_eq!(read_f32_vec(&mut r, 2).unwrap(), vec![0.25, -0.5]);
    }

    #[test]
    fn magic_mismatch_is_error() {
        let mut r = Cursor::new(b"VMSQ".to_vec());
        assert!(expect_magic(&mut r, b"VFEA", "test").is_err());
    }
}

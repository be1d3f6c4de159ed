//! The `ANLG` scan container.
//!
//! Little-endian layout: magic `ANLG`, version `u32`, scan count `u64`,
//! height `u32`, width `u32`, then per scan a timestamp `i64` followed by
//! `height * width` `f32` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::ScanGrid;

pub const MAGIC: &[u8; 4] = b"ANLG";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 8 + 4 + 4;

pub fn write_scans<W: Write>(mut w: W, scans: &[ScanGrid]) -> Result<()> {
    let (height, width) = scans.first().map(|s| s.shape()).unwrap_or((0, 0));
    if let Some(bad) = scans.iter().find(|s| s.shape() != (height, width)) {
        return Err(Error::shape(
            format!("{height}x{width}"),
            format!("{}x{}", bad.height(), bad.width()),
        ));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(scans.len() as u64).to_le_bytes())?;
    w.write_all(&(height as u32).to_le_bytes())?;
    w.write_all(&(width as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(8 + 4 * height * width);
    for scan in scans {
        buf.clear();
        buf.extend_from_slice(&scan.timestamp.to_le_bytes());
        for v in scan.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scans<R: Read>(mut r: R) -> Result<Vec<ScanGrid>> {
    let mut header = [0u8; HEADER_LEN as usize];
    let got = read_up_to(&mut r, &mut header)?;
    if got < 4 || &header[..4] != MAGIC {
        return Err(Error::NotAScanContainer);
    }
    if got < header.len() {
        return Err(Error::CorruptHeader(format!(
            "header truncated at {got} of {HEADER_LEN} bytes"
        )));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let height = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
    let record = 8u64 + 4 * (height as u64) * (width as u64);
    let expected = count
        .checked_mul(record)
        .ok_or_else(|| Error::CorruptHeader("scan count overflows".into()))?;

    let mut scans = Vec::with_capacity(count.min(1 << 20) as usize);
    let mut buf = vec![0u8; record as usize];
    let mut consumed = 0u64;
    for _ in 0..count {
        let n = read_up_to(&mut r, &mut buf)?;
        consumed += n as u64;
        if n < buf.len() {
            return Err(Error::PayloadLengthMismatch {
                expected,
                found: consumed,
            });
        }
        let timestamp = i64::from_le_bytes(buf[..8].try_into().unwrap());
        let values = buf[8..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        scans.push(ScanGrid::new(timestamp, height, width, values)?);
    }
    let mut trailing = Vec::new();
    r.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(Error::PayloadLengthMismatch {
            expected,
            found: consumed + trailing.len() as u64,
        });
    }
    Ok(scans)
}

pub fn write_scans_file(path: impl AsRef<Path>, scans: &[ScanGrid]) -> Result<()> {
    write_scans(BufWriter::new(File::create(path)?), scans)
}

pub fn read_scans_file(path: impl AsRef<Path>) -> Result<Vec<ScanGrid>> {
    read_scans(BufReader::new(File::open(path)?))
}

/// Fills `buf` as far as the reader allows; returns the byte count read.
pub(crate) fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<ScanGrid> {
        (0..3)
            .map(|i| ScanGrid::new(1000 + 300 * i, 2, 3, vec![i as f32, 1.5, 2.5, 3.5, 4.5, 55.0]).unwrap())
            .collect()
    }

    fn encode(scans: &[ScanGrid]) -> Vec<u8> {
        let mut bytes = Vec::new();
        write_scans(&mut bytes, scans).unwrap();
        bytes
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..4], b"ANLG");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 3);
        assert_eq!(i64::from_le_bytes(bytes[24..32].try_into().unwrap()), 1000);
        assert_eq!(bytes.len(), 24 + 3 * (8 + 24));
    }

    #[test]
    fn round_trip() {
        let scans = sample();
        assert_eq!(read_scans(&encode(&scans)[..]).unwrap(), scans);
        assert!(read_scans(&encode(&[])[..]).unwrap().is_empty());
    }

    #[test]
    fn error_kinds() {
        let mut bytes = encode(&sample());
        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(
            read_scans(truncated),
            Err(Error::PayloadLengthMismatch { expected: 96, found: 91 })
        ));
        bytes.push(0);
        assert!(matches!(
            read_scans(&bytes[..]),
            Err(Error::PayloadLengthMismatch { expected: 96, found: 97 })
        ));
        bytes[0] = b'X';
        assert!(matches!(read_scans(&bytes[..]), Err(Error::NotAScanContainer)));
        let mut bytes = encode(&sample());
        bytes[4] = 9;
        assert!(matches!(read_scans(&bytes[..]), Err(Error::UnsupportedVersion(9))));
        assert!(matches!(read_scans(&bytes[..10]), Err(Error::CorruptHeader(_))));
    }

    #[test]
    fn mixed_shapes_rejected() {
        let scans = vec![ScanGrid::filled(0, 2, 2, 1.0), ScanGrid::filled(300, 3, 2, 1.0)];
        assert!(write_scans(Vec::new(), &scans).is_err());
    }
}

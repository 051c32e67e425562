//! `.cubv` video container.
//!
//! Little-endian layout:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "CUBV"
//!      4     1  version = 1
//!      5     1  dtype (0 = u8, 1 = f32)
//!      6     1  channels = 1
//!      7     1  reserved = 0
//!      8     4  N (frames)
//!     12     4  H (rows)
//!     16     4  W (columns)
//!     20     -  N*H*W samples, frame-major then row-major
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::video::VideoCuboid;

pub const MAGIC: &[u8; 4] = b"CUBV";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;
/// Refuse payloads larger than this many samples.
pub const MAX_SAMPLES: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleType {
    U8,
    F32,
}

impl SampleType {
    fn code(self) -> u8 {
        match self {
            SampleType::U8 => 0,
            SampleType::F32 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            SampleType::U8 => 1,
            SampleType::F32 => 4,
        }
    }
}

/// Serialises `v`. `U8` samples are rounded and clamped to `[0, 255]`.
pub fn encode_cubv(v: &VideoCuboid, dtype: SampleType) -> Result<Vec<u8>> {
    let (n, h, w) = v.dims();
    let dims: Vec<u32> = [n, h, w]
        .iter()
        .map(|&d| u32::try_from(d).map_err(|_| Error::contract(format!("dimension {d} exceeds u32"))))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(HEADER_LEN + v.values().len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, dtype.code(), 1, 0]);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        SampleType::U8 => out.extend(v.values().iter().map(|&x| x.round().clamp(0.0, 255.0) as u8)),
        SampleType::F32 => {
            for &x in v.values() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

pub fn decode_cubv(bytes: &[u8]) -> Result<(VideoCuboid, SampleType)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::parse(
            bytes.len(),
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::parse(0, format!("bad magic {:?}, expected \"CUBV\"", &bytes[0..4])));
    }
    if bytes[4] != VERSION {
        return Err(Error::parse(4, format!("unsupported version {}", bytes[4])));
    }
    let dtype = match bytes[5] {
        0 => SampleType::U8,
        1 => SampleType::F32,
        d => return Err(Error::parse(5, format!("unknown dtype code {d}"))),
    };
    if bytes[6] != 1 {
        return Err(Error::parse(6, format!("expected 1 channel, found {}", bytes[6])));
    }
    if bytes[7] != 0 {
        return Err(Error::parse(7, format!("reserved byte is {}, expected 0", bytes[7])));
    }
    let (n, h, w) = (read_u32(bytes, 8), read_u32(bytes, 12), read_u32(bytes, 16));
    for (off, d) in [(8, n), (12, h), (16, w)] {
        if d == 0 {
            return Err(Error::parse(off, "dimension must be positive"));
        }
    }
    let samples = (n as u64)
        .checked_mul(h as u64)
        .and_then(|v| v.checked_mul(w as u64))
        .unwrap_or(u64::MAX);
    if samples > MAX_SAMPLES {
        return Err(Error::parse(
            8,
            format!("dimensions {n}x{h}x{w} overflow the sample limit"),
        ));
    }
    let expected = samples as usize * dtype.width();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::parse(
            HEADER_LEN + payload.len().min(expected),
            format!(
                "payload length mismatch: expected {expected} bytes, found {}",
                payload.len()
            ),
        ));
    }
    let values: Vec<f64> = match dtype {
        SampleType::U8 => payload.iter().map(|&b| f64::from(b)).collect(),
        SampleType::F32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect(),
    };
    let v = VideoCuboid::new(n as usize, h as usize, w as usize, values, 255.0)?;
    Ok((v, dtype))
}

pub fn write_cubv(v: &VideoCuboid, path: impl AsRef<Path>, dtype: SampleType) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_cubv(v, dtype)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_cubv(path: impl AsRef<Path>) -> Result<VideoCuboid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cubv(&bytes).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> VideoCuboid {
        VideoCuboid::from_fn(4, 64, 112, |t, y, x| ((t * 31 + y * 7 + x) % 256) as f64).unwrap()
    }

    #[test]
    fn header_is_twenty_bytes() {
        let bytes = encode_cubv(&sample(), SampleType::F32).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 4 * 64 * 112 * 4);
        assert_eq!(&bytes[..4], b"CUBV");
        assert_eq!(&bytes[4..8], &[1, 1, 1, 0]);
        assert_eq!(read_u32(&bytes, 8), 4);
        assert_eq!(read_u32(&bytes, 12), 64);
        assert_eq!(read_u32(&bytes, 16), 112);
    }

    #[test]
    fn round_trips() {
        let v = sample();
        for dtype in [SampleType::U8, SampleType::F32] {
            let (back, d) = decode_cubv(&encode_cubv(&v, dtype).unwrap()).unwrap();
            assert_eq!(d, dtype);
            assert_eq!(back, v);
        }
    }

    #[test]
    fn truncation_names_lengths() {
        let mut bytes = encode_cubv(&sample(), SampleType::U8).unwrap();
        bytes.pop();
        let err = decode_cubv(&bytes).unwrap_err().to_string();
        assert!(err.contains("expected 28672"), "{err}");
        assert!(err.contains("found 28671"), "{err}");
    }

    #[test]
    fn bad_magic_and_overflow() {
        let mut bytes = encode_cubv(&sample(), SampleType::U8).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_cubv(&bytes), Err(Error::Parse { offset: 0, .. })));
        let mut bytes = encode_cubv(&sample(), SampleType::U8).unwrap();
        bytes[8..20].copy_from_slice(&[0xff; 12]);
        assert!(matches!(decode_cubv(&bytes), Err(Error::Parse { offset: 8, .. })));
        assert!(matches!(decode_cubv(b"CUBV"), Err(Error::Parse { .. })));
    }
}

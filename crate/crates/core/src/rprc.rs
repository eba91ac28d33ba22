//! The `RPRC` radar sequence container.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                         |
//! |-------:|-----:|-------------------------------|
//! | 0      | 4    | magic `b"RPRC"`               |
//! | 4      | 2    | format version (`u16`)        |
//! | 6      | 4    | frame count T (`u32`)         |
//! | 10     | 4    | height H (`u32`)              |
//! | 14     | 4    | width W (`u32`)               |
//! | 18     | 2    | timestep minutes (`u16`)      |
//! | 20     | 4    | reserved, written as zero     |
//! | 24     | 4·T·H·W | `f32` values, frame-major then row-major |

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{RadarSequence, ReflectivityField};

pub const MAGIC: [u8; 4] = *b"RPRC";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;

pub fn encode_sequence(seq: &RadarSequence) -> Vec<u8> {
    let (h, w) = seq.frame_shape();
    let t = seq.len();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * t * h * w);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&seq.timestep_minutes.to_le_bytes());
    buf.extend_from_slice(&[0u8; 4]);
    for frame in seq.frames() {
        for v in frame.values.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode_sequence(bytes: &[u8], path: &Path) -> Result<RadarSequence> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: bytes[..4].try_into().unwrap(),
            });
        }
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let version = u16_at(4);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (t, h, w) = (u32_at(6), u32_at(10), u32_at(14));
    let timestep = u16_at(18);
    let expected = t
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            message: "header dimensions overflow".into(),
        })?;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let mut frames = Vec::with_capacity(t);
    let payload = &bytes[HEADER_LEN..];
    for fi in 0..t {
        let chunk = &payload[fi * h * w * 4..(fi + 1) * h * w * 4];
        let values: Vec<f32> = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let arr = Array2::from_shape_vec((h, w), values).expect("payload length checked");
        frames.push(ReflectivityField::new(arr));
    }
    RadarSequence::new(frames, timestep)
}

pub fn write_sequence(seq: &RadarSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_sequence(seq)).map_err(|e| Error::io(path, e))
}

pub fn read_sequence(path: impl AsRef<Path>) -> Result<RadarSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sequence(&bytes, path)
}

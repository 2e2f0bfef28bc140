//! Portable float map codec.
//!
//! Only little-endian files (negative scale) are supported. Rows are stored
//! bottom-to-top on disk; the in-memory [`Image`] is top-to-bottom.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::image::Image;

#[derive(Debug, Error)]
pub enum PfmError {
    #[error("{path}: i/o error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: offset {offset}: bad magic, expected `Pf` or `PF`")]
    BadMagic { path: PathBuf, offset: usize },
    #[error("{path}: offset {offset}: malformed header: {reason}")]
    Header {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("{path}: offset {offset}: big-endian PFM (positive scale) is unsupported")]
    BigEndian { path: PathBuf, offset: usize },
    #[error(
        "{path}: offset {offset}: payload truncated, expected {expected} bytes, found {found}"
    )]
    Truncated {
        path: PathBuf,
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}: expected a {expected}-channel PFM, found {found} channel(s)")]
    ChannelMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
}

/// Decoded PFM contents; `data` is top-to-bottom, channel-interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct PfmData {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Option<(usize, String)> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return None;
    }
    Some((
        start,
        String::from_utf8_lossy(&bytes[start..*pos]).into_owned(),
    ))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<PfmData, PfmError> {
    let header_err = |offset: usize, reason: &str| PfmError::Header {
        path: path.to_path_buf(),
        offset,
        reason: reason.to_string(),
    };
    let mut pos = 0usize;
    let channels = match next_token(bytes, &mut pos) {
        Some((_, t)) if t == "Pf" => 1,
        Some((_, t)) if t == "PF" => 3,
        Some((off, _)) => {
            return Err(PfmError::BadMagic {
                path: path.to_path_buf(),
                offset: off,
            })
        }
        None => {
            return Err(PfmError::BadMagic {
                path: path.to_path_buf(),
                offset: 0,
            })
        }
    };
    let mut dim = |name: &str| -> Result<usize, PfmError> {
        let (off, tok) = next_token(bytes, &mut pos)
            .ok_or_else(|| header_err(bytes.len(), &format!("missing {name}")))?;
        tok.parse::<usize>()
            .map_err(|_| header_err(off, &format!("invalid {name} `{tok}`")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let (scale_off, scale_tok) =
        next_token(bytes, &mut pos).ok_or_else(|| header_err(bytes.len(), "missing scale"))?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| header_err(scale_off, &format!("invalid scale `{scale_tok}`")))?;
    if !scale.is_finite() || scale == 0.0 {
        return Err(header_err(scale_off, "scale must be finite and non-zero"));
    }
    if scale > 0.0 {
        return Err(PfmError::BigEndian {
            path: path.to_path_buf(),
            offset: scale_off,
        });
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(header_err(pos, "missing newline after scale"));
    }
    pos += 1;

    let expected = width * height * channels * 4;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(PfmError::Truncated {
            path: path.to_path_buf(),
            offset: pos,
            expected,
            found: payload.len(),
        });
    }
    let row_len = width * channels;
    let mut data = vec![0f32; width * height * channels];
    for disk_row in 0..height {
        let mem_row = height - 1 - disk_row;
        for i in 0..row_len {
            let o = (disk_row * row_len + i) * 4;
            let b = [payload[o], payload[o + 1], payload[o + 2], payload[o + 3]];
            data[mem_row * row_len + i] = f32::from_le_bytes(b);
        }
    }
    Ok(PfmData {
        width,
        height,
        channels,
        data,
    })
}

pub fn encode(pfm: &PfmData) -> Vec<u8> {
    let magic = if pfm.channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", pfm.width, pfm.height).into_bytes();
    let row_len = pfm.width * pfm.channels;
    out.reserve(pfm.data.len() * 4);
    for mem_row in (0..pfm.height).rev() {
        for &x in &pfm.data[mem_row * row_len..(mem_row + 1) * row_len] {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn read_file(path: &Path) -> Result<PfmData, PfmError> {
    let bytes = fs::read(path).map_err(|source| PfmError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, path)
}

fn write_file(path: &Path, pfm: &PfmData) -> Result<(), PfmError> {
    let io_err = |source| PfmError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&encode(pfm)).map_err(io_err)
}

/// Reads a single-channel PFM.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<Image<f32>, PfmError> {
    let path = path.as_ref();
    let pfm = read_file(path)?;
    if pfm.channels != 1 {
        return Err(PfmError::ChannelMismatch {
            path: path.to_path_buf(),
            expected: 1,
            found: pfm.channels,
        });
    }
    Ok(Image::from_vec(pfm.width, pfm.height, pfm.data))
}

pub fn write_pfm(path: impl AsRef<Path>, image: &Image<f32>) -> Result<(), PfmError> {
    write_file(
        path.as_ref(),
        &PfmData {
            width: image.width(),
            height: image.height(),
            channels: 1,
            data: image.as_slice().to_vec(),
        },
    )
}

/// Reads a three-channel PFM.
pub fn read_pfm3(path: impl AsRef<Path>) -> Result<Image<[f32; 3]>, PfmError> {
    let path = path.as_ref();
    let pfm = read_file(path)?;
    if pfm.channels != 3 {
        return Err(PfmError::ChannelMismatch {
            path: path.to_path_buf(),
            expected: 3,
            found: pfm.channels,
        });
    }
    let px = pfm
        .data
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok(Image::from_vec(pfm.width, pfm.height, px))
}

pub fn write_pfm3(path: impl AsRef<Path>, image: &Image<[f32; 3]>) -> Result<(), PfmError> {
    write_file(
        path.as_ref(),
        &PfmData {
            width: image.width(),
            height: image.height(),
            channels: 3,
            data: image.as_slice().iter().flatten().copied().collect(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem.pfm")
    }

    #[test]
    fn two_by_two_roundtrip_and_layout() {
        let img = Image::from_vec(2, 2, vec![1.0f32, 2.0, 3.0, 4.0]);
        let bytes = encode(&PfmData {
            width: 2,
            height: 2,
            channels: 1,
            data: img.as_slice().to_vec(),
        });
        assert!(bytes.starts_with(b"Pf\n2 2\n-1.0\n"));
        // bottom row first on disk
        let payload = &bytes[bytes.len() - 16..];
        assert_eq!(&payload[0..4], &3.0f32.to_le_bytes());
        let back = decode(&bytes, p()).unwrap();
        assert_eq!(back.data, img.as_slice());
    }

    #[test]
    fn big_endian_scale_is_rejected() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.0f32.to_be_bytes());
        assert!(matches!(
            decode(&bytes, p()),
            Err(PfmError::BigEndian { .. })
        ));
    }

    #[test]
    fn bad_magic_truncation_and_scale() {
        assert!(matches!(
            decode(b"P6\n1 1\n-1.0\n0000", p()),
            Err(PfmError::BadMagic { .. })
        ));
        assert!(matches!(
            decode(b"Pf\n2 2\n-1.0\n0000", p()),
            Err(PfmError::Truncated { offset: 12, .. })
        ));
        assert!(matches!(
            decode(b"Pf\n1 1\nnan\n0000", p()),
            Err(PfmError::Header { .. })
        ));
        assert!(matches!(
            decode(b"Pf\n1 1\n-inf\n0000", p()),
            Err(PfmError::Header { .. })
        ));
    }

    #[test]
    fn nan_payload_is_bit_exact() {
        let weird = f32::from_bits(0x7fc0_1234);
        let pfm = PfmData {
            width: 1,
            height: 1,
            channels: 1,
            data: vec![weird],
        };
        let back = decode(&encode(&pfm), p()).unwrap();
        assert_eq!(back.data[0].to_bits(), 0x7fc0_1234);
    }

    #[test]
    fn file_roundtrip_three_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flow.pfm");
        let img = Image::from_fn(3, 2, |u, v| [u as f32, v as f32, 1.0]);
        write_pfm3(&path, &img).unwrap();
        assert_eq!(read_pfm3(&path).unwrap(), img);
        assert!(matches!(
            read_pfm(&path),
            Err(PfmError::ChannelMismatch { found: 3, .. })
        ));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_identical(
            w in 1usize..6, h in 1usize..6,
            seed in proptest::collection::vec(any::<u32>(), 36)
        ) {
            let data: Vec<f32> = (0..w * h).map(|i| f32::from_bits(seed[i])).collect();
            let pfm = PfmData { width: w, height: h, channels: 1, data };
            let back = decode(&encode(&pfm), p()).unwrap();
            let a: Vec<u32> = pfm.data.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = back.data.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}

//! Binary PGM (`P5`) files.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::sensor::{FingerprintImage, Resolution, FULL_DPI};

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a binary 8-bit PGM: {0}")]
    Format(String),
}

pub fn encode_pgm(image: &FingerprintImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.pixels());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<FingerprintImage, PgmError> {
    let bad = |msg: &str| PgmError::Format(msg.to_string());
    // Header: magic, width, height, maxval, each followed by one whitespace byte.
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("missing P5 magic"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    let pixels = bytes.get(pos..).unwrap_or_default();
    if pixels.len() != width * height {
        return Err(PgmError::Format(format!(
            "expected {} pixel bytes, found {}",
            width * height,
            pixels.len()
        )));
    }
    let dpi = match Resolution::from_byte_len(pixels.len()) {
        Some(res) if res.side() == width => res.dpi(),
        _ => FULL_DPI,
    };
    FingerprintImage::new(width, height, dpi, pixels.to_vec()).map_err(|e| PgmError::Format(e.to_string()))
}

pub fn save_pgm(image: &FingerprintImage, path: &Path) -> Result<(), PgmError> {
    fs::write(path, encode_pgm(image)).map_err(|source| PgmError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_pgm(path: &Path) -> Result<FingerprintImage, PgmError> {
    let bytes = fs::read(path).map_err(|source| PgmError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_pgm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::generate_fingerprint;

    #[test]
    fn header_and_sizes() {
        let full = encode_pgm(&generate_fingerprint(1, Resolution::Full));
        assert!(full.starts_with(b"P5\n160 160\n255\n"));
        assert_eq!(full.len() - b"P5\n160 160\n255\n".len(), 25_600);
        let quarter = encode_pgm(&generate_fingerprint(1, Resolution::Quarter));
        assert_eq!(quarter.len() - b"P5\n80 80\n255\n".len(), 6_400);
    }

    #[test]
    fn round_trip() {
        for res in [Resolution::Full, Resolution::Quarter] {
            let image = generate_fingerprint(3, res);
            assert_eq!(decode_pgm(&encode_pgm(&image)).unwrap(), image);
        }
    }

    #[test]
    fn rejects_bad_files() {
        assert!(decode_pgm(b"P2\n1 1\n255\n\0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\0").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\0\0").is_err());
        assert!(decode_pgm(b"P5\n").is_err());
    }

    #[test]
    fn comments_are_skipped() {
        let image = decode_pgm(b"P5\n# made by hand\n2 1\n255\n\x01\x02").unwrap();
        assert_eq!(image.pixels(), &[1, 2]);
    }

    #[test]
    fn io_error_names_the_path() {
        let err = load_pgm(Path::new("/nonexistent/dir/x.pgm")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/x.pgm"));
    }
}

//! Binary PPM (P6) and PGM (P5) reading and writing.
//!
//! Netpbm keeps the pipeline free of compression dependencies: files are
//! byte-exact and trivially diffable.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Write an RGB image as binary PPM, maxval 255. `rgb` is row-major
/// interleaved, length `3 * w * h`.
pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * w * h {
        return Err(Error::Dataset(format!(
            "ppm buffer length {} does not match {w}x{h}",
            rgb.len()
        )));
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    fs::write(path, bytes)?;
    Ok(())
}

/// Write a grayscale image as binary PGM, maxval 255.
pub fn write_pgm(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != w * h {
        return Err(Error::Dataset(format!(
            "pgm buffer length {} does not match {w}x{h}",
            gray.len()
        )));
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(gray);
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a binary PPM (P6) or PGM (P5). Returns (channels, w, h, bytes).
pub fn read_netpbm(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Dataset(format!("cannot read image {}: {e}", path.display())))?;
    let bad = |m: &str| Error::Dataset(format!("{}: {m}", path.display()));

    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Dataset(format!("{}: truncated header", path.display())));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = next_token(&bytes)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(bad(&format!("unsupported magic '{other}'"))),
    };
    let w: usize = next_token(&bytes)?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = next_token(&bytes)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = next_token(&bytes)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = channels * w * h;
    if bytes.len() < pos + need {
        return Err(bad("pixel data truncated"));
    }
    Ok((channels, w, h, bytes[pos..pos + need].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let rgb: Vec<u8> = (0..3 * 4 * 2).map(|i| (i * 7 % 256) as u8).collect();
        write_ppm(&path, 4, 2, &rgb).unwrap();
        let (c, w, h, data) = read_netpbm(&path).unwrap();
        assert_eq!((c, w, h), (3, 4, 2));
        assert_eq!(data, rgb);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        let gray: Vec<u8> = (0..6).map(|i| i as u8 * 40).collect();
        write_pgm(&path, 3, 2, &gray).unwrap();
        let (c, w, h, data) = read_netpbm(&path).unwrap();
        assert_eq!((c, w, h), (1, 3, 2));
        assert_eq!(data, gray);
    }

    #[test]
    fn truncated_image_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        fs::write(&path, b"P6\n4 4\n255\nxx").unwrap();
        assert!(read_netpbm(&path).is_err());
    }
}

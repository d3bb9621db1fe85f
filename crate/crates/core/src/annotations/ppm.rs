//! Binary PPM (P6, maxval 255) reader and writer.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub type Rgb = [u8; 3];

/// Decoded raster: width, height and row-major RGB pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

pub fn read_ppm(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes).map_err(|reason| Error::malformed(path.display(), reason))
}

pub fn write_ppm(path: &Path, raster: &Raster) -> Result<()> {
    let mut out = Vec::with_capacity(raster.pixels.len() * 3 + 32);
    write!(out, "P6\n{} {}\n255\n", raster.width, raster.height)
        .map_err(|e| Error::io(path, e))?;
    for px in &raster.pixels {
        out.extend_from_slice(px);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> std::result::Result<String, String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err("unexpected end of PPM header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    let magic = token(&mut pos)?;
    if magic != "P6" {
        return Err(format!("expected P6 magic, found {magic:?}"));
    }
    let number = |name: &str, pos: &mut usize| -> std::result::Result<usize, String> {
        let t = token(pos)?;
        t.parse::<usize>()
            .map_err(|_| format!("PPM {name} is not an integer: {t:?}"))
    };
    let width = number("width", &mut pos)?;
    let height = number("height", &mut pos)?;
    let maxval = number("maxval", &mut pos)?;
    if maxval != 255 {
        return Err(format!("only 8-bit PPM supported, maxval={maxval}"));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let expected = width * height * 3;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() < expected {
        return Err(format!(
            "PPM payload truncated: expected {expected} bytes, found {}",
            payload.len()
        ));
    }
    let pixels = payload[..expected]
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok(Raster {
        width,
        height,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let raster = Raster {
            width: 3,
            height: 2,
            pixels: (0..6u8).map(|i| [i, i * 2, 255 - i]).collect(),
        };
        write_ppm(&path, &raster).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), raster);
    }

    #[test]
    fn header_comments_and_truncation() {
        let ok = b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03";
        assert_eq!(parse_ppm(ok).unwrap().pixels, vec![[1, 2, 3]]);
        assert!(parse_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
        assert!(parse_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
    }
}

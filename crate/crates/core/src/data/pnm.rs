//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit raster, row-major and channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 3 for PPM, 1 for PGM.
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("{channels} channels; expected 1 or 3")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::InvalidArgument(format!(
                "{} bytes for a {width}x{height}x{channels} raster",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
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
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Parses a P5 or P6 file already read into memory.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Raster> {
    let bad = |msg: &str| Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let channels = match header_token(bytes, &mut pos) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(bad("not a binary PPM/PGM (expected P6 or P5)")),
    };
    let mut num = |what: &str| -> Result<usize> {
        header_token(bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("malformed header: bad {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval} unsupported; only 255")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero-sized image"));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("malformed header: missing raster separator"));
    }
    pos += 1;
    let need = width * height * channels;
    if bytes.len() - pos < need {
        return Err(bad(&format!("raster truncated: {} of {need} bytes", bytes.len() - pos)));
    }
    Raster::new(width, height, channels, bytes[pos..pos + need].to_vec())
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.pixels);
    out
}

pub fn read(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, r: &Raster) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(r)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_gray_and_color() {
        for channels in [1, 3] {
            let px: Vec<u8> = (0..2 * 3 * channels).map(|v| (v * 37 % 256) as u8).collect();
            let r = Raster::new(2, 3, channels, px).unwrap();
            assert_eq!(decode(&encode(&r), Path::new("x")).unwrap(), r);
        }
    }

    #[test]
    fn header_comments_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        let r = decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(r.pixels, vec![7, 9]);
    }

    #[test]
    fn malformed_inputs() {
        let p = Path::new("x");
        assert!(decode(b"P3\n1 1\n255\n", p).is_err());
        assert!(decode(b"P5\n1 x\n255\n\0", p).is_err());
        assert!(decode(b"P5\n1 1\n65535\n\0\0", p).is_err());
        assert!(decode(b"P6\n2 2\n255\n\0\0\0", p).is_err());
    }
}

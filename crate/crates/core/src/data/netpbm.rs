//! Binary PPM (P6) and PGM (P5) with maxval 255.
//!
//! Writers emit `P6\n{w} {h}\n255\n` followed by the raw samples. Readers
//! accept any whitespace and `#` comments in the header, as the format allows.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::RgbImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// P5, one byte per pixel.
    Gray,
    /// P6, three bytes per pixel.
    Rgb,
}

impl Kind {
    fn magic(self) -> &'static [u8; 2] {
        match self {
            Kind::Gray => b"P5",
            Kind::Rgb => b"P6",
        }
    }

    fn channels(self) -> usize {
        match self {
            Kind::Gray => 1,
            Kind::Rgb => 3,
        }
    }
}

/// Decoded raster: samples are raw bytes, `channels` per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub kind: Kind,
    pub width: usize,
    pub height: usize,
    pub samples: Vec<u8>,
}

pub fn encode(kind: Kind, width: usize, height: usize, samples: &[u8]) -> Result<Vec<u8>> {
    if width == 0 || height == 0 {
        return Err(Error::dim("width", "netpbm images must be at least 1x1"));
    }
    if samples.len() != width * height * kind.channels() {
        return Err(Error::dim(
            "numel",
            format!(
                "{width}x{height} {:?} image needs {} samples, got {}",
                kind,
                width * height * kind.channels(),
                samples.len()
            ),
        ));
    }
    let mut out = Vec::with_capacity(samples.len() + 20);
    out.extend_from_slice(kind.magic());
    out.extend_from_slice(format!("\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(samples);
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                message: format!("{what} out of range"),
            })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Raster> {
    let mut h = Header { bytes, pos: 0 };
    let kind = match bytes.get(..2) {
        Some(b"P5") => Kind::Gray,
        Some(b"P6") => Kind::Rgb,
        _ => return Err(h.err("expected P5 or P6 magic")),
    };
    h.pos = 2;
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Parse {
            offset: maxval_at,
            message: format!("empty image {width}x{height}"),
        });
    }
    if maxval != 255 {
        return Err(Error::Parse {
            offset: maxval_at,
            message: format!("maxval {maxval} unsupported, expected 255"),
        });
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(h.err("expected a single whitespace byte after maxval")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(kind.channels()))
        .ok_or_else(|| h.err("image dimensions overflow"))?;
    let available = bytes.len() - h.pos;
    if available < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("truncated payload: {available} of {need} bytes"),
        });
    }
    if available > need {
        return Err(Error::Parse {
            offset: h.pos + need,
            message: format!("{} trailing bytes after payload", available - need),
        });
    }
    Ok(Raster {
        kind,
        width,
        height,
        samples: bytes[h.pos..].to_vec(),
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_kind(path: &Path, kind: Kind) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let raster = decode(&bytes)?;
    if raster.kind != kind {
        return Err(Error::Parse {
            offset: 0,
            message: format!(
                "{} is {:?}, expected {:?}",
                path.display(),
                raster.kind,
                kind
            ),
        });
    }
    Ok(raster)
}

pub fn ppm_write(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    write_bytes(
        path.as_ref(),
        &encode(Kind::Rgb, img.width, img.height, &img.to_bytes())?,
    )
}

pub fn ppm_read(path: impl AsRef<Path>) -> Result<RgbImage> {
    let r = read_kind(path.as_ref(), Kind::Rgb)?;
    RgbImage::from_bytes(r.width, r.height, &r.samples)
}

/// Writes raw 8-bit gray samples (class ids or quantised intensities).
pub fn pgm_write(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    samples: &[u8],
) -> Result<()> {
    write_bytes(path.as_ref(), &encode(Kind::Gray, width, height, samples)?)
}

/// Returns `(width, height, samples)`.
pub fn pgm_read(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let r = read_kind(path.as_ref(), Kind::Gray)?;
    Ok((r.width, r.height, r.samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel_layout() {
        let bytes = encode(Kind::Rgb, 1, 1, &[255, 255, 255]).unwrap();
        assert_eq!(bytes, b"P6\n1 1\n255\n\xff\xff\xff");
    }

    #[test]
    fn truncated_payload_reports_end_offset() {
        let header = b"P6\n16 16\n255\n";
        let mut bytes = header.to_vec();
        bytes.extend(std::iter::repeat_n(7u8, 767));
        match decode(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, header.len() + 767),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn comments_and_whitespace_in_header() {
        let bytes = b"P5 # gray\n 2\t1 # dims\n255\n\x01\x02";
        let r = decode(bytes).unwrap();
        assert_eq!((r.width, r.height, r.samples), (2, 1, vec![1, 2]));
    }

    #[test]
    fn bad_headers() {
        assert!(matches!(
            decode(b"P3\n1 1\n255\n"),
            Err(Error::Parse { offset: 0, .. })
        ));
        assert!(decode(b"P5\n1 1\n65535\n\0\0").is_err());
        assert!(decode(b"P5\n1\n").is_err());
        assert!(decode(b"P5\n1 1\n255\n\0\0").is_err());
        assert!(decode(b"P5\n0 1\n255\n").is_err());
    }
}

//! Binary PPM (P6) / PGM (P5) reading and writing, maxval 255.
//!
//! This is the only raw-image codec in the crate; it is deliberately strict
//! (binary variants only, maxval 255, bounded dimensions) because it parses
//! untrusted bytes.

use crate::error::{Error, Result};

/// Hard cap on parsed dimensions; a desk-scale lab never needs more and the
/// cap keeps hostile headers from requesting huge allocations.
const MAX_DIM: usize = 1 << 14;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    /// 1 (grayscale / P5) or 3 (rgb / P6).
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major `height * width * channels` bytes, interleaved channels.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Image { channels, height, width, data }
    }

    /// Pixel value scaled to [0, 1]; computed in f32 so container round-trips
    /// through 32-bit payloads stay bit-exact, then widened.
    pub fn sample(&self, ch: usize, y: usize, x: usize) -> f64 {
        let v = self.data[(y * self.width + x) * self.channels + ch];
        (v as f32 / 255.0f32) as f64
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<usize> {
        self.skip_ws_and_comments();
        let start = self.pos;
        let mut value: usize = 0;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((self.bytes[self.pos] - b'0') as usize))
                .ok_or_else(|| Error::Format(format!("{what} overflows at byte {}", self.pos)))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::Format(format!(
                "expected {what} at byte offset {}",
                self.pos
            )));
        }
        Ok(value)
    }
}

/// Parse a binary P5/P6 image with maxval 255.
pub fn parse(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 {
        return Err(Error::Format("file shorter than magic".into()));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => {
            return Err(Error::Format(
                "bad magic, expected binary P5 or P6".into(),
            ))
        }
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.read_uint("width")?;
    let height = cur.read_uint("height")?;
    let maxval = cur.read_uint("maxval")?;
    if width == 0 || height == 0 || width > MAX_DIM || height > MAX_DIM {
        return Err(Error::Format(format!(
            "unsupported dimensions {width}x{height}"
        )));
    }
    if maxval != 255 {
        return Err(Error::Format(format!("maxval must be 255, got {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(Error::Format(format!(
            "missing raster separator at byte offset {}",
            cur.pos
        )));
    }
    cur.pos += 1;
    let need = channels * width * height;
    let avail = bytes.len() - cur.pos;
    if avail < need {
        return Err(Error::Format(format!(
            "raster truncated: need {need} bytes, have {avail} at byte offset {}",
            cur.pos
        )));
    }
    let data = bytes[cur.pos..cur.pos + need].to_vec();
    Ok(Image { channels, height, width, data })
}

/// Serialize to binary P5 (1 channel) or P6 (3 channels).
pub fn write(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::Argument(format!(
                "ppm writer supports 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_p6_with_comment_and_scales_bytes() {
        let bytes = b"P6\n# test\n2 1\n255\n\xff\x00\x00\x00\xff\x00".to_vec();
        let img = parse(&bytes).unwrap();
        assert_eq!((img.channels, img.height, img.width), (3, 1, 2));
        assert_eq!(img.sample(0, 0, 0), 1.0);
        assert_eq!(img.sample(1, 0, 0), 0.0);
        assert_eq!(img.sample(1, 0, 1), 1.0);
    }

    #[test]
    fn rejects_bad_magic_maxval_and_truncation() {
        assert!(parse(b"P4\n1 1\n255\n\x00").is_err());
        assert!(parse(b"P5\n1 1\n65535\n\x00\x00").is_err());
        let err = parse(b"P5\n4 4\n255\n\x00\x00").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        assert!(parse(b"P5\n0 3\n255\n").is_err());
    }

    #[test]
    fn roundtrip_p5_and_p6() {
        for ch in [1usize, 3] {
            let data: Vec<u8> = (0..ch * 6).map(|i| (i * 37 % 256) as u8).collect();
            let img = Image::new(ch, 2, 3, data);
            let bytes = write(&img).unwrap();
            assert_eq!(parse(&bytes).unwrap(), img);
        }
    }
}

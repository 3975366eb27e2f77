//! Netpbm grayscale (P2/P5) and RGB (P3/P6) codecs, 8-bit only.
//!
//! Masks are stored as PGM with values {0, 255}.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{GrayImage, Mask, RgbImage};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PnmImage {
    Gray(GrayImage),
    Rgb(RgbImage),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    /// ASCII samples (P2 / P3).
    Plain,
    /// Binary samples (P5 / P6).
    Raw,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Pnm(if self.pos >= self.bytes.len() {
                format!("truncated data while reading {what}")
            } else {
                format!("expected a number for {what} at byte {start}")
            }));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Pnm(format!("{what} out of range")))
    }
}

/// Decodes a P2, P3, P5 or P6 file.
pub fn decode(bytes: &[u8]) -> Result<PnmImage> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Pnm("missing P magic number".into()));
    }
    let (channels, encoding) = match bytes[1] {
        b'2' => (1, Encoding::Plain),
        b'3' => (3, Encoding::Plain),
        b'5' => (1, Encoding::Raw),
        b'6' => (3, Encoding::Raw),
        other => return Err(Error::Pnm(format!("unsupported magic P{}", other as char))),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Pnm(format!("empty image {width}×{height}")));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    let count = width * height * channels;
    let samples = match encoding {
        Encoding::Raw => {
            // Exactly one whitespace byte separates the header from the payload.
            if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
                return Err(Error::Pnm("missing whitespace after maxval".into()));
            }
            let start = cur.pos + 1;
            let payload = bytes.get(start..start + count).ok_or_else(|| {
                Error::Pnm(format!("truncated payload: need {count} bytes, have {}", bytes.len().saturating_sub(start)))
            })?;
            payload.to_vec()
        }
        Encoding::Plain => (0..count)
            .map(|i| {
                let v = cur.number("sample").map_err(|_| Error::Pnm(format!("truncated payload at sample {i} of {count}")))?;
                u8::try_from(v)
                    .ok()
                    .filter(|_| v <= maxval)
                    .ok_or_else(|| Error::Pnm(format!("sample {v} exceeds maxval {maxval}")))
            })
            .collect::<Result<Vec<u8>>>()?,
    };
    Ok(if channels == 1 {
        PnmImage::Gray(GrayImage::new(width, height, samples)?)
    } else {
        PnmImage::Rgb(RgbImage::new(width, height, samples)?)
    })
}

fn encode(magic: &str, width: usize, height: usize, samples: &[u8], encoding: Encoding) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    match encoding {
        Encoding::Raw => out.extend_from_slice(samples),
        Encoding::Plain => {
            // Keep lines under 70 characters.
            let mut line_len = 0;
            for (i, s) in samples.iter().enumerate() {
                let token = s.to_string();
                if line_len > 0 && line_len + 1 + token.len() > 70 {
                    out.push(b'\n');
                    line_len = 0;
                } else if i > 0 {
                    out.push(b' ');
                    line_len += 1;
                }
                out.extend_from_slice(token.as_bytes());
                line_len += token.len();
            }
            out.push(b'\n');
        }
    }
    out
}

pub fn encode_pgm(image: &GrayImage, encoding: Encoding) -> Vec<u8> {
    let magic = if encoding == Encoding::Plain { "P2" } else { "P5" };
    encode(magic, image.width(), image.height(), image.pixels(), encoding)
}

pub fn encode_ppm(image: &RgbImage, encoding: Encoding) -> Vec<u8> {
    let magic = if encoding == Encoding::Plain { "P3" } else { "P6" };
    encode(magic, image.width(), image.height(), image.pixels(), encoding)
}

pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage> {
    match decode(bytes)? {
        PnmImage::Gray(g) => Ok(g),
        PnmImage::Rgb(_) => Err(Error::Pnm("expected a PGM image, found PPM".into())),
    }
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    match decode(bytes)? {
        PnmImage::Rgb(img) => Ok(img),
        PnmImage::Gray(_) => Err(Error::Pnm("expected a PPM image, found PGM".into())),
    }
}

pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    decode_gray(bytes)?.to_mask()
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<PnmImage> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    decode_rgb(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    decode_gray(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    read_gray(path)?.to_mask()
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: impl AsRef<Path>, image: &RgbImage, encoding: Encoding) -> Result<()> {
    write_bytes(path.as_ref(), &encode_ppm(image, encoding))
}

pub fn write_pgm(path: impl AsRef<Path>, image: &GrayImage, encoding: Encoding) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pgm(image, encoding))
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask, encoding: Encoding) -> Result<()> {
    write_pgm(path, &mask.to_gray(), encoding)
}

//! Binary Netpbm codec: PGM (`P5`) for single-channel images, PPM (`P6`) for
//! RGB. Samples are one byte when `maxval < 256`, otherwise two bytes
//! big-endian. Floats map to integers as `round(v · maxval)`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

/// Largest accepted width or height.
const MAX_DIM: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn maxval(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

pub fn quantize(v: f64, maxval: u32) -> u32 {
    (v * maxval as f64).round() as u32
}

pub fn encode(img: &Image, depth: BitDepth) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let maxval = depth.maxval();
    let header = format!("{magic}\n{} {}\n{maxval}\n", img.width(), img.height());
    let mut out = header.into_bytes();
    for &v in img.data() {
        let q = quantize(v, maxval);
        match depth {
            BitDepth::Eight => out.push(q as u8),
            BitDepth::Sixteen => out.extend_from_slice(&(q as u16).to_be_bytes()),
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        let mut value: usize = 0;
        while let Some(&b) = self.bytes.get(self.pos) {
            if !b.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as usize))
                .ok_or_else(|| self.err(format!("{what} overflows")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(format!("expected {what}")));
        }
        Ok(value)
    }
}

/// Decode a P5/P6 payload. Only the first image in the stream is read.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut cur = Cursor { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(cur.err("expected magic P5 or P6")),
    };
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    if width == 0 || height == 0 || width > MAX_DIM || height > MAX_DIM {
        return Err(cur.err(format!("unsupported dimensions {width}x{height}")));
    }
    let maxval = cur.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(cur.err(format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("expected single whitespace after maxval")),
    }
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let count = width * height * channels;
    let needed = count * sample_bytes;
    let payload = &bytes[cur.pos..];
    if payload.len() < needed {
        cur.pos = bytes.len();
        return Err(cur.err(format!(
            "truncated payload: need {needed} bytes, have {}",
            payload.len()
        )));
    }
    let scale = maxval as f64;
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let raw = if sample_bytes == 1 {
            payload[i] as usize
        } else {
            u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]]) as usize
        };
        if raw > maxval {
            cur.pos += i * sample_bytes;
            return Err(cur.err(format!("sample {raw} exceeds maxval {maxval}")));
        }
        data.push(raw as f64 / scale);
    }
    Image::new(height, width, channels, data)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.in_file(path))
}

pub fn write_image(img: &Image, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(img, depth)).map_err(|e| Error::io(path, e))
}

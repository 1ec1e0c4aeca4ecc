//! Binary netpbm images: P5 (grayscale) and P6 (RGB), 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::write_atomic;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Row-major, channels interleaved.
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::Parameter(format!(
                "unsupported channel count {channels}"
            )));
        }
        if width == 0 || height == 0 || pixels.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "{width}x{height}x{channels} image with {} samples",
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

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let bad = |msg: &str| Error::format(path, msg);
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(bad("expected P5 or P6 magic")),
        };
        cur.pos = 2;
        let width = cur.header_int().ok_or_else(|| bad("bad width"))?;
        let height = cur.header_int().ok_or_else(|| bad("bad height"))?;
        let maxval = cur.header_int().ok_or_else(|| bad("bad maxval"))?;
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        match cur.bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(bad("missing raster separator")),
        }
        let raster = &bytes[cur.pos..];
        if raster.len() != width * height * channels {
            return Err(bad("raster length does not match header"));
        }
        Image::new(width, height, channels, raster.to_vec()).map_err(|e| bad(&e.to_string()))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
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

    fn header_int(&mut self) -> Option<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()?
            .parse()
            .ok()
            .filter(|&v| v > 0)
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Image::decode(&bytes, path)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    write_atomic(path, &image.encode())
}

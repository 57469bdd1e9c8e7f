//! Binary PGM (P5) and PPM (P6) with 8-bit samples.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("not a PNM file (magic {0:?})")]
    BadMagic(String),
    #[error("unsupported PNM format {0}; only binary P5 and P6 are read")]
    Unsupported(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("maxval {0} is not 255")]
    MaxVal(u32),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} bytes after the payload")]
    Trailing(usize),
    #[error("{len} bytes for a {width}x{height}x{channels} image")]
    BufferSize {
        width: usize,
        height: usize,
        channels: usize,
        len: usize,
    },
}

/// An 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    fn with_channels(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<u8>,
    ) -> Result<Self, ImageError> {
        if data.len() != width * height * channels {
            return Err(ImageError::BufferSize {
                width,
                height,
                channels,
                len: data.len(),
            });
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        Self::with_channels(width, height, 3, data)
    }

    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        Self::with_channels(width, height, 1, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_rgb(&self) -> bool {
        self.channels == 3
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    /// Channel values at `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ImageError> {
        let magic = bytes.get(..2).unwrap_or(bytes);
        let channels = match magic {
            b"P5" => 1,
            b"P6" => 3,
            [b'P', b'1'..=b'7'] => {
                return Err(ImageError::Unsupported(
                    String::from_utf8_lossy(magic).into_owned(),
                ))
            }
            _ => {
                return Err(ImageError::BadMagic(
                    String::from_utf8_lossy(magic).into_owned(),
                ))
            }
        };
        let mut header = Header { bytes, pos: 2 };
        let width = header.number("width")?;
        let height = header.number("height")?;
        let maxval = header.number("maxval")?;
        if maxval != 255 {
            return Err(ImageError::MaxVal(maxval));
        }
        match bytes.get(header.pos) {
            Some(b) if b.is_ascii_whitespace() => header.pos += 1,
            _ => {
                return Err(ImageError::Header(
                    "no whitespace before the payload".into(),
                ))
            }
        }
        let payload = &bytes[header.pos..];
        let expected = width as usize * height as usize * channels;
        if payload.len() < expected {
            return Err(ImageError::Truncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(ImageError::Trailing(payload.len() - expected));
        }
        Self::with_channels(width as usize, height as usize, channels, payload.to_vec())
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::decode(&bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, ImageError> {
        let before = self.pos;
        self.skip_space_and_comments();
        if self.pos == before {
            return Err(ImageError::Header(format!(
                "expected whitespace before {what}"
            )));
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::Header(format!("bad {what}")))
    }
}

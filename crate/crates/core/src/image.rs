//! Single-channel images in model space and their 8-bit PGM encoding.
//!
//! Model space is `[-1, 1]` with ink at `-1` and paper at `+1`. On disk a
//! pixel `p` is stored as the byte `round((p + 1) / 2 * 255)`, so ink is
//! black and paper white.

use std::path::Path;

use glyphdiff_substrate::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const INK: f32 = -1.0;
pub const PAPER: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
}

impl Canvas {
    pub const FULL: Canvas = Canvas {
        width: 256,
        height: 64,
    };
    pub const DESK: Canvas = Canvas {
        width: 128,
        height: 32,
    };
    /// Smallest canvas that holds eight glyphs with room for slant and wobble.
    pub const COMPACT: Canvas = Canvas {
        width: 72,
        height: 24,
    };

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Contract(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(-1.0..=1.0).contains(*p)) {
            return Err(Error::Contract(format!(
                "pixel value {bad} outside [-1, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Blank paper.
    pub fn blank(canvas: Canvas) -> Self {
        Self {
            width: canvas.width,
            height: canvas.height,
            pixels: vec![PAPER; canvas.pixels()],
        }
    }

    /// Clamp arbitrary values into `[-1, 1]`.
    pub fn from_clamped(width: usize, height: usize, values: &[f32]) -> Result<Self> {
        Self::new(
            width,
            height,
            values.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn canvas(&self) -> Canvas {
        Canvas {
            width: self.width,
            height: self.height,
        }
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Pixel at a possibly out-of-bounds location; outside is paper.
    pub fn get_or_paper(&self, x: isize, y: isize) -> f32 {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            PAPER
        } else {
            self.get(x as usize, y as usize)
        }
    }

    /// `[1, height, width]` tensor.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, self.height, self.width],
            self.pixels.iter().map(|&p| T::from_f64(p as f64)).collect(),
        )
        .expect("image dimensions are non-zero")
    }

    pub fn mean_abs_diff(&self, other: &GrayImage) -> f32 {
        let n = self.pixels.len() as f32;
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / n
    }

    pub fn l2_distance(&self, other: &GrayImage) -> f32 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            .sqrt()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| ((p + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            bytes
                .iter()
                .map(|&b| b as f32 / 255.0 * 2.0 - 1.0)
                .collect(),
        )
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::format("pgm", m);
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(
                std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ascii"))?,
            );
        }
        if fields[0] != "P5" {
            return Err(bad("only binary P5 images are supported"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if max != 255 {
            return Err(bad("maxval must be 255"));
        }
        let data = bytes
            .get(pos + 1..)
            .ok_or_else(|| bad("missing pixel data"))?;
        if data.len() != w * h {
            return Err(bad(&format!(
                "expected {} pixel bytes, found {}",
                w * h,
                data.len()
            )));
        }
        Self::from_bytes(w, h, data)
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_pgm(&bytes).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(path.display().to_string(), message),
            other => other,
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_pgm()).map_err(|e| Error::io(path, e))
    }
}

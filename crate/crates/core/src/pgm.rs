//! Binary PGM (P5) image I/O. Pixels map to [0,1] intensities on read and
//! are clamped and quantized to 8 bits on write; this is the only place in
//! the crate where values are clipped.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

pub fn read_pgm<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    parse_pgm(&bytes)
}

pub fn write_pgm<T: Element>(path: impl AsRef<Path>, image: &Tensor<T>) -> Result<()> {
    let bytes = encode_pgm(image)?;
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

/// Parse a binary (P5) PGM. Comments are allowed in the header; maxval must
/// fit in 8 bits. The payload must be exactly width*height bytes.
pub fn parse_pgm<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut cursor = Cursor { bytes, pos: 0 };
    let magic = cursor.token()?;
    if magic != b"P5" {
        return Err(Error::format(
            "pgm",
            format!("bad magic {:?} (only binary P5 is supported)", String::from_utf8_lossy(&magic)),
        ));
    }
    let width = cursor.int("width")?;
    let height = cursor.int("height")?;
    let maxval = cursor.int("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format("pgm", format!("degenerate size {width}x{height}")));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::format(
            "pgm",
            format!("unsupported maxval {maxval} (only 8-bit images)"),
        ));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match cursor.next_byte() {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(Error::format("pgm", "missing whitespace after maxval")),
    }
    let need = width * height;
    let rest = &cursor.bytes[cursor.pos..];
    if rest.len() < need {
        return Err(Error::format(
            "pgm",
            format!("truncated raster: expected {need} bytes, found {}", rest.len()),
        ));
    }
    if rest.len() > need {
        return Err(Error::format(
            "pgm",
            format!("{} trailing bytes after raster", rest.len() - need),
        ));
    }
    let scale = 1.0 / maxval as f64;
    let data: Vec<T> = rest.iter().map(|&b| T::of(b as f64 * scale)).collect();
    Tensor::new(Shape::new(1, 1, height, width), data)
}

/// Encode a single-plane image. Values are clamped to [0,1] and quantized
/// with round-to-nearest at maxval 255.
pub fn encode_pgm<T: Element>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::shape("pgm encode", "(1, 1, h, w)", s));
    }
    let mut out = format!("P5\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.reserve(s.h * s.w);
    for &v in image.data() {
        let q = (v.to64().clamp(0.0, 1.0) * 255.0).round() as u8;
        out.push(q);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn next_byte(&mut self) -> Option<u8> {
        let b = self.bytes.get(self.pos).copied();
        if b.is_some() {
            self.pos += 1;
        }
        b
    }

    /// Skip whitespace and '#' comments (which run to end of line).
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<Vec<u8>> {
        self.skip_separators();
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::format("pgm", "unexpected end of header"));
        }
        Ok(self.bytes[start..self.pos].to_vec())
    }

    fn int(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(&tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| {
                Error::format(
                    "pgm",
                    format!("bad {what} field '{}'", String::from_utf8_lossy(&tok)),
                )
            })
    }
}

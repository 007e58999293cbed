//! 8-bit binary PGM (P5) images with pixel values normalised to `[0, 1]`.

use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities in `[0, 1]`.
    pub pixels: Vec<f64>,
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(image: &GrayImage) -> Result<Vec<u8>> {
    if image.pixels.len() != image.width * image.height {
        return Err(Error::input("pixel count does not match the image size"));
    }
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.pixels.iter().map(|&v| quantize(v)));
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Pgm(format!("missing {what}")))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if !bytes.starts_with(b"P5") {
        return Err(Error::Pgm("not a binary PGM (P5) file".into()));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Pgm(format!("unsupported maxval {maxval}; only 8-bit images are read")));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Pgm("expected whitespace after maxval".into()));
    }
    let data = &bytes[h.pos + 1..];
    let n = width * height;
    if data.len() < n {
        return Err(Error::Pgm(format!("expected {n} pixel bytes, found {}", data.len())));
    }
    let pixels = data[..n].iter().map(|&b| b as f64 / maxval as f64).collect();
    Ok(GrayImage { width, height, pixels })
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    crate::pipeline::write_atomic(path, &encode_pgm(image)?)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    decode_pgm(&std::fs::read(path)?)
}

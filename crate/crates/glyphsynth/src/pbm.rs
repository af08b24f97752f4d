//! Netpbm readers and writers for glyph bitmaps.
//!
//! Bitmaps (P1 ascii, P4 packed) map PBM black (1) to ink. Graymaps
//! (P2 ascii, P5 raw) are read as ink intensity and thresholded at 128:
//! values >= 128 become ink.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::GlyphImage;

const GRAY_INK_THRESHOLD: u16 = 128;

/// Streaming token reader over netpbm headers/ascii bodies. Skips
/// whitespace and `#` comments.
struct TokenReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> TokenReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn skip_filler(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_filler();
        if self.pos >= self.bytes.len() {
            return Err(Error::Data("unexpected end of netpbm file".into()));
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("bad {what} in netpbm header")))
    }

    /// Position just past the single whitespace byte that ends the header,
    /// where raw P4/P5 payload begins.
    fn raw_body(&mut self) -> Result<&'a [u8]> {
        if self.pos >= self.bytes.len() {
            return Err(Error::Data("missing raw body in netpbm file".into()));
        }
        self.pos += 1; // single whitespace after the last header field
        Ok(&self.bytes[self.pos..])
    }
}

/// Parse a glyph from netpbm bytes and check it against the declared geometry.
pub fn decode(bytes: &[u8], expect_h: usize, expect_w: usize) -> Result<GlyphImage> {
    let mut r = TokenReader::new(bytes);
    let magic = r.token()?;
    let magic = std::str::from_utf8(magic)
        .map_err(|_| Error::Data("bad netpbm magic".into()))?
        .to_string();
    let width = r.number("width")?;
    let height = r.number("height")?;
    if height != expect_h || width != expect_w {
        return Err(Error::Data(format!(
            "netpbm geometry {width}x{height} does not match declared {expect_w}x{expect_h}"
        )));
    }
    let n = height * width;
    let mut pixels = Vec::with_capacity(n);
    match magic.as_str() {
        "P1" => {
            while pixels.len() < n {
                let tok = r.token()?;
                // P1 digits may or may not be whitespace-separated
                for &b in tok {
                    match b {
                        b'0' => pixels.push(0),
                        b'1' => pixels.push(1),
                        _ => return Err(Error::Data("invalid P1 pixel".into())),
                    }
                }
            }
            if pixels.len() != n {
                return Err(Error::Data("P1 pixel count mismatch".into()));
            }
        }
        "P4" => {
            let body = r.raw_body()?;
            let row_bytes = width.div_ceil(8);
            if body.len() < row_bytes * height {
                return Err(Error::Data("truncated P4 body".into()));
            }
            for row in 0..height {
                let base = row * row_bytes;
                for col in 0..width {
                    let byte = body[base + col / 8];
                    let bit = (byte >> (7 - (col % 8))) & 1;
                    pixels.push(bit);
                }
            }
        }
        "P2" => {
            let maxval = r.number("maxval")?;
            if maxval == 0 || maxval > 65535 {
                return Err(Error::Data("bad P2 maxval".into()));
            }
            for _ in 0..n {
                let v = r.number("pixel")?;
                pixels.push((v as u16 >= GRAY_INK_THRESHOLD) as u8);
            }
        }
        "P5" => {
            let maxval = r.number("maxval")?;
            if maxval == 0 || maxval > 255 {
                return Err(Error::Data("P5 maxval must fit one byte".into()));
            }
            let body = r.raw_body()?;
            if body.len() < n {
                return Err(Error::Data("truncated P5 body".into()));
            }
            pixels.extend(body[..n].iter().map(|&v| (v as u16 >= GRAY_INK_THRESHOLD) as u8));
        }
        other => {
            return Err(Error::Data(format!("unsupported netpbm magic {other:?}")));
        }
    }
    GlyphImage::new(height, width, pixels)
}

pub fn load(path: &Path, expect_h: usize, expect_w: usize) -> Result<GlyphImage> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes, expect_h, expect_w)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn encode_p1(img: &GlyphImage) -> Vec<u8> {
    let mut out = format!("P1\n{} {}\n", img.width(), img.height()).into_bytes();
    for row in 0..img.height() {
        for col in 0..img.width() {
            out.push(if img.get(row, col) == 1 { b'1' } else { b'0' });
            out.push(if col + 1 == img.width() { b'\n' } else { b' ' });
        }
    }
    out
}

pub fn encode_p4(img: &GlyphImage) -> Vec<u8> {
    let mut out = format!("P4\n{} {}\n", img.width(), img.height()).into_bytes();
    let row_bytes = img.width().div_ceil(8);
    for row in 0..img.height() {
        let mut packed = vec![0u8; row_bytes];
        for col in 0..img.width() {
            if img.get(row, col) == 1 {
                packed[col / 8] |= 1 << (7 - (col % 8));
            }
        }
        out.extend_from_slice(&packed);
    }
    out
}

pub fn save(img: &GlyphImage, path: &Path, ascii: bool) -> Result<()> {
    let bytes = if ascii { encode_p1(img) } else { encode_p4(img) };
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

//! Embedded 8x16 monospace bitmap font and printed-text rendering.
//!
//! The glyph blob (`assets/font8x16.bin`, regenerated by
//! `tools/gen_font.py`) is laid out as, all integers little-endian:
//!
//! ```text
//! magic  "GF16"      4 bytes
//! width  u8          = 8
//! height u8          = 16
//! count  u16         number of glyphs
//! count x { codepoint u32, rows [u8; 16] }   bit 7 of a row byte is the leftmost pixel
//! ```
//!
//! Text is rendered left-aligned starting [`MARGIN_LEFT`] pixels from the
//! left edge, vertically centred, one glyph per 8-pixel cell.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::image::{Canvas, GrayImage, INK, PAPER};
use crate::{Error, Result};

pub const GLYPH_WIDTH: usize = 8;
pub const GLYPH_HEIGHT: usize = 16;
/// Blank columns left of the first glyph cell (and reserved on the right).
pub const MARGIN_LEFT: usize = 4;
/// Row inside a glyph cell on which letters without descenders rest.
pub const BASELINE_ROW: usize = 12;

static EMBEDDED: &[u8] = include_bytes!("../assets/font8x16.bin");

#[derive(Clone, Debug)]
pub struct Font {
    glyphs: HashMap<char, [u8; GLYPH_HEIGHT]>,
    order: Vec<char>,
}

impl Font {
    /// The font shipped with the crate.
    pub fn embedded() -> &'static Font {
        static FONT: OnceLock<Font> = OnceLock::new();
        FONT.get_or_init(|| Font::parse(EMBEDDED).expect("embedded font blob is well formed"))
    }

    pub fn parse(blob: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::format("font blob", m);
        if blob.len() < 8 || &blob[..4] != b"GF16" {
            return Err(bad("missing GF16 magic"));
        }
        if blob[4] as usize != GLYPH_WIDTH || blob[5] as usize != GLYPH_HEIGHT {
            return Err(bad("glyph cell must be 8x16"));
        }
        let count = u16::from_le_bytes([blob[6], blob[7]]) as usize;
        let record = 4 + GLYPH_HEIGHT;
        if blob.len() != 8 + count * record {
            return Err(bad("length does not match glyph count"));
        }
        let mut glyphs = HashMap::with_capacity(count);
        let mut order = Vec::with_capacity(count);
        for rec in blob[8..].chunks(record) {
            let cp = u32::from_le_bytes([rec[0], rec[1], rec[2], rec[3]]);
            let ch = char::from_u32(cp).ok_or_else(|| bad("invalid codepoint"))?;
            let mut rows = [0u8; GLYPH_HEIGHT];
            rows.copy_from_slice(&rec[4..]);
            if glyphs.insert(ch, rows).is_some() {
                return Err(bad("duplicate glyph"));
            }
            order.push(ch);
        }
        Ok(Self { glyphs, order })
    }

    pub fn glyph(&self, ch: char) -> Option<&[u8; GLYPH_HEIGHT]> {
        self.glyphs.get(&ch)
    }

    pub fn chars(&self) -> &[char] {
        &self.order
    }

    /// Whether pixel `(x, y)` of `ch`'s cell is ink.
    pub fn ink(&self, ch: char, x: usize, y: usize) -> bool {
        self.glyphs
            .get(&ch)
            .is_some_and(|rows| rows[y] & (0x80 >> x) != 0)
    }
}

/// Top row of the glyph band on a canvas.
pub fn top_row(canvas: Canvas) -> usize {
    canvas.height.saturating_sub(GLYPH_HEIGHT) / 2
}

/// Baseline row on a canvas.
pub fn baseline_row(canvas: Canvas) -> usize {
    top_row(canvas) + BASELINE_ROW
}

/// Number of glyph cells that fit on a canvas.
pub fn max_chars(canvas: Canvas) -> usize {
    canvas.width.saturating_sub(2 * MARGIN_LEFT) / GLYPH_WIDTH
}

/// Render `text` in the monospace font. Ink is `-1`, paper `+1`.
pub fn render_printed(text: &str, canvas: Canvas, font: &Font) -> Result<GrayImage> {
    if canvas.height < GLYPH_HEIGHT {
        return Err(Error::config(
            "canvas.height",
            format!(
                "{} is smaller than the {GLYPH_HEIGHT}px glyph height",
                canvas.height
            ),
        ));
    }
    let chars: Vec<char> = text.chars().collect();
    let fit = max_chars(canvas);
    if chars.len() > fit {
        return Err(Error::Contract(format!(
            "text {text:?} needs {} cells but the {}px canvas fits at most {fit} characters",
            chars.len(),
            canvas.width
        )));
    }
    if let Some((index, &ch)) = chars
        .iter()
        .enumerate()
        .find(|(_, c)| font.glyph(**c).is_none())
    {
        return Err(Error::UnknownChar { ch, index });
    }
    let top = top_row(canvas);
    let mut pixels = vec![PAPER; canvas.pixels()];
    for (cell, &ch) in chars.iter().enumerate() {
        let x0 = MARGIN_LEFT + cell * GLYPH_WIDTH;
        for gy in 0..GLYPH_HEIGHT {
            for gx in 0..GLYPH_WIDTH {
                if font.ink(ch, gx, gy) {
                    pixels[(top + gy) * canvas.width + x0 + gx] = INK;
                }
            }
        }
    }
    GrayImage::new(canvas.width, canvas.height, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::STANDARD_CHARS;

    #[test]
    fn font_covers_standard_inventory_with_distinct_glyphs() {
        let font = Font::embedded();
        let mut seen = std::collections::HashSet::new();
        for ch in STANDARD_CHARS.chars() {
            let g = font.glyph(ch).unwrap_or_else(|| panic!("missing {ch:?}"));
            assert!(seen.insert(*g), "glyph for {ch:?} duplicates another");
        }
        assert!(font.glyph(' ').unwrap().iter().all(|&r| r == 0));
    }

    #[test]
    fn empty_text_is_blank_canvas() {
        let img = render_printed("", Canvas::DESK, Font::embedded()).unwrap();
        assert_eq!(img, GrayImage::blank(Canvas::DESK));
    }

    #[test]
    fn overflow_reports_fitting_length() {
        let err = render_printed("abcdefghij", Canvas::COMPACT, Font::embedded()).unwrap_err();
        assert!(err.to_string().contains("at most 8"), "{err}");
    }

    #[test]
    fn rejects_truncated_blob() {
        assert!(Font::parse(b"GF16\x08\x10\x01\x00").is_err());
        assert!(Font::parse(b"XXXX").is_err());
    }
}

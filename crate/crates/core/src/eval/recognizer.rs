//! Template nearest-neighbour recognizer over the monospace glyph grid.

use crate::font::{self, Font, GLYPH_HEIGHT, GLYPH_WIDTH, MARGIN_LEFT};
use crate::image::{Canvas, GrayImage};
use crate::vocab::Vocabulary;
use crate::{Error, Result};

/// Search radius, in pixels, for the cell offset.
pub const SHIFT: isize = 2;
/// Minimum ink mass in a cell's central columns for it to hold a character.
pub const BLANK_INK: f32 = 2.0;

const CELL: usize = GLYPH_WIDTH * GLYPH_HEIGHT;

#[derive(Clone, Debug)]
pub struct Recognizer {
    canvas: Canvas,
    chars: Vec<char>,
    /// Mean-centred, unit-norm smoothed ink maps, one per entry of `chars`.
    templates: Vec<[f32; CELL]>,
}

fn ink(v: f32) -> f32 {
    ((1.0 - v) * 0.5).clamp(0.0, 1.0)
}

fn normalize(mut v: [f32; CELL]) -> Option<[f32; CELL]> {
    let mean = v.iter().sum::<f32>() / CELL as f32;
    v.iter_mut().for_each(|x| *x -= mean);
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n <= 1e-6 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

/// Ink map of a whole image, smoothed with a separable `[1, 2, 1] / 4` kernel.
fn ink_map(img: &GrayImage) -> (Vec<f32>, usize, usize) {
    let (w, h) = (img.width(), img.height());
    let m: Vec<f32> = img.pixels().iter().map(|&v| ink(v)).collect();
    (blur(&m, w, h), w, h)
}

fn blur(m: &[f32], w: usize, h: usize) -> Vec<f32> {
    let at = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            m[y as usize * w + x as usize]
        }
    };
    let mut tmp = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            tmp[y as usize * w + x as usize] =
                0.25 * at(x - 1, y) + 0.5 * at(x, y) + 0.25 * at(x + 1, y);
        }
    }
    let at = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            tmp[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            out[y as usize * w + x as usize] =
                0.25 * at(x, y - 1) + 0.5 * at(x, y) + 0.25 * at(x, y + 1);
        }
    }
    out
}

fn crop_map(m: &(Vec<f32>, usize, usize), x0: isize, y0: isize) -> [f32; CELL] {
    let (m, w, h) = (&m.0, m.1 as isize, m.2 as isize);
    let mut out = [0.0; CELL];
    for y in 0..GLYPH_HEIGHT {
        for x in 0..GLYPH_WIDTH {
            let (xx, yy) = (x0 + x as isize, y0 + y as isize);
            if xx >= 0 && yy >= 0 && xx < w && yy < h {
                out[y * GLYPH_WIDTH + x] = m[(yy * w + xx) as usize];
            }
        }
    }
    out
}

impl Recognizer {
    /// Templates taken directly from the font.
    pub fn from_font(vocab: &Vocabulary, font: &Font, canvas: Canvas) -> Result<Self> {
        Self::with_templates(vocab, font, canvas, |_| None)
    }

    fn with_templates(
        vocab: &Vocabulary,
        font: &Font,
        canvas: Canvas,
        mut custom: impl FnMut(char) -> Option<[f32; CELL]>,
    ) -> Result<Self> {
        if canvas.height < GLYPH_HEIGHT || font::max_chars(canvas) == 0 {
            return Err(Error::config("canvas", "too small to hold a glyph cell"));
        }
        let mut chars = Vec::new();
        let mut templates = Vec::new();
        for &ch in vocab.chars() {
            if ch == ' ' {
                continue;
            }
            let t = custom(ch).or_else(|| {
                font.glyph(ch)?;
                let (pw, ph) = (GLYPH_WIDTH + 4, GLYPH_HEIGHT + 4);
                let mut px = vec![1.0; pw * ph];
                for y in 0..GLYPH_HEIGHT {
                    for x in 0..GLYPH_WIDTH {
                        if font.ink(ch, x, y) {
                            px[(y + 2) * pw + x + 2] = -1.0;
                        }
                    }
                }
                let img = GrayImage::new(pw, ph, px).expect("padded glyph");
                normalize(crop_map(&ink_map(&img), 2, 2))
            });
            if let Some(t) = t {
                chars.push(ch);
                templates.push(t);
            }
        }
        Ok(Self {
            canvas,
            chars,
            templates,
        })
    }

    /// Templates replaced by the mean cell crop of each character over
    /// labelled images; characters never seen keep their font template.
    pub fn fit<S: AsRef<str>>(
        vocab: &Vocabulary,
        font: &Font,
        canvas: Canvas,
        images: &[GrayImage],
        texts: &[S],
    ) -> Result<Self> {
        if images.len() != texts.len() {
            return Err(Error::Contract(format!(
                "{} images but {} texts",
                images.len(),
                texts.len()
            )));
        }
        let top = font::top_row(canvas) as isize;
        let mut sums: std::collections::HashMap<char, ([f32; CELL], usize)> = Default::default();
        for (img, text) in images.iter().zip(texts) {
            if img.canvas() != canvas {
                return Err(Error::Contract(format!(
                    "image is {}x{}, not the canvas size",
                    img.width(),
                    img.height()
                )));
            }
            let map = ink_map(img);
            for (k, ch) in text.as_ref().chars().enumerate() {
                if ch == ' ' {
                    continue;
                }
                let c = crop_map(&map, (MARGIN_LEFT + k * GLYPH_WIDTH) as isize, top);
                let e = sums.entry(ch).or_insert(([0.0; CELL], 0));
                e.0.iter_mut().zip(c).for_each(|(s, v)| *s += v);
                e.1 += 1;
            }
        }
        Self::with_templates(vocab, font, canvas, |ch| {
            sums.get(&ch).and_then(|(s, _)| normalize(*s))
        })
    }

    pub fn canvas(&self) -> Canvas {
        self.canvas
    }

    /// Best character for the cell at `x0` (zero offset at `top`), or `None`
    /// when the cell is blank.
    fn cell(
        &self,
        img: &GrayImage,
        map: &(Vec<f32>, usize, usize),
        x0: isize,
        top: isize,
    ) -> Option<char> {
        let mass: f32 = (0..GLYPH_HEIGHT)
            .flat_map(|y| (2..GLYPH_WIDTH - 2).map(move |x| (x, y)))
            .map(|(x, y)| ink(img.get_or_paper(x0 + x as isize, top + y as isize)))
            .sum();
        if mass < BLANK_INK {
            return None;
        }
        let mut best = (f32::NEG_INFINITY, None);
        for dy in -SHIFT..=SHIFT {
            for dx in -SHIFT..=SHIFT {
                let Some(c) = normalize(crop_map(map, x0 + dx, top + dy)) else {
                    continue;
                };
                for (i, t) in self.templates.iter().enumerate() {
                    let dot: f32 = c.iter().zip(t).map(|(a, b)| a * b).sum();
                    if dot > best.0 {
                        best = (dot, Some(self.chars[i]));
                    }
                }
            }
        }
        best.1
    }

    /// Read the text on a canvas-sized image; blank cells become spaces and
    /// trailing spaces are dropped.
    pub fn recognize(&self, img: &GrayImage) -> Result<String> {
        if img.canvas() != self.canvas {
            return Err(Error::Contract(format!(
                "image is {}x{}, recognizer canvas is {}x{}",
                img.width(),
                img.height(),
                self.canvas.width,
                self.canvas.height
            )));
        }
        let top = font::top_row(self.canvas) as isize;
        let map = ink_map(img);
        let text: String = (0..font::max_chars(self.canvas))
            .map(|k| {
                self.cell(img, &map, (MARGIN_LEFT + k * GLYPH_WIDTH) as isize, top)
                    .unwrap_or(' ')
            })
            .collect();
        Ok(text.trim_end_matches(' ').to_string())
    }
}

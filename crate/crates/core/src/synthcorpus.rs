//! Synthetic "handwriting": parametric styles applied to printed word
//! renderings, assembled into a manifest with train/test splits and two
//! style groups.
//!
//! A style transform runs four stages, each a no-op when its parameters are
//! zero: horizontal shear about the baseline, stroke thickness change,
//! sinusoidal baseline wobble, and a smooth seeded jitter field. Every stage
//! moves or selects existing pixel values (nearest neighbour), so binary
//! inputs stay binary.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::font::{self, Font};
use crate::image::{Canvas, GrayImage, PAPER};
use crate::manifest::{CharsetGroup, Manifest, Record, Split, StyleGroups, SCHEMA};
use crate::par::{self, Execution};
use crate::vocab::Vocabulary;
use crate::{Error, Result};

pub const MAX_SHEAR: f64 = 0.5;
pub const THICKNESS_RANGE: std::ops::RangeInclusive<i32> = -1..=2;
pub const MAX_WOBBLE_AMP: f64 = 4.0;
pub const MAX_JITTER_AMP: f64 = 3.0;
pub const MAX_JITTER_RADIUS: usize = 8;
pub const TEST_FRACTION: f64 = 0.2;

static SHARED_WORDS: &str = include_str!("../assets/words_shared.txt");
static EXTENDED_WORDS: &str = include_str!("../assets/words_extended.txt");

/// Words shipped with the crate without extended characters.
pub fn shared_words() -> Vec<String> {
    SHARED_WORDS
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

/// Words shipped with the crate that contain at least one of ä ö ü ß.
pub fn extended_words() -> Vec<String> {
    EXTENDED_WORDS
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSpec {
    pub style_id: usize,
    /// Horizontal shift per row above the baseline.
    pub shear: f64,
    /// Dilation (positive) or erosion (negative) steps.
    pub thickness: i32,
    pub wobble_amp: f64,
    pub wobble_period: f64,
    pub jitter_amp: f64,
    pub jitter_radius: usize,
    pub seed: u64,
}

impl StyleSpec {
    /// All-zero parameters: the transform is the identity.
    pub fn identity(style_id: usize) -> Self {
        Self {
            style_id,
            shear: 0.0,
            thickness: 0,
            wobble_amp: 0.0,
            wobble_period: 0.0,
            jitter_amp: 0.0,
            jitter_radius: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("style.{field}"), msg));
        if !(self.shear.abs() <= MAX_SHEAR) {
            return bad(
                "shear",
                format!("{} outside [-{MAX_SHEAR}, {MAX_SHEAR}]", self.shear),
            );
        }
        if !THICKNESS_RANGE.contains(&self.thickness) {
            return bad("thickness", format!("{} outside -1..=2", self.thickness));
        }
        if !(0.0..=MAX_WOBBLE_AMP).contains(&self.wobble_amp) {
            return bad(
                "wobble_amp",
                format!("{} outside [0, {MAX_WOBBLE_AMP}]", self.wobble_amp),
            );
        }
        if self.wobble_amp > 0.0 && !(self.wobble_period >= 2.0) {
            return bad(
                "wobble_period",
                format!("{} must be at least 2 px", self.wobble_period),
            );
        }
        if !(0.0..=MAX_JITTER_AMP).contains(&self.jitter_amp) {
            return bad(
                "jitter_amp",
                format!("{} outside [0, {MAX_JITTER_AMP}]", self.jitter_amp),
            );
        }
        if self.jitter_amp > 0.0 && !(1..=MAX_JITTER_RADIUS).contains(&self.jitter_radius) {
            return bad(
                "jitter_radius",
                format!("{} outside 1..={MAX_JITTER_RADIUS}", self.jitter_radius),
            );
        }
        Ok(())
    }
}

/// Apply a style to a printed rendering.
pub fn style_transform(printed: &GrayImage, spec: &StyleSpec) -> Result<GrayImage> {
    spec.validate()?;
    let canvas = printed.canvas();
    let mut img = printed.clone();
    if spec.shear != 0.0 {
        img = shear(&img, spec.shear, font::baseline_row(canvas));
    }
    for _ in 0..spec.thickness.max(0) {
        img = dilate(&img);
    }
    for _ in 0..(-spec.thickness).max(0) {
        img = erode(&img);
    }
    if spec.wobble_amp > 0.0 {
        let phase = ChaCha8Rng::seed_from_u64(spec.seed).gen_range(0.0..std::f64::consts::TAU);
        img = wobble(&img, spec.wobble_amp, spec.wobble_period, phase);
    }
    if spec.jitter_amp > 0.0 {
        img = jitter(&img, spec.jitter_amp, spec.jitter_radius, spec.seed);
    }
    Ok(img)
}

fn remap(img: &GrayImage, src: impl Fn(isize, isize) -> (isize, isize)) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (sx, sy) = src(x, y);
            out.push(img.get_or_paper(sx, sy));
        }
    }
    GrayImage::new(w, h, out).expect("remapped pixels come from the source")
}

/// Row `y` moves right by `round(s * (baseline - y))`.
pub fn shear(img: &GrayImage, s: f64, baseline: usize) -> GrayImage {
    remap(img, |x, y| {
        let shift = (s * (baseline as f64 - y as f64)).round() as isize;
        (x - shift, y)
    })
}

/// Grow ink by a 2x2 structuring element: each pixel takes the darkest of
/// itself and its left, upper and upper-left neighbours.
pub fn dilate(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let v = [(0, 0), (-1, 0), (0, -1), (-1, -1)]
                .iter()
                .map(|&(dx, dy)| img.get_or_paper(x + dx, y + dy))
                .fold(f32::INFINITY, f32::min);
            out.push(v);
        }
    }
    GrayImage::new(w, h, out).expect("dilated pixels come from the source")
}

/// Thin strokes by clearing the rightmost pixel of every horizontal ink run
/// of length two or more; one-pixel strokes survive.
pub fn erode(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let mut out = img.pixels().to_vec();
    for y in 0..h {
        let row = &img.pixels()[y * w..(y + 1) * w];
        let mut x = 0;
        while x < w {
            if row[x] < 0.0 {
                let start = x;
                while x < w && row[x] < 0.0 {
                    x += 1;
                }
                if x - start >= 2 {
                    out[y * w + x - 1] = PAPER;
                }
            } else {
                x += 1;
            }
        }
    }
    GrayImage::new(w, h, out).expect("eroded pixels come from the source")
}

/// Column `x` moves down by `round(amp * sin(2 pi x / period + phase))`.
pub fn wobble(img: &GrayImage, amp: f64, period: f64, phase: f64) -> GrayImage {
    remap(img, |x, y| {
        let dy = (amp * (std::f64::consts::TAU * x as f64 / period + phase).sin()).round() as isize;
        (x, y - dy)
    })
}

/// Smooth random displacement: uniform noise per pixel, box-blurred twice
/// with `radius`, rescaled so the largest displacement equals `amp`.
pub fn jitter(img: &GrayImage, amp: f64, radius: usize, seed: u64) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let field = |rng: &mut ChaCha8Rng| {
        let raw: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let smooth = box_blur(&box_blur(&raw, w, h, radius), w, h, radius);
        let peak = smooth.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let k = if peak > 0.0 { amp / peak } else { 0.0 };
        smooth.into_iter().map(|v| v * k).collect::<Vec<_>>()
    };
    let dx = field(&mut rng);
    let dy = field(&mut rng);
    remap(img, |x, y| {
        let i = y as usize * w + x as usize;
        (
            (x as f64 + dx[i]).round() as isize,
            (y as f64 + dy[i]).round() as isize,
        )
    })
}

fn box_blur(v: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let r = r as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w as isize {
            let lo = (x - r).max(0) as usize;
            let hi = ((x + r) as usize).min(w - 1);
            let s: f64 = v[y * w + lo..=y * w + hi].iter().sum();
            tmp[y * w + x as usize] = s / (hi - lo + 1) as f64;
        }
    }
    let mut out = vec![0.0; w * h];
    for x in 0..w {
        for y in 0..h as isize {
            let lo = (y - r).max(0) as usize;
            let hi = ((y + r) as usize).min(h - 1);
            let s: f64 = (lo..=hi).map(|yy| tmp[yy * w + x]).sum();
            out[y as usize * w + x] = s / (hi - lo + 1) as f64;
        }
    }
    out
}

/// Deterministic roster of `2 * per_group` styles. Style `i` gets thickness
/// `[-1, 0, 1, 0][i % 4]` and shear level `i / 4` (levels spread evenly over
/// `[-0.25, 0.25]`); groups alternate like a checkerboard over (thickness,
/// level) so both hold every thickness and every shear level.
pub fn roster(per_group: usize, seed: u64) -> Result<(Vec<StyleSpec>, StyleGroups)> {
    if per_group == 0 {
        return Err(Error::config(
            "corpus.styles_per_group",
            "must be at least 1",
        ));
    }
    let n = 2 * per_group;
    let levels = n.div_ceil(4);
    let mut styles = Vec::with_capacity(n);
    let mut groups = StyleGroups::default();
    for i in 0..n {
        let level = i / 4;
        let shear = if levels == 1 {
            0.0
        } else {
            -0.25 + 0.5 * level as f64 / (levels - 1) as f64
        };
        styles.push(StyleSpec {
            style_id: i,
            shear,
            thickness: [-1, 0, 1, 0][i % 4],
            wobble_amp: [0.5, 1.0, 1.5][i % 3],
            wobble_period: [20.0, 28.0, 36.0][(i / 3) % 3],
            jitter_amp: [0.3, 0.6][(i / 2) % 2],
            jitter_radius: 2,
            seed: seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(i as u64),
        });
        if (i % 4 + level) % 2 == 0 {
            groups.a.push(i);
        } else {
            groups.b.push(i);
        }
    }
    Ok((styles, groups))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub styles_per_group: usize,
    pub shared_words: Vec<String>,
    pub extended_words: Vec<String>,
    pub canvas: Canvas,
    pub seed: u64,
}

impl CorpusConfig {
    /// 8 + 8 styles, 50 shared and 20 extended words on the 128x32 canvas.
    pub fn desk(seed: u64) -> Self {
        Self {
            styles_per_group: 8,
            shared_words: shared_words().into_iter().take(50).collect(),
            extended_words: extended_words().into_iter().take(20).collect(),
            canvas: Canvas::DESK,
            seed,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("config serializes"),
        ))
    }
}

/// A manifest with its images held in memory (`images[i]` is `records[i]`).
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: Manifest,
    pub images: Vec<GrayImage>,
}

/// Every word rendered in every style, split 80/20 per style.
pub fn synth_corpus(cfg: &CorpusConfig, font: &Font, exec: Execution) -> Result<Corpus> {
    let vocab = Vocabulary::standard(font::max_chars(cfg.canvas).max(1))?;
    let mut words: Vec<&String> = cfg.shared_words.iter().collect();
    for w in &cfg.extended_words {
        if CharsetGroup::of(w) != CharsetGroup::Extended {
            return Err(Error::config(
                "corpus.extended_words",
                format!("{w:?} has no extended character"),
            ));
        }
        words.push(w);
    }
    if words.is_empty() {
        return Err(Error::config("corpus.shared_words", "word lists are empty"));
    }
    if let Some(w) = cfg
        .shared_words
        .iter()
        .find(|w| CharsetGroup::of(w) != CharsetGroup::Shared)
    {
        return Err(Error::config(
            "corpus.shared_words",
            format!("{w:?} contains an extended character"),
        ));
    }
    let mut printed = Vec::with_capacity(words.len());
    for w in &words {
        let img = font::render_printed(w, cfg.canvas, font)
            .and_then(|img| vocab.tokenize(w).map(|_| img))
            .map_err(|e| {
                Error::config(
                    "corpus.words",
                    format!("word {w:?} cannot be rendered: {e}"),
                )
            })?;
        printed.push(img);
    }
    let (styles, groups) = roster(cfg.styles_per_group, cfg.seed)?;

    let mut records = Vec::with_capacity(styles.len() * words.len());
    let mut jobs = Vec::with_capacity(records.capacity());
    for style in &styles {
        let mut order: Vec<usize> = (0..words.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(style.style_id as u64 + 1);
        order.shuffle(&mut rng);
        let n_test = (words.len() as f64 * TEST_FRACTION).round() as usize;
        let mut split = vec![Split::Train; words.len()];
        for &i in &order[..n_test] {
            split[i] = Split::Test;
        }
        for (wi, w) in words.iter().enumerate() {
            records.push(Record {
                image: format!("images/s{:02}_w{:03}.pgm", style.style_id, wi),
                text: (*w).clone(),
                style_id: style.style_id,
                split: split[wi],
                charset_group: CharsetGroup::of(w),
            });
            jobs.push((style, wi));
        }
    }
    let images = par::try_map(exec, &jobs, |&(style, wi)| {
        style_transform(&printed[wi], style)
    })?;
    let manifest = Manifest {
        schema: SCHEMA,
        vocabulary: vocab,
        canvas: cfg.canvas,
        styles,
        groups,
        config_hash: cfg.hash(),
        records,
    };
    manifest.validate()?;
    Ok(Corpus { manifest, images })
}

/// How unseen (extended word, group-A style) combinations are requested.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Every extended word once in every group-A style.
    #[default]
    Grid,
    /// Extended word `k` only in the `k`-th group-A style (cycling).
    OneToOne,
}

/// Split a grid corpus for the cross-charset adaptation protocol.
///
/// Training keeps shared-charset words in every style plus extended-charset
/// words in group-B styles only. Evaluation holds the extended-charset words
/// in group-A styles, which training never sees.
pub fn build_adaptation_split(
    manifest: &Manifest,
    pairing: Pairing,
) -> Result<(Manifest, Manifest)> {
    let g = &manifest.groups;
    if g.a.is_empty() || g.b.is_empty() {
        return Err(Error::Contract(
            "adaptation split needs two non-empty style groups".into(),
        ));
    }
    let cell = |group_a: bool, cg: CharsetGroup| {
        manifest
            .records
            .iter()
            .filter(move |r| g.in_a(r.style_id) == group_a && r.charset_group == cg)
    };
    for (group_a, cg, name) in [
        (true, CharsetGroup::Shared, "shared words x group A"),
        (false, CharsetGroup::Shared, "shared words x group B"),
        (true, CharsetGroup::Extended, "extended words x group A"),
        (false, CharsetGroup::Extended, "extended words x group B"),
    ] {
        if cell(group_a, cg).next().is_none() {
            return Err(Error::Contract(format!(
                "adaptation cell `{name}` has no records"
            )));
        }
    }
    for &s in &g.a {
        if !manifest.records.iter().any(|r| {
            r.style_id == s && r.charset_group == CharsetGroup::Shared && r.split == Split::Train
        }) {
            return Err(Error::Contract(format!(
                "group-A style {s} has no shared-charset training records"
            )));
        }
    }
    let train: Vec<Record> = manifest
        .records
        .iter()
        .filter(|r| r.charset_group == CharsetGroup::Shared || g.in_b(r.style_id))
        .cloned()
        .collect();
    let mut ext_words: Vec<&str> = Vec::new();
    for r in cell(true, CharsetGroup::Extended) {
        if !ext_words.contains(&r.text.as_str()) {
            ext_words.push(&r.text);
        }
    }
    let eval: Vec<Record> = cell(true, CharsetGroup::Extended)
        .filter(|r| match pairing {
            Pairing::Grid => true,
            Pairing::OneToOne => {
                let k = ext_words
                    .iter()
                    .position(|w| *w == r.text)
                    .expect("word collected above");
                g.a[k % g.a.len()] == r.style_id
            }
        })
        .map(|r| Record {
            split: Split::Test,
            ..r.clone()
        })
        .collect();
    Ok((manifest.with_records(train), manifest.with_records(eval)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GrayImage {
        font::render_printed("Hello", Canvas::DESK, Font::embedded()).unwrap()
    }

    #[test]
    fn identity_spec_is_bit_identical() {
        let img = sample();
        assert_eq!(style_transform(&img, &StyleSpec::identity(0)).unwrap(), img);
    }

    #[test]
    fn out_of_range_specs_name_field() {
        let mut s = StyleSpec::identity(0);
        s.shear = 0.6;
        assert!(style_transform(&sample(), &s)
            .unwrap_err()
            .to_string()
            .contains("style.shear"));
        let mut s = StyleSpec::identity(0);
        s.thickness = 3;
        assert!(s.validate().unwrap_err().to_string().contains("thickness"));
        let mut s = StyleSpec::identity(0);
        s.jitter_amp = 1.0;
        assert!(s
            .validate()
            .unwrap_err()
            .to_string()
            .contains("jitter_radius"));
    }

    #[test]
    fn erosion_keeps_single_pixel_strokes() {
        let img = GrayImage::new(5, 1, vec![-1.0, 1.0, -1.0, -1.0, -1.0]).unwrap();
        assert_eq!(erode(&img).pixels(), [-1.0, 1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn roster_groups_are_balanced() {
        let (styles, groups) = roster(8, 0).unwrap();
        assert_eq!(styles.len(), 16);
        assert_eq!(groups.a.len(), 8);
        assert_eq!(groups.b.len(), 8);
        for s in &styles {
            s.validate().unwrap();
        }
        let count = |g: &[usize], t: i32| g.iter().filter(|&&i| styles[i].thickness == t).count();
        for t in -1..=1 {
            assert_eq!(count(&groups.a, t), count(&groups.b, t));
        }
        assert_eq!(count(&groups.a, 0), 4);
    }

    #[test]
    fn shipped_word_lists() {
        let s = shared_words();
        let e = extended_words();
        assert!(s.len() >= 50 && e.len() >= 20);
        assert!(s
            .iter()
            .all(|w| CharsetGroup::of(w) == CharsetGroup::Shared));
        assert!(e
            .iter()
            .all(|w| CharsetGroup::of(w) == CharsetGroup::Extended));
    }
}

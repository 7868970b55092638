//! Corpus manifests: the JSON index of word images every experiment reads.
//!
//! ```json
//! {
//!   "schema": 1,
//!   "vocabulary": { "chars": " ab…", "max_len": 8 },
//!   "canvas": { "width": 72, "height": 24 },
//!   "styles": [ { "style_id": 0, "shear": -0.25, … } ],
//!   "groups": { "a": [0, 3], "b": [1, 2] },
//!   "config_hash": "<sha256 hex>",
//!   "records": [ { "image": "images/s00_w000.pgm", "text": "house", "style_id": 0,
//!                  "split": "train", "charset_group": "shared" } ]
//! }
//! ```
//!
//! Image paths are relative to the directory holding the manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::image::{Canvas, GrayImage};
use crate::par::{self, Execution};
use crate::synthcorpus::StyleSpec;
use crate::vocab::{self, Vocabulary};
use crate::{Error, Result};

pub const SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CharsetGroup {
    Shared,
    Extended,
}

impl CharsetGroup {
    pub fn of(text: &str) -> Self {
        if text.chars().any(vocab::is_extended) {
            CharsetGroup::Extended
        } else {
            CharsetGroup::Shared
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub image: String,
    pub text: String,
    pub style_id: usize,
    pub split: Split,
    pub charset_group: CharsetGroup,
}

/// Style roster partition; the analog of two writer pools.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleGroups {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

impl StyleGroups {
    pub fn in_a(&self, style: usize) -> bool {
        self.a.contains(&style)
    }

    pub fn in_b(&self, style: usize) -> bool {
        self.b.contains(&style)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: u32,
    pub vocabulary: Vocabulary,
    pub canvas: Canvas,
    pub styles: Vec<StyleSpec>,
    pub groups: StyleGroups,
    pub config_hash: String,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn n_styles(&self) -> usize {
        self.styles.len()
    }

    /// Same header, different records.
    pub fn with_records(&self, records: Vec<Record>) -> Manifest {
        Manifest {
            records,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA {
            return Err(Error::format(
                "manifest",
                format!("schema {} (expected {SCHEMA})", self.schema),
            ));
        }
        for (i, s) in self.styles.iter().enumerate() {
            if s.style_id != i {
                return Err(Error::format(
                    "manifest",
                    format!("styles[{i}] has style_id {}", s.style_id),
                ));
            }
        }
        for (index, r) in self.records.iter().enumerate() {
            let fail = |message: String| Err(Error::Ingest { index, message });
            if r.style_id >= self.n_styles() {
                return fail(format!(
                    "style_id {} outside 0..{}",
                    r.style_id,
                    self.n_styles()
                ));
            }
            if let Err(e) = self.vocabulary.tokenize(&r.text) {
                return fail(format!("text {:?}: {e}", r.text));
            }
            if CharsetGroup::of(&r.text) != r.charset_group {
                return fail(format!(
                    "text {:?} is not in charset group {:?}",
                    r.text, r.charset_group
                ));
            }
            if r.image.is_empty() {
                return fail("empty image path".into());
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("manifest serializes");
        out.push(b'\n');
        out
    }

    pub fn from_json(bytes: &[u8], context: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let m: Manifest = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::format(context, format!("at `{}`: {}", e.path(), e.inner())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn image_path(dir: &Path, record: &Record) -> PathBuf {
        dir.join(&record.image)
    }

    /// Load every record's image from `dir`, checking it against the canvas.
    pub fn load_images(&self, dir: &Path, exec: Execution) -> Result<Vec<GrayImage>> {
        let indexed: Vec<(usize, &Record)> = self.records.iter().enumerate().collect();
        par::try_map(exec, &indexed, |&(index, r)| {
            let img =
                GrayImage::read_pgm(&Self::image_path(dir, r)).map_err(|e| Error::Ingest {
                    index,
                    message: e.to_string(),
                })?;
            if img.canvas() != self.canvas {
                return Err(Error::Ingest {
                    index,
                    message: format!(
                        "image is {}x{}, canvas is {}x{}",
                        img.width(),
                        img.height(),
                        self.canvas.width,
                        self.canvas.height
                    ),
                });
            }
            Ok(img)
        })
    }

    /// Write images next to a manifest file; `images[i]` belongs to `records[i]`.
    pub fn write_with_images(&self, path: &Path, images: &[GrayImage]) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new("."));
        for (r, img) in self.records.iter().zip(images) {
            let p = Self::image_path(dir, r);
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            img.write_pgm(&p)?;
        }
        self.write(path)
    }
}

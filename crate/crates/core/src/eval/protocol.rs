//! Evaluation protocols producing `condition,<metric>_mean,<metric>_std,n_seeds` tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classifier::{ClassifierConfig, StyleClassifier};
use super::metrics::{cer, mean_std, StyleReport};
use super::recognizer::Recognizer;
use crate::font::Font;
use crate::image::GrayImage;
use crate::manifest::{Record, Split};
use crate::par::Execution;
use crate::sampler::{Generator, SampleRequest};
use crate::synthcorpus::Corpus;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    TextQuality,
    Adaptation,
    Style,
}

impl ProtocolKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolKind::TextQuality => "textquality",
            ProtocolKind::Adaptation => "adaptation",
            ProtocolKind::Style => "style",
        }
    }

    fn metric(self) -> &'static str {
        match self {
            ProtocolKind::Style => "accuracy",
            _ => "cer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
    pub per_seed: Vec<f64>,
}

impl ReportRow {
    fn new(condition: &str, per_seed: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&per_seed);
        Self {
            condition: condition.to_string(),
            mean,
            std,
            n_seeds: per_seed.len(),
            per_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub kind: ProtocolKind,
    pub metric: String,
    pub rows: Vec<ReportRow>,
    /// Confusion matrices of the style protocol, keyed by condition and seed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub confusion: Vec<(String, Option<u64>, StyleReport)>,
}

impl ProtocolReport {
    fn new(kind: ProtocolKind) -> Self {
        Self {
            kind,
            metric: kind.metric().to_string(),
            rows: Vec::new(),
            confusion: Vec::new(),
        }
    }

    pub fn row(&self, condition: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn to_csv(&self) -> String {
        let m = &self.metric;
        let mut out = format!("condition,{m}_mean,{m}_std,n_seeds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.condition, r.mean, r.std, r.n_seeds
            ));
        }
        out
    }

    /// Write `<kind>.csv` and `<kind>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{}.csv", self.kind.as_str()));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{}.json", self.kind.as_str()));
        let mut bytes = serde_json::to_vec_pretty(self).expect("report serializes");
        bytes.push(b'\n');
        std::fs::write(&json, bytes).map_err(|e| Error::io(&json, e))
    }
}

/// Sampling seed of request `index` in the run with seed `seed`.
pub fn request_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Regenerate `records` (same text and style) with `gen`.
pub fn generate_clone(
    gen: &Generator,
    records: &[&Record],
    seed: u64,
    exec: Execution,
) -> Result<Vec<GrayImage>> {
    let reqs: Vec<SampleRequest> = records
        .iter()
        .enumerate()
        .map(|(i, r)| SampleRequest {
            text: r.text.clone(),
            writer: r.style_id,
            seed: request_seed(seed, i),
        })
        .collect();
    gen.generate_batch(&reqs, exec)
}

fn split(corpus: &Corpus, which: Split) -> (Vec<&Record>, Vec<GrayImage>) {
    corpus
        .manifest
        .records
        .iter()
        .zip(&corpus.images)
        .filter(|(r, _)| r.split == which)
        .map(|(r, i)| (r, i.clone()))
        .unzip()
}

fn recognized_cer(
    rec: &Recognizer,
    images: &[GrayImage],
    records: &[&Record],
    exec: Execution,
) -> Result<f64> {
    let hyps = crate::par::try_map(exec, images, |img| rec.recognize(img))?;
    let refs: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    Ok(cer(&refs, &hyps)?.cer)
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::config("eval.seeds", "at least one seed is required"));
    }
    Ok(())
}

/// Recognizer templates fitted on real, generated or combined training
/// images, always scored on the real test split. Each generator adds the
/// rows `<name>` (generated clone of the train split only) and
/// `real+<name>`. `limit` caps the number of training records used.
pub fn text_quality(
    corpus: &Corpus,
    generators: &[(&str, &Generator)],
    seeds: &[u64],
    limit: Option<usize>,
    font: &Font,
    exec: Execution,
) -> Result<ProtocolReport> {
    check_seeds(seeds)?;
    let m = &corpus.manifest;
    let (mut train, mut train_imgs) = split(corpus, Split::Train);
    if let Some(n) = limit {
        train.truncate(n);
        train_imgs.truncate(n);
    }
    let (test, test_imgs) = split(corpus, Split::Test);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Contract(
            "text-quality protocol needs train and test records".into(),
        ));
    }
    let texts = |rs: &[&Record]| rs.iter().map(|r| r.text.clone()).collect::<Vec<_>>();
    let train_texts = texts(&train);

    let mut report = ProtocolReport::new(ProtocolKind::TextQuality);
    let real = Recognizer::fit(&m.vocabulary, font, m.canvas, &train_imgs, &train_texts)?;
    report.rows.push(ReportRow::new(
        "real",
        vec![recognized_cer(&real, &test_imgs, &test, exec)?],
    ));
    for &(name, gen) in generators {
        let (mut generated, mut union) = (Vec::new(), Vec::new());
        for &seed in seeds {
            let fake = generate_clone(gen, &train, seed, exec)?;
            let rec = Recognizer::fit(&m.vocabulary, font, m.canvas, &fake, &train_texts)?;
            generated.push(recognized_cer(&rec, &test_imgs, &test, exec)?);
            let both_imgs: Vec<GrayImage> = train_imgs.iter().chain(&fake).cloned().collect();
            let both_texts: Vec<String> = train_texts.iter().chain(&train_texts).cloned().collect();
            let rec = Recognizer::fit(&m.vocabulary, font, m.canvas, &both_imgs, &both_texts)?;
            union.push(recognized_cer(&rec, &test_imgs, &test, exec)?);
        }
        report.rows.push(ReportRow::new(name, generated));
        report
            .rows
            .push(ReportRow::new(&format!("real+{name}"), union));
    }
    Ok(report)
}

/// Generator conditions compared by the adaptation protocol, in report order.
pub const ADAPTATION_CONDITIONS: [&str; 2] = ["full", "text-only"];

/// CER of the font-template recognizer on unseen (extended word, group-A
/// style) combinations: the real renderings and the generators named
/// `full` and `text-only`, which must both be present.
pub fn adaptation(
    eval: &Corpus,
    generators: &[(&str, &Generator)],
    seeds: &[u64],
    font: &Font,
    exec: Execution,
) -> Result<ProtocolReport> {
    check_seeds(seeds)?;
    let find = |name: &str| generators.iter().find(|(n, _)| *n == name).map(|(_, g)| *g);
    let mut gens = Vec::new();
    for name in ADAPTATION_CONDITIONS {
        let Some(g) = find(name) else {
            return Err(Error::config(
                format!("eval.checkpoints.{name}"),
                format!("the adaptation protocol needs a `{name}` generator checkpoint"),
            ));
        };
        gens.push((name, g));
    }
    let m = &eval.manifest;
    let records: Vec<&Record> = m.records.iter().collect();
    if records.is_empty() {
        return Err(Error::Contract("adaptation evaluation set is empty".into()));
    }
    let rec = Recognizer::from_font(&m.vocabulary, font, m.canvas)?;
    let mut report = ProtocolReport::new(ProtocolKind::Adaptation);
    report.rows.push(ReportRow::new(
        "real",
        vec![recognized_cer(&rec, &eval.images, &records, exec)?],
    ));
    for (name, gen) in gens {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let imgs = generate_clone(gen, &records, seed, exec)?;
            per_seed.push(recognized_cer(&rec, &imgs, &records, exec)?);
        }
        report.rows.push(ReportRow::new(name, per_seed));
    }
    Ok(report)
}

/// Style classifier trained on the real train split, tested on the real
/// test split and on generations of (up to `per_style` of) its records.
pub fn style(
    corpus: &Corpus,
    classifier: &ClassifierConfig,
    generators: &[(&str, &Generator)],
    seeds: &[u64],
    per_style: Option<usize>,
    exec: Execution,
) -> Result<(ProtocolReport, StyleClassifier)> {
    check_seeds(seeds)?;
    let n = corpus.manifest.n_styles();
    let (train, train_imgs) = split(corpus, Split::Train);
    let labels: Vec<usize> = train.iter().map(|r| r.style_id).collect();
    let clf = StyleClassifier::train(classifier, &train_imgs, &labels, n, exec)?;

    let (test, test_imgs) = split(corpus, Split::Test);
    let mut taken = vec![0usize; n];
    let (mut sub, mut sub_imgs) = (Vec::new(), Vec::new());
    for (r, img) in test.iter().zip(&test_imgs) {
        if per_style.is_none_or(|k| taken[r.style_id] < k) {
            taken[r.style_id] += 1;
            sub.push(*r);
            sub_imgs.push(img.clone());
        }
    }
    if sub.is_empty() {
        return Err(Error::Contract("style protocol needs test records".into()));
    }
    let truth: Vec<usize> = sub.iter().map(|r| r.style_id).collect();
    let mut report = ProtocolReport::new(ProtocolKind::Style);
    let real = StyleReport::new(n, &truth, &clf.classify_all(&sub_imgs, exec)?)?;
    report
        .rows
        .push(ReportRow::new("real", vec![real.accuracy]));
    report.confusion.push(("real".into(), None, real));
    for &(name, gen) in generators {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let imgs = generate_clone(gen, &sub, seed, exec)?;
            let r = StyleReport::new(n, &truth, &clf.classify_all(&imgs, exec)?)?;
            per_seed.push(r.accuracy);
            report.confusion.push((name.into(), Some(seed), r));
        }
        report.rows.push(ReportRow::new(name, per_seed));
    }
    Ok((report, clf))
}

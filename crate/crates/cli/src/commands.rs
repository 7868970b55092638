use std::path::{Path, PathBuf};

use glyphdiff::checkpoint::Checkpoint;
use glyphdiff::conditioning::ConditioningMode;
use glyphdiff::denoiser::Denoiser;
use glyphdiff::eval::protocol::{self, ProtocolKind, ADAPTATION_CONDITIONS};
use glyphdiff::font::Font;
use glyphdiff::manifest::Manifest;
use glyphdiff::par::Execution;
use glyphdiff::sampler::{Generator, SampleRequest};
use glyphdiff::schedule::NoiseSchedule;
use glyphdiff::synthcorpus::{build_adaptation_split, synth_corpus, Corpus};
use glyphdiff::trainer::{examples_from_manifest, Trainer};
use glyphdiff::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::LoadedConfig;
use crate::provenance::Run;

pub const MANIFEST: &str = "manifest.json";
pub const ADAPT_TRAIN: &str = "adaptation-train.json";
pub const ADAPT_EVAL: &str = "adaptation-eval.json";

pub fn corpus_dir(cfg: &LoadedConfig) -> PathBuf {
    cfg.output_dir.join("corpus")
}

pub fn train_dir(cfg: &LoadedConfig, mode: ConditioningMode) -> PathBuf {
    cfg.output_dir.join("train").join(mode.as_str())
}

pub fn final_checkpoint(cfg: &LoadedConfig, mode: ConditioningMode) -> PathBuf {
    train_dir(cfg, mode).join(format!("step-{}.gdif", cfg.config.train.steps))
}

fn note(msg: impl AsRef<str>) {
    eprintln!("{}", msg.as_ref());
}

pub fn corpus(cfg: &LoadedConfig, exec: Execution) -> Result<()> {
    let mut run = Run::start("corpus", cfg.hash.clone());
    run.input(&cfg.path)?;
    let dir = corpus_dir(cfg);
    let c = synth_corpus(&cfg.config.corpus, Font::embedded(), exec)?;
    let path = dir.join(MANIFEST);
    c.manifest.write_with_images(&path, &c.images)?;
    run.output(&path);
    let (train, eval) = build_adaptation_split(&c.manifest, cfg.config.eval.pairing)?;
    for (name, m) in [(ADAPT_TRAIN, train), (ADAPT_EVAL, eval)] {
        let p = dir.join(name);
        m.write(&p)?;
        run.output(&p);
    }
    run.finish(&dir)?;
    note(format!(
        "corpus: {} records in {}",
        c.manifest.records.len(),
        dir.display()
    ));
    Ok(())
}

/// Read a manifest written by `corpus`, checking it matches the config.
fn read_manifest(cfg: &LoadedConfig, name: &str, run: &mut Run) -> Result<Manifest> {
    let path = corpus_dir(cfg).join(name);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m = Manifest::from_json(&bytes, &path.display().to_string())?;
    if m.config_hash != cfg.config.corpus.hash() {
        return Err(Error::config(
            "corpus",
            format!(
                "{} was built from a different corpus config; rerun `corpus`",
                path.display()
            ),
        ));
    }
    run.input_bytes(&path, &bytes);
    Ok(m)
}

fn load_corpus(cfg: &LoadedConfig, name: &str, run: &mut Run, exec: Execution) -> Result<Corpus> {
    let manifest = read_manifest(cfg, name, run)?;
    let images = manifest.load_images(&corpus_dir(cfg), exec)?;
    Ok(Corpus { manifest, images })
}

fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Ok(None);
    };
    let mut best: Option<(u64, PathBuf)> = None;
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-")?.strip_suffix(".gdif")?.parse().ok());
        if let Some(s) = step {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

pub fn train(
    cfg: &LoadedConfig,
    mode: ConditioningMode,
    resume: bool,
    exec: Execution,
) -> Result<PathBuf> {
    let c = &cfg.config;
    let mut run = Run::start(&format!("train {}", mode.as_str()), cfg.hash.clone());
    run.input(&cfg.path)?;
    let name = if c.eval.protocol == ProtocolKind::Adaptation {
        ADAPT_TRAIN
    } else {
        MANIFEST
    };
    let manifest = read_manifest(cfg, name, &mut run)?;
    let denoiser = Denoiser::new(c.model_config()?)?;
    let font = Font::embedded();
    let data = examples_from_manifest(&manifest, &corpus_dir(cfg), &denoiser, mode, font, exec)?;
    let trainer = Trainer::new(denoiser, c.schedule, c.train.clone(), mode, data, exec)?;
    let dir = train_dir(cfg, mode);
    let state = match resume
        .then(|| latest_checkpoint(&dir))
        .transpose()?
        .flatten()
    {
        Some(p) => {
            run.input(&p)?;
            note(format!(
                "train {}: resuming from {}",
                mode.as_str(),
                p.display()
            ));
            trainer.resume_state(&Checkpoint::load(&p)?)?
        }
        None => trainer.initial_state()?,
    };
    note(format!(
        "train {}: {} examples, {} parameters",
        mode.as_str(),
        trainer.data.len(),
        state.params.numel()
    ));
    let every = c.train.checkpoint_every.max(1);
    let outcome = trainer.run(state, &dir, |row| {
        if row.step % every == 0 {
            note(format!(
                "train {}: step {} loss {:.5} ({} ms)",
                mode.as_str(),
                row.step,
                row.loss,
                row.wall_ms
            ));
        }
    })?;
    run.output(&dir.join("loss.csv"));
    run.output(&outcome.final_checkpoint);
    run.finish(&dir)?;
    Ok(outcome.final_checkpoint)
}

/// A checkpoint with everything needed to sample from it.
pub struct Loaded {
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub checkpoint: Checkpoint,
}

impl Loaded {
    pub fn open(path: &Path) -> Result<Self> {
        let checkpoint = Checkpoint::load(path)?;
        Ok(Self {
            denoiser: Denoiser::new(checkpoint.header.model.clone())?,
            schedule: checkpoint.header.schedule.build()?,
            checkpoint,
        })
    }

    pub fn generator<'a>(&'a self, font: &'a Font) -> Generator<'a> {
        Generator {
            denoiser: &self.denoiser,
            params: self.checkpoint.sampling_params(),
            schedule: &self.schedule,
            mode: self.checkpoint.header.conditioning,
            font,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestEntry {
    pub text: String,
    pub writer: usize,
    pub seed: u64,
}

pub fn read_requests(path: &Path) -> Result<(Vec<u8>, Vec<RequestEntry>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    let reqs = serde_path_to_error::deserialize(de).map_err(|e| {
        let p = e.path().to_string();
        let field = if p == "." {
            "requests".into()
        } else {
            format!("requests{p}")
        };
        Error::config(field, e.inner().to_string())
    })?;
    Ok((bytes, reqs))
}

pub fn sample(
    checkpoint: &Path,
    requests: &[RequestEntry],
    out_dir: &Path,
    exec: Execution,
) -> Result<Vec<PathBuf>> {
    let args = serde_json::to_vec(requests).expect("requests serialize");
    let mut run = Run::start("sample", hex::encode(Sha256::digest(&args)));
    run.input(checkpoint)?;
    let model = Loaded::open(checkpoint)?;
    let font = Font::embedded();
    let reqs: Vec<SampleRequest> = requests
        .iter()
        .map(|r| SampleRequest {
            text: r.text.clone(),
            writer: r.writer,
            seed: r.seed,
        })
        .collect();
    let images = model.generator(font).generate_batch(&reqs, exec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let p = out_dir.join(format!("sample-{i:04}.pgm"));
        img.write_pgm(&p)?;
        run.output(&p);
        paths.push(p);
    }
    run.finish(out_dir)?;
    Ok(paths)
}

pub fn eval(cfg: &LoadedConfig, exec: Execution) -> Result<PathBuf> {
    let c = &cfg.config;
    let kind = c.eval.protocol;
    let mut run = Run::start(&format!("eval {}", kind.as_str()), cfg.hash.clone());
    run.input(&cfg.path)?;
    let font = Font::embedded();

    let mut models = Vec::new();
    for mode in [ConditioningMode::Full, ConditioningMode::TextOnly] {
        let p = final_checkpoint(cfg, mode);
        if p.exists() {
            run.input(&p)?;
            models.push((mode.as_str(), Loaded::open(&p)?));
        } else if ADAPTATION_CONDITIONS.contains(&mode.as_str()) {
            note(format!("eval: no checkpoint at {}", p.display()));
        }
    }
    let gens: Vec<(&str, Generator)> = models
        .iter()
        .map(|(n, m)| (*n, m.generator(font)))
        .collect();
    let gen_refs: Vec<(&str, &Generator)> = gens.iter().map(|(n, g)| (*n, g)).collect();

    let e = &c.eval;
    let report = match kind {
        ProtocolKind::TextQuality => {
            let corpus = load_corpus(cfg, MANIFEST, &mut run, exec)?;
            protocol::text_quality(&corpus, &gen_refs, &e.seeds, e.limit, font, exec)?
        }
        ProtocolKind::Adaptation => {
            let corpus = load_corpus(cfg, ADAPT_EVAL, &mut run, exec)?;
            protocol::adaptation(&corpus, &gen_refs, &e.seeds, font, exec)?
        }
        ProtocolKind::Style => {
            let corpus = load_corpus(cfg, MANIFEST, &mut run, exec)?;
            protocol::style(
                &corpus,
                &e.classifier,
                &gen_refs,
                &e.seeds,
                e.per_style,
                exec,
            )?
            .0
        }
    };
    let dir = cfg.output_dir.join("eval");
    report.write(&dir)?;
    run.output(&dir.join(format!("{}.csv", kind.as_str())));
    run.output(&dir.join(format!("{}.json", kind.as_str())));
    run.finish(&dir)?;
    print!("{}", report.to_csv());
    Ok(dir)
}

/// Corpus, both conditioning modes, then the evaluation protocol.
pub fn experiment(cfg: &LoadedConfig, resume: bool, exec: Execution) -> Result<()> {
    let mut run = Run::start(
        &format!("experiment {}", cfg.config.eval.protocol.as_str()),
        cfg.hash.clone(),
    );
    run.input(&cfg.path)?;
    corpus(cfg, exec)?;
    for mode in [ConditioningMode::Full, ConditioningMode::TextOnly] {
        run.output(&train(cfg, mode, resume, exec)?);
    }
    let dir = eval(cfg, exec)?;
    run.output(&dir);
    run.finish(&cfg.output_dir)?;
    Ok(())
}

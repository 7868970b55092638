//! Sequential vs. rayon execution of the data-parallel hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use glyphdiff::conditioning::ConditioningMode;
use glyphdiff::denoiser::{Denoiser, ModelConfig};
use glyphdiff::font::Font;
use glyphdiff::image::Canvas;
use glyphdiff::par::Execution;
use glyphdiff::sampler::{Generator, SampleRequest};
use glyphdiff::schedule::ScheduleConfig;
use glyphdiff::synthcorpus::{shared_words, synth_corpus, CorpusConfig};
use glyphdiff::trainer::{noise_item, Example, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn corpus_config() -> CorpusConfig {
    CorpusConfig {
        styles_per_group: 4,
        shared_words: shared_words().into_iter().take(8).collect(),
        extended_words: vec![],
        canvas: Canvas::COMPACT,
        seed: 1,
    }
}

fn corpus(c: &mut Criterion) {
    let cfg = corpus_config();
    let mut group = c.benchmark_group("synth_corpus");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| synth_corpus(&cfg, Font::embedded(), exec).unwrap())
        });
    }
    group.finish();
}

fn gradients(c: &mut Criterion) {
    let font = Font::embedded();
    let corpus = synth_corpus(&corpus_config(), font, Execution::Parallel).unwrap();
    let mut group = c.benchmark_group("loss_and_grads_batch8");
    group.sample_size(10);
    for (name, exec) in MODES {
        let denoiser = Denoiser::new(ModelConfig::compact(8).unwrap()).unwrap();
        let data: Vec<Example> = corpus
            .manifest
            .records
            .iter()
            .zip(&corpus.images)
            .take(8)
            .map(|(r, img)| {
                Example::new(
                    img,
                    &r.text,
                    r.style_id,
                    &denoiser,
                    ConditioningMode::Full,
                    font,
                )
                .unwrap()
            })
            .collect();
        let trainer = Trainer::new(
            denoiser,
            ScheduleConfig::DESK,
            TrainConfig::default(),
            ConditioningMode::Full,
            data,
            exec,
        )
        .unwrap();
        let params = trainer.denoiser.init::<f32>(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let items: Vec<_> = (0..8)
            .map(|i| {
                (
                    i,
                    noise_item(&trainer.data[i].x0, &trainer.schedule, &mut rng).unwrap(),
                )
            })
            .collect();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| trainer.loss_and_grads(&params, &items).unwrap())
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let font = Font::embedded();
    let denoiser = Denoiser::new(ModelConfig::compact(8).unwrap()).unwrap();
    let params = denoiser.init::<f32>(0).unwrap();
    let schedule = ScheduleConfig {
        steps: 10,
        beta_start: 1e-3,
        beta_end: 0.2,
    }
    .build()
    .unwrap();
    let gen = Generator {
        denoiser: &denoiser,
        params: &params,
        schedule: &schedule,
        mode: ConditioningMode::Full,
        font,
    };
    let reqs: Vec<SampleRequest> = (0..8)
        .map(|i| SampleRequest {
            text: "ink".into(),
            writer: i,
            seed: i as u64,
        })
        .collect();
    let mut group = c.benchmark_group("generate_batch8_10steps");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| gen.generate_batch(&reqs, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, corpus, gradients, sampling);
criterion_main!(benches);

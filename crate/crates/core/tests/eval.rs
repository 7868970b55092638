use glyphdiff::conditioning::ConditioningMode;
use glyphdiff::denoiser::{Denoiser, ModelConfig};
use glyphdiff::eval::protocol::{self, ProtocolKind};
use glyphdiff::eval::*;
use glyphdiff::font::{self, Font};
use glyphdiff::image::{Canvas, GrayImage};
use glyphdiff::manifest::Split;
use glyphdiff::par::Execution;
use glyphdiff::sampler::Generator;
use glyphdiff::schedule::ScheduleConfig;
use glyphdiff::synthcorpus::*;
use glyphdiff::vocab::Vocabulary;
use proptest::prelude::*;

/// Textbook full-table Levenshtein recurrence.
fn dp_oracle(a: &[char], b: &[char]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in t.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        t[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = t[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            t[i][j] = sub.min(t[i - 1][j] + 1).min(t[i][j - 1] + 1);
        }
    }
    t[a.len()][b.len()]
}

fn word() -> impl Strategy<Value = String> {
    "[abcäß]{0,12}"
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn edit_distance_matches_dp_oracle(a in word(), b in word()) {
        let (ca, cb): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        prop_assert_eq!(edit_distance(&a, &b), dp_oracle(&ca, &cb));
    }

    #[test]
    fn edit_distance_is_a_metric(a in word(), b in word(), c in word()) {
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
    }
}

proptest! {
    #[test]
    fn aggregate_cer_ignores_record_order(
        pairs in prop::collection::vec(("[ab]{1,6}", "[ab]{0,6}"), 1..12),
        rot in 0usize..12,
    ) {
        let (refs, hyps): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
        let a = cer(&refs, &hyps).unwrap();
        let k = rot % refs.len();
        let (mut r2, mut h2) = (refs.clone(), hyps.clone());
        r2.rotate_left(k);
        h2.rotate_left(k);
        let b = cer(&r2, &h2).unwrap();
        prop_assert_eq!(a.cer, b.cer);
        prop_assert!(a.records.iter().all(|r| r.distance as f64 / r.ref_len as f64 >= 0.0));
    }
}

#[test]
fn cer_of_one_substitution_in_five() {
    assert_eq!(cer(&["hello"], &["hallo"]).unwrap().cer, 0.2);
    assert_eq!(cer(&["hello"], &["hello"]).unwrap().cer, 0.0);
}

fn recognizer(canvas: Canvas) -> Recognizer {
    let vocab = Vocabulary::standard(font::max_chars(canvas)).unwrap();
    Recognizer::from_font(&vocab, Font::embedded(), canvas).unwrap()
}

#[test]
fn recognizer_reads_every_printed_word() {
    let font = Font::embedded();
    for canvas in [Canvas::COMPACT, Canvas::DESK] {
        let r = recognizer(canvas);
        for w in shared_words().iter().chain(&extended_words()) {
            let img = font::render_printed(w, canvas, font).unwrap();
            assert_eq!(&r.recognize(&img).unwrap(), w);
        }
        assert_eq!(r.recognize(&GrayImage::blank(canvas)).unwrap(), "");
    }
}

#[test]
fn recognizer_handles_mild_styles() {
    let font = Font::embedded();
    let canvas = Canvas::COMPACT;
    let r = recognizer(canvas);
    let (mut refs, mut hyps) = (Vec::new(), Vec::new());
    for (i, shear) in [-0.2, -0.1, 0.0, 0.1, 0.2].into_iter().enumerate() {
        let spec = StyleSpec {
            shear,
            wobble_amp: 0.5 * (i % 2) as f64,
            wobble_period: 30.0,
            ..StyleSpec::identity(i)
        };
        for w in shared_words() {
            let img =
                style_transform(&font::render_printed(&w, canvas, font).unwrap(), &spec).unwrap();
            hyps.push(r.recognize(&img).unwrap());
            refs.push(w);
        }
    }
    let report = cer(&refs, &hyps).unwrap();
    assert!(report.cer < 0.10, "CER {}", report.cer);
}

#[test]
fn recognizer_is_deterministic_and_rejects_other_sizes() {
    let img = GrayImage::new(
        72,
        24,
        (0..72 * 24)
            .map(|i| ((i * 37) % 200) as f32 / 100.0 - 1.0)
            .collect(),
    )
    .unwrap();
    let r = recognizer(Canvas::COMPACT);
    assert_eq!(r.recognize(&img).unwrap(), r.recognize(&img).unwrap());
    assert!(r.recognize(&GrayImage::blank(Canvas::DESK)).is_err());
}

#[test]
fn fitted_templates_follow_the_training_style() {
    let font = Font::embedded();
    let canvas = Canvas::COMPACT;
    let vocab = Vocabulary::standard(font::max_chars(canvas)).unwrap();
    let spec = StyleSpec {
        thickness: 1,
        ..StyleSpec::identity(0)
    };
    let styled =
        |w: &str| style_transform(&font::render_printed(w, canvas, font).unwrap(), &spec).unwrap();
    let words = shared_words();
    let imgs: Vec<GrayImage> = words.iter().map(|w| styled(w)).collect();
    let fitted = Recognizer::fit(&vocab, font, canvas, &imgs, &words).unwrap();
    let plain = Recognizer::from_font(&vocab, font, canvas).unwrap();
    let score = |r: &Recognizer| {
        let hyps: Vec<String> = imgs.iter().map(|i| r.recognize(i).unwrap()).collect();
        cer(&words, &hyps).unwrap().cer
    };
    assert!(score(&fitted) <= score(&plain));
    assert!(score(&fitted) < 0.05, "{}", score(&fitted));
}

fn classifier_corpus(per_group: usize) -> Corpus {
    let cfg = CorpusConfig {
        styles_per_group: per_group,
        shared_words: shared_words().into_iter().take(20).collect(),
        extended_words: vec![],
        canvas: Canvas::COMPACT,
        seed: 8,
    };
    synth_corpus(&cfg, Font::embedded(), Execution::Parallel).unwrap()
}

fn split(c: &Corpus, which: Split) -> (Vec<GrayImage>, Vec<usize>) {
    c.manifest
        .records
        .iter()
        .zip(&c.images)
        .filter(|(r, _)| r.split == which)
        .map(|(r, i)| (i.clone(), r.style_id))
        .unzip()
}

#[test]
fn classifier_separates_clean_styles() {
    let c = classifier_corpus(4);
    let (xi, yi) = split(&c, Split::Train);
    let (xt, yt) = split(&c, Split::Test);
    let cfg = ClassifierConfig {
        steps: 300,
        batch_size: 16,
        ..ClassifierConfig::default()
    };
    let clf = StyleClassifier::train(&cfg, &xi, &yi, 8, Execution::Parallel).unwrap();
    assert!(clf.parameter_count() < 60_000);
    let acc = |x: &[GrayImage], y: &[usize]| {
        let p = clf.classify_all(x, Execution::Parallel).unwrap();
        StyleReport::new(8, y, &p).unwrap().accuracy
    };
    let (train_acc, test_acc) = (acc(&xi, &yi), acc(&xt, &yt));
    assert!(test_acc > 0.9, "held-out accuracy {test_acc}");
    assert!(train_acc >= test_acc);
}

#[test]
fn classifier_ignores_listing_order() {
    let c = classifier_corpus(1);
    let (xi, yi) = split(&c, Split::Train);
    let cfg = ClassifierConfig {
        steps: 20,
        batch_size: 4,
        ..ClassifierConfig::default()
    };
    let a = StyleClassifier::train(&cfg, &xi, &yi, 2, Execution::Parallel).unwrap();
    let (mut xr, mut yr) = (xi.clone(), yi.clone());
    xr.reverse();
    yr.reverse();
    let b = StyleClassifier::train(&cfg, &xr, &yr, 2, Execution::Sequential).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn classifier_preconditions() {
    let c = classifier_corpus(1);
    let (xi, yi) = split(&c, Split::Train);
    let cfg = ClassifierConfig {
        steps: 1,
        ..ClassifierConfig::default()
    };
    assert!(StyleClassifier::train(&cfg, &xi, &yi, 1, Execution::Parallel).is_err());
    let only0: Vec<usize> = vec![0; yi.len()];
    let err = StyleClassifier::train(&cfg, &xi, &only0, 2, Execution::Parallel)
        .unwrap_err()
        .to_string();
    assert!(err.contains("style 1"), "{err}");
}

#[test]
fn reports_follow_the_table_schema() {
    let c = classifier_corpus(1);
    let font = Font::embedded();
    let d = Denoiser::new(ModelConfig::compact(2).unwrap()).unwrap();
    let params = d.init::<f32>(0).unwrap();
    let sched = ScheduleConfig {
        steps: 2,
        beta_start: 0.1,
        beta_end: 0.2,
    }
    .build()
    .unwrap();
    let gen = Generator {
        denoiser: &d,
        params: &params,
        schedule: &sched,
        mode: ConditioningMode::Full,
        font,
    };

    let real_only = protocol::text_quality(&c, &[], &[1], None, font, Execution::Parallel).unwrap();
    assert_eq!(real_only.rows.len(), 1);
    assert!(real_only
        .to_csv()
        .starts_with("condition,cer_mean,cer_std,n_seeds\nreal,"));

    let err =
        protocol::adaptation(&c, &[("full", &gen)], &[1], font, Execution::Parallel).unwrap_err();
    assert!(err.to_string().contains("text-only"), "{err}");

    let rep = protocol::adaptation(
        &c,
        &[("full", &gen), ("text-only", &gen)],
        &[1, 2, 3],
        font,
        Execution::Parallel,
    );
    let rep = rep.unwrap();
    assert_eq!(rep.kind, ProtocolKind::Adaptation);
    let names: Vec<&str> = rep.rows.iter().map(|r| r.condition.as_str()).collect();
    assert_eq!(names, ["real", "full", "text-only"]);
    assert_eq!(rep.rows[1].n_seeds, 3);
    let dir = tempfile::tempdir().unwrap();
    rep.write(dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("adaptation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(dir.path().join("adaptation.json").exists());
}

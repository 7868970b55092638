use glyphdiff::conditioning::{self, attention, timestep_embedding};
use glyphdiff::denoiser::{Denoiser, ModelConfig, UNetConfig, LEVELS};
use glyphdiff::image::Canvas;
use glyphdiff::substrate::{grad_check, GradCheckConfig, Graph, ParamSet, Tensor};
use glyphdiff::trainer::item_loss;
use glyphdiff::vocab::Vocabulary;
use glyphdiff::Error;

fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
}

#[test]
fn attention_matches_hand_computation() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(t2(2, 2, &[1.0, 0.0, 0.0, 2.0]));
    let k = g.constant(t2(2, 2, &[1.0, 1.0, 0.0, 1.0]));
    let v = g.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let out = attention(&mut g, q, k, v, None).unwrap();
    let r = 2f64.sqrt();
    // scores row 0: [1, 0] / sqrt 2; row 1: [2, 2] / sqrt 2.
    let w0 = [(1.0 / r).exp(), 1.0];
    let s0 = w0[0] + w0[1];
    let want = [
        (w0[0] * 1.0 + w0[1] * 3.0) / s0,
        (w0[0] * 2.0 + w0[1] * 4.0) / s0,
        2.0,
        3.0,
    ];
    for (a, b) in g.value(out).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn masked_keys_get_no_weight() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(t2(1, 2, &[0.3, -0.2]));
    let k = g.constant(t2(3, 2, &[1.0, 2.0, -1.0, 0.5, 9.0, 9.0]));
    let v = g.constant(t2(3, 1, &[1.0, 2.0, 100.0]));
    let masked = attention(&mut g, q, k, v, Some(&[true, true, false])).unwrap();
    let k2 = g.constant(t2(2, 2, &[1.0, 2.0, -1.0, 0.5]));
    let v2 = g.constant(t2(2, 1, &[1.0, 2.0]));
    let short = attention(&mut g, q, k2, v2, None).unwrap();
    assert!((g.value(masked).data()[0] - g.value(short).data()[0]).abs() < 1e-12);
}

#[test]
fn timestep_embedding_matches_formula() {
    let e = timestep_embedding::<f64>(37, 16).unwrap();
    for i in 0..8 {
        let f = 10000f64.powf(-(i as f64) / 8.0);
        assert!((e.data()[i] - (37.0 * f).sin()).abs() < 1e-12);
        assert!((e.data()[8 + i] - (37.0 * f).cos()).abs() < 1e-12);
    }
    assert_ne!(
        timestep_embedding::<f64>(1, 16).unwrap(),
        timestep_embedding::<f64>(2, 16).unwrap()
    );
}

#[test]
fn text_encoding_ignores_pad_positions_and_depends_on_order() {
    let cfg = ModelConfig::compact(2).unwrap();
    let d = Denoiser::new(cfg.clone()).unwrap();
    let p: ParamSet<f64> = d.init(3).unwrap();
    let enc = |text: &str| {
        let mut g = Graph::with_params(&p);
        let v = d
            .encode_text(&mut g, &cfg.vocab.tokenize(text).unwrap())
            .unwrap();
        g.value(v).clone()
    };
    let (ab, ba) = (enc("ab"), enc("ba"));
    assert_eq!(ab.shape(), [cfg.vocab.max_len(), cfg.text.d_text]);
    assert_ne!(ab, ba);
    // Changing the pad embedding row must not change non-pad outputs.
    let mut p2 = p.clone();
    let pad = cfg.vocab.pad_id();
    let dt = cfg.text.d_text;
    p2.values_mut("text.embed").unwrap()[pad * dt..(pad + 1) * dt]
        .iter_mut()
        .for_each(|v| *v += 1.0);
    let mut g = Graph::with_params(&p2);
    let v = d
        .encode_text(&mut g, &cfg.vocab.tokenize("ab").unwrap())
        .unwrap();
    let changed = g.value(v);
    for (a, b) in changed.data()[..2 * dt].iter().zip(&ab.data()[..2 * dt]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn style_ids_are_range_checked() {
    let d = Denoiser::new(ModelConfig::tiny(3).unwrap()).unwrap();
    let p: ParamSet<f64> = d.init(0).unwrap();
    let mut g = Graph::with_params(&p);
    assert!(matches!(
        conditioning::style_embedding(&mut g, 3),
        Err(Error::WriterOutOfRange { id: 3, n_styles: 3 })
    ));
}

/// Hand count of every tensor in the tiny network.
#[test]
fn tiny_parameter_count_matches_hand_audit() {
    let cfg = ModelConfig::tiny(2).unwrap();
    let d = Denoiser::new(cfg.clone()).unwrap();
    let p: ParamSet<f32> = d.init(0).unwrap();
    let lin = |i: usize, o: usize| i * o + o;
    let conv = |i: usize, o: usize| o * i * 9 + o;
    let norm = |c: usize| 2 * c;
    let (dt, e, c, rows) = (4, 8, 4, cfg.vocab.table_rows());
    let text = rows * dt
        + 2 * (norm(dt) + 4 * lin(dt, dt) + norm(dt) + lin(dt, dt) + lin(dt, dt))
        + norm(dt);
    let emb = 2 * lin(e, e) + 2 * e;
    let res = |ci: usize, co: usize| {
        norm(ci)
            + conv(ci, co)
            + lin(e, co)
            + norm(co)
            + conv(co, co)
            + if ci != co { lin(ci, co) } else { 0 }
    };
    let attn = norm(c) + lin(c, c) + 2 * lin(dt, c) + lin(c, c);
    let stem = conv(2, c);
    let enc = LEVELS * res(c, c) + 2 * attn + 3 * conv(c, c);
    let dec = LEVELS * res(2 * c, c) + 2 * attn + 3 * conv(c, c);
    let out = norm(c) + conv(c, 1);
    assert_eq!(p.numel(), text + emb + stem + enc + dec + out);
}

#[test]
fn network_takes_exactly_two_input_channels() {
    for cfg in [
        ModelConfig::compact(16).unwrap(),
        ModelConfig::desk(16).unwrap(),
    ] {
        let d = Denoiser::new(cfg.clone()).unwrap();
        let p: ParamSet<f32> = d.init(0).unwrap();
        assert_eq!(cfg.unet.in_channels, 2);
        assert_eq!(p.get("unet.stem.w").unwrap().shape()[1], 2);
    }
}

fn small_setup() -> (Denoiser, ParamSet<f64>) {
    let mut cfg = ModelConfig::tiny(2).unwrap();
    cfg.canvas = Canvas {
        width: 16,
        height: 16,
    };
    cfg.vocab = Vocabulary::new("abc".chars().collect(), 3).unwrap();
    let d = Denoiser::new(cfg).unwrap();
    let p = d.init(7).unwrap();
    (d, p)
}

#[test]
fn encoder_levels_halve_resolution_at_downsampling_levels() {
    let (d, p) = small_setup();
    let mut g = Graph::with_params(&p);
    let x = g.constant(Tensor::zeros([1, 16, 16]));
    let c = g.constant(Tensor::zeros([1, 16, 16]));
    let tokens = d.config().vocab.tokenize("ab").unwrap();
    let text = d.encode_text(&mut g, &tokens).unwrap();
    let mut trace = Vec::new();
    let out = d
        .forward(
            &mut g,
            x,
            c,
            3,
            Some(1),
            text,
            &tokens.key_mask(),
            Some(&mut trace),
        )
        .unwrap();
    let sizes: Vec<usize> = trace.iter().map(|&v| g.shape(v)[1]).collect();
    assert_eq!(sizes, [16, 8, 4, 4, 4]);
    assert!((1..=LEVELS)
        .filter(|&l| UNetConfig::is_down(l))
        .eq([1, 2, 5]));
    assert_eq!(g.shape(out), [1, 16, 16]);
}

#[test]
fn every_parameter_receives_gradient() {
    let (d, p) = small_setup();
    let tokens = d.config().vocab.tokenize("cab").unwrap();
    let x = Tensor::from_fn([1, 16, 16], |i| ((i * 7) % 11) as f64 / 5.0 - 1.0);
    let c = Tensor::from_fn([1, 16, 16], |i| if i % 3 == 0 { -1.0 } else { 1.0 });
    let eps = Tensor::from_fn([1, 16, 16], |i| ((i * 13) % 17) as f64 / 8.0 - 1.0);
    let mut g = Graph::with_params(&p);
    let loss = item_loss(&mut g, &d, &x, &c, &tokens, 1, 5, &eps).unwrap();
    let grads = g.backward(loss).unwrap().param_grads(&p);
    // Embedding tables only receive gradient in the rows in use.
    for (name, t) in grads.iter() {
        assert!(
            t.data().iter().any(|&v| v != 0.0),
            "{name} gets no gradient"
        );
    }
}

#[test]
fn full_loss_passes_gradient_check() {
    let (d, p) = small_setup();
    let tokens = d.config().vocab.tokenize("ba").unwrap();
    let x = Tensor::from_fn([1, 16, 16], |i| ((i * 5) % 9) as f64 / 4.0 - 1.0);
    let c = Tensor::from_fn([1, 16, 16], |i| if i % 5 < 2 { -1.0 } else { 1.0 });
    let eps = Tensor::from_fn([1, 16, 16], |i| ((i * 3) % 7) as f64 / 3.0 - 1.0);
    let cfg = GradCheckConfig {
        samples: 300,
        ..GradCheckConfig::default()
    };
    let report = grad_check(
        &p,
        |g| {
            item_loss(g, &d, &x, &c, &tokens, 0, 17, &eps).map_err(|e| match e {
                Error::Numeric(n) => n,
                other => panic!("{other}"),
            })
        },
        &cfg,
    )
    .unwrap();
    assert!(
        report.passed,
        "max relative error {} at {:?}",
        report.max_rel_err, report.worst_param
    );
}

use glyphdiff_substrate::{
    grad_check, grad_check_with, Error, GradCheckConfig, Graph, ParamSet, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

type Build = dyn Fn(&mut Graph<'_, f64>, &[Var]) -> glyphdiff_substrate::Result<Var>;

/// Contract the op output with fixed random weights and compare the tape's
/// input gradients against central differences.
fn check_op(name: &str, inputs: Vec<Tensor<f64>>, op: &Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = op(&mut g, &vars).unwrap();
        g.shape(out).to_vec()
    };
    let weights = rand_tensor(&probe_shape, &mut rng);

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = op(&mut g, &vars).unwrap();
        g.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = op(&mut g, &vars).unwrap();
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum_all(prod).unwrap();
    let grads = g.backward(loss).unwrap();

    let h = 1e-6;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                rel < 1e-3,
                "{name}: input {k}[{i}] analytic {a} numeric {numeric}"
            );
        }
    }
}

#[test]
fn every_op_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut r = |s: &[usize]| rand_tensor(s, &mut rng);

    check_op("add", vec![r(&[2, 3]), r(&[2, 3])], &|g, v| {
        g.add(v[0], v[1])
    });
    check_op("sub", vec![r(&[2, 3]), r(&[2, 3])], &|g, v| {
        g.sub(v[0], v[1])
    });
    check_op("mul", vec![r(&[2, 3]), r(&[2, 3])], &|g, v| {
        g.mul(v[0], v[1])
    });
    check_op("scale", vec![r(&[4])], &|g, v| g.scale(v[0], 0.3));
    check_op("add_rows", vec![r(&[3, 4]), r(&[4])], &|g, v| {
        g.add_rows(v[0], v[1])
    });
    check_op("add_channels", vec![r(&[3, 2, 2]), r(&[3])], &|g, v| {
        g.add_channels(v[0], v[1])
    });
    check_op("matmul", vec![r(&[3, 4]), r(&[4, 2])], &|g, v| {
        g.matmul(v[0], v[1])
    });
    check_op("matmul_nt", vec![r(&[3, 4]), r(&[5, 4])], &|g, v| {
        g.matmul_nt(v[0], v[1])
    });
    check_op("transpose", vec![r(&[3, 4])], &|g, v| g.transpose(v[0]));
    check_op("reshape", vec![r(&[3, 4])], &|g, v| {
        g.reshape(v[0], &[2, 6])
    });
    check_op(
        "conv3x3 s1",
        vec![r(&[2, 5, 4]), r(&[3, 2, 3, 3])],
        &|g, v| g.conv3x3(v[0], v[1], 1),
    );
    check_op(
        "conv3x3 s2",
        vec![r(&[2, 6, 4]), r(&[3, 2, 3, 3])],
        &|g, v| g.conv3x3(v[0], v[1], 2),
    );
    check_op("upsample2x", vec![r(&[2, 2, 3])], &|g, v| {
        g.upsample2x(v[0])
    });
    check_op("concat0", vec![r(&[2, 2, 2]), r(&[1, 2, 2])], &|g, v| {
        g.concat0(&[v[0], v[1]])
    });
    check_op("narrow0", vec![r(&[4, 2])], &|g, v| g.narrow0(v[0], 1, 2));
    check_op("concat_cols", vec![r(&[2, 3]), r(&[2, 1])], &|g, v| {
        g.concat_cols(&[v[0], v[1]])
    });
    check_op("narrow_cols", vec![r(&[3, 5])], &|g, v| {
        g.narrow_cols(v[0], 1, 3)
    });
    check_op(
        "group_norm",
        vec![r(&[4, 2, 3]), r(&[4]), r(&[4])],
        &|g, v| g.group_norm(v[0], v[1], v[2], 2, 1e-5),
    );
    check_op("layer_norm", vec![r(&[3, 5]), r(&[5]), r(&[5])], &|g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    check_op("silu", vec![r(&[7])], &|g, v| g.silu(v[0]));
    check_op("softmax", vec![r(&[3, 4])], &|g, v| g.softmax(v[0]));
    check_op("softmax masked", vec![r(&[3, 4])], &|g, v| {
        g.softmax_masked(v[0], Some(&[true, false, true, true]))
    });
    check_op("embedding", vec![r(&[5, 3])], &|g, v| {
        g.embedding(v[0], &[4, 1, 4])
    });
    check_op("mean_all", vec![r(&[2, 3])], &|g, v| g.mean_all(v[0]));
    check_op("mean_last", vec![r(&[2, 3])], &|g, v| g.mean_last(v[0]));
    check_op("mse", vec![r(&[2, 3]), r(&[2, 3])], &|g, v| {
        g.mse(v[0], v[1])
    });
}

#[test]
fn matmul_with_identity_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&[3, 5], &mut rng);
    let eye = Tensor::from_fn([3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let (ev, av) = (g.constant(eye), g.constant(a.clone()));
    let out = g.matmul(ev, av).unwrap();
    assert_eq!(g.value(out), &a);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([1, 3]));
    let y = g.softmax(x).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn conv_of_constant_image_with_ones_kernel() {
    let c = 0.75;
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full([1, 5, 6], c));
    let w = g.constant(Tensor::full([1, 1, 3, 3], 1.0));
    let y = g.conv3x3(x, w, 1).unwrap();
    let out = g.value(y);
    assert_eq!(out.shape(), [1, 5, 6]);
    // interior pixel sees all nine taps
    assert_eq!(out.data()[2 * 6 + 3], 9.0 * c);
    // corner sees four
    assert_eq!(out.data()[0], 4.0 * c);
    let y2 = g.conv3x3(x, w, 2).unwrap();
    assert_eq!(g.shape(y2), [1, 3, 3]);
}

#[test]
fn derivative_of_square() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::scalar(3.0));
    let sq = g.mul(x, x).unwrap();
    let grads = g.backward(sq).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), [6.0]);
}

#[test]
fn mse_at_target_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = rand_tensor(&[4, 4], &mut rng);
    let mut g = Graph::new();
    let pred = g.input(t.clone());
    let target = g.constant(t);
    let loss = g.mse(pred, target).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.wrt(pred).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros([2]));
    let y = g.silu(x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::NotScalar { .. })));
}

#[test]
fn shape_mismatch_names_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn non_finite_inputs_are_reported() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::full([1, 2], f32::INFINITY));
    assert!(matches!(g.softmax(a), Err(Error::NonFinite { .. })));
    let b = g.constant(Tensor::full([2], f32::MAX));
    assert!(matches!(g.add(b, b), Err(Error::NonFinite { op: "add" })));
}

fn two_layer_params(seed: u64) -> ParamSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    p.insert("l1.w", rand_tensor(&[6, 8], &mut rng)).unwrap();
    p.insert("l1.b", rand_tensor(&[8], &mut rng)).unwrap();
    p.insert("l2.w", rand_tensor(&[8, 3], &mut rng)).unwrap();
    p.insert("l2.b", rand_tensor(&[3], &mut rng)).unwrap();
    p
}

fn two_layer_loss(g: &mut Graph<'_, f64>) -> glyphdiff_substrate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = g.constant(rand_tensor(&[5, 6], &mut rng));
    let target = g.constant(rand_tensor(&[5, 3], &mut rng));
    let (w1, b1) = (g.param("l1.w")?, g.param("l1.b")?);
    let (w2, b2) = (g.param("l2.w")?, g.param("l2.b")?);
    let h = g.matmul(x, w1)?;
    let h = g.add_rows(h, b1)?;
    let h = g.silu(h)?;
    let y = g.matmul(h, w2)?;
    let y = g.add_rows(y, b2)?;
    g.mse(y, target)
}

#[test]
fn two_layer_network_passes_grad_check() {
    let params = two_layer_params(5);
    let cfg = GradCheckConfig {
        samples: 64,
        ..Default::default()
    };
    let report = grad_check(&params, two_layer_loss, &cfg).unwrap();
    assert_eq!(report.checked, 64);
    assert!(report.passed, "{report:?}");
    assert!(report.max_rel_err < 1e-3);
}

#[test]
fn grad_check_of_sum_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = ParamSet::new();
    params.insert("x", rand_tensor(&[10], &mut rng)).unwrap();
    let report = grad_check(
        &params,
        |g| {
            let x = g.param("x")?;
            g.sum_all(x)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert_eq!(report.checked, 10);
    // the central difference of a linear function only sees rounding
    assert!(report.max_rel_err < 1e-9, "{report:?}");
}

#[test]
fn grad_check_flags_wrong_gradient() {
    let params = two_layer_params(8);
    let value = |p: &ParamSet<f64>| {
        let mut g = Graph::with_params(p);
        let l = two_layer_loss(&mut g)?;
        g.value(l).item()
    };
    let broken = |p: &ParamSet<f64>| {
        let mut g = Graph::with_params(p);
        let l = two_layer_loss(&mut g)?;
        let mut grads = g.backward(l)?.param_grads(p);
        for v in grads.values_mut("l2.b")? {
            *v += 0.5;
        }
        Ok(grads)
    };
    let cfg = GradCheckConfig {
        samples: 1000,
        ..Default::default()
    };
    let report = grad_check_with(&params, value, broken, &cfg).unwrap();
    assert!(!report.passed);
    assert_eq!(report.worst_param.as_ref().unwrap().0, "l2.b");
}

#[test]
fn grad_check_rejects_nondeterministic_function() {
    use std::cell::Cell;
    let params = two_layer_params(1);
    let calls = Cell::new(0.0);
    let value = |_: &ParamSet<f64>| {
        calls.set(calls.get() + 1.0);
        Ok(calls.get())
    };
    let analytic = |p: &ParamSet<f64>| Ok(p.zeros_like());
    let err = grad_check_with(&params, value, analytic, &GradCheckConfig::default()).unwrap_err();
    assert!(matches!(err, Error::NonDeterministic { .. }));
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let params = two_layer_params(3);
    let run = || {
        let mut g = Graph::with_params(&params);
        let l = two_layer_loss(&mut g).unwrap();
        g.value(l).item().unwrap().to_bits()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-10.0f64..10.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([3, 4], vals).unwrap());
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(4) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn concat_then_narrow_recovers_inputs(
        a in prop::collection::vec(-5.0f32..5.0, 2 * 6),
        b in prop::collection::vec(-5.0f32..5.0, 3 * 6),
    ) {
        let mut g = Graph::new();
        let av = g.constant(Tensor::new([2, 2, 3], a.clone()).unwrap());
        let bv = g.constant(Tensor::new([3, 2, 3], b.clone()).unwrap());
        let cat = g.concat0(&[av, bv]).unwrap();
        let a2 = g.narrow0(cat, 0, 2).unwrap();
        let b2 = g.narrow0(cat, 2, 3).unwrap();
        prop_assert_eq!(g.value(a2).data(), &a[..]);
        prop_assert_eq!(g.value(b2).data(), &b[..]);
    }
}

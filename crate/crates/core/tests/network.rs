mod common;

use capsnet::capsule::RoutingConfig;
use capsnet::network::{self, ArchitectureSpec, Model};
use capsnet::{Error, Tape, Tensor};
use common::{conv2d_reference, rng, spread_loss_reference, uniform};
use rand::Rng;

/// Closed-form count written out layer by layer, independent of
/// `parameter_shapes`.
fn audit_count(stem: usize, primary: usize, conv: usize, classes: usize, hidden: &[usize]) -> usize {
    let stem_layer = 25 * stem + stem;
    let primary_layer = stem * primary * 17 + primary * 17;
    let conv_caps = (9 * primary) * conv * 16 + 2 * conv;
    let class_caps = (36 * conv) * classes * 16 + 2 * classes;
    let mut widths = vec![classes * 17];
    widths.extend_from_slice(hidden);
    widths.push(1024);
    let decoder: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    stem_layer + primary_layer + conv_caps + class_caps + decoder
}

#[test]
fn parameter_count_matches_audit() {
    let default = Model::<f32>::build(ArchitectureSpec::default(), 0).unwrap();
    assert_eq!(default.parameter_count(), audit_count(64, 8, 16, 10, &[512, 1024]));
    let reduced = Model::<f32>::build(ArchitectureSpec::reduced(), 0).unwrap();
    assert_eq!(reduced.parameter_count(), audit_count(32, 8, 8, 10, &[512, 1024]));
    assert_eq!(reduced.parameter_count(), 1_723_116);
    let mut r = rng(5);
    for _ in 0..20 {
        let hidden: Vec<usize> = (0..r.gen_range(0..3)).map(|_| r.gen_range(1..64)).collect();
        let spec = ArchitectureSpec {
            stem_channels: r.gen_range(1..16),
            primary_caps: r.gen_range(1..6),
            conv_caps: r.gen_range(1..6),
            decoder_hidden: hidden.clone(),
            ..ArchitectureSpec::default()
        };
        let want = audit_count(spec.stem_channels, spec.primary_caps, spec.conv_caps, 10, &hidden);
        assert_eq!(Model::<f32>::build(spec, 1).unwrap().parameter_count(), want);
    }
}

#[test]
fn empty_decoder_is_single_linear_map() {
    let spec = ArchitectureSpec { decoder_hidden: vec![], ..ArchitectureSpec::reduced() };
    let m = Model::<f32>::build(spec, 0).unwrap();
    let dec: Vec<_> = m.params().iter().filter(|p| p.name.starts_with("decoder")).collect();
    assert_eq!(dec.len(), 2);
    assert_eq!(dec[0].value.shape(), &[170, 1024]);
    assert_eq!(dec[1].value.shape(), &[1024]);
}

#[test]
fn same_seed_same_weights() {
    let a = Model::<f32>::build(ArchitectureSpec::reduced(), 42).unwrap();
    let b = Model::<f32>::build(ArchitectureSpec::reduced(), 42).unwrap();
    let c = Model::<f32>::build(ArchitectureSpec::reduced(), 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn invalid_spec_names_layer() {
    let spec = ArchitectureSpec { conv_caps: 0, ..ArchitectureSpec::default() };
    let err = Model::<f32>::build(spec, 0).unwrap_err().to_string();
    assert!(err.contains("conv_caps"), "{err}");
}

#[test]
fn conv_matches_loop_oracle() {
    for trial in 0..30 {
        let mut r = rng(300 + trial);
        let (n, c, o, k) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..6));
        let side = r.gen_range(k..k + 8);
        let (stride, pad) = (r.gen_range(1..3), r.gen_range(0..2));
        let x = uniform(&mut r, &[n, c, side, side], -1.0, 1.0);
        let w = uniform(&mut r, &[o, c, k, k], -1.0, 1.0);
        let tape = Tape::inference();
        let got = tape.constant(x.clone()).conv2d(tape.constant(w.clone()), stride, pad).unwrap().value();
        let want = conv2d_reference(&x, &w, stride, pad);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want).unwrap() < 1e-6);
    }
}

fn small_model() -> Model<f64> {
    Model::build(
        ArchitectureSpec { stem_channels: 4, primary_caps: 2, conv_caps: 2, decoder_hidden: vec![8], ..ArchitectureSpec::default() },
        9,
    )
    .unwrap()
}

#[test]
fn forward_outputs_are_well_formed() {
    let model = small_model();
    let routing = RoutingConfig::default();
    let mut r = rng(8);
    let images = uniform(&mut r, &[3, 1, 32, 32], 0.0, 1.0);
    let (act, recon) = model.predict(&images, &routing).unwrap();
    assert_eq!(act.shape(), &[3, 10]);
    assert_eq!(recon.shape(), &[3, 1, 32, 32]);
    assert!(act.data().iter().all(|&a| a > 0.0 && a < 1.0));
    assert!(recon.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(act.argmax_rows().iter().all(|&c| c < 10));
    let (act2, recon2) = model.predict(&images, &routing).unwrap();
    assert_eq!(act, act2);
    assert_eq!(recon, recon2);

    let (zact, zrecon) = model.predict(&Tensor::zeros(vec![1, 1, 32, 32]), &routing).unwrap();
    assert!(zact.is_finite() && zrecon.is_finite());
}

#[test]
fn translation_smoke() {
    let model = small_model();
    let routing = RoutingConfig::default();
    let mut r = rng(12);
    let img = uniform(&mut r, &[1, 1, 32, 32], 0.0, 1.0);
    let shifted = Tensor::from_fn(vec![1, 1, 32, 32], |ix| {
        if ix[3] < 2 { 0.0 } else { img.get(&[0, 0, ix[2], ix[3] - 2]).unwrap() }
    });
    let (a, _) = model.predict(&img, &routing).unwrap();
    let (b, _) = model.predict(&shifted, &routing).unwrap();
    assert!(b.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(a.max_abs_diff(&b).unwrap() <= 1.0);
}

#[test]
fn wrong_input_side_is_shape_error() {
    let model = small_model();
    let err = model.predict(&Tensor::zeros(vec![1, 1, 28, 28]), &RoutingConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
}

#[test]
fn loss_matches_two_term_oracle() {
    for trial in 0..20 {
        let mut r = rng(900 + trial);
        let b = r.gen_range(1..5);
        let act = uniform(&mut r, &[b, 10], 0.0, 1.0);
        let recon = uniform(&mut r, &[b, 1, 32, 32], 0.0, 1.0);
        let img = uniform(&mut r, &[b, 1, 32, 32], 0.0, 1.0);
        let targets: Vec<usize> = (0..b).map(|_| r.gen_range(0..10)).collect();
        let (margin, alpha) = (r.gen_range(0.1..1.0), r.gen_range(0.0..2.0));
        let tape = Tape::inference();
        let got = network::loss(tape.constant(act.clone()), tape.constant(recon.clone()), tape.constant(img.clone()), &targets, margin, alpha)
            .unwrap()
            .value()
            .item();
        let mse: f64 = recon.data().iter().zip(img.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / recon.numel() as f64;
        let want = spread_loss_reference(act.data(), 10, &targets, margin) + alpha * mse;
        assert!((got - want).abs() < 1e-7, "trial {trial}: {got} vs {want}");

        let spread_only = network::loss(tape.constant(act.clone()), tape.constant(recon.clone()), tape.constant(img.clone()), &targets, margin, 0.0)
            .unwrap()
            .value()
            .item();
        assert!((spread_only - spread_loss_reference(act.data(), 10, &targets, margin)).abs() < 1e-12);
        let perfect = network::loss(tape.constant(act.clone()), tape.constant(img.clone()), tape.constant(img.clone()), &targets, margin, alpha)
            .unwrap()
            .value()
            .item();
        assert!((perfect - spread_only).abs() < 1e-12);
    }
}

#[test]
fn capture_shapes_follow_spec() {
    let model = small_model();
    let caps = model.capture(&Tensor::zeros(vec![1, 1, 32, 32]), &RoutingConfig::default()).unwrap();
    let shapes: Vec<(&str, Vec<usize>, Vec<usize>)> =
        caps.iter().map(|c| (c.name, c.poses.shape().to_vec(), c.activations.shape().to_vec())).collect();
    assert_eq!(
        shapes,
        vec![
            ("primary_caps", vec![1, 14, 14, 2, 4, 4], vec![1, 14, 14, 2]),
            ("conv_caps", vec![1, 6, 6, 2, 4, 4], vec![1, 6, 6, 2]),
            ("class_caps", vec![1, 10, 4, 4], vec![1, 10]),
        ]
    );
}

mod common;

use std::collections::BTreeSet;

use common::{grad_check, random_tensor, rng};
use epan::loss::{mse_loss, total_loss, LossWeights};
use epan::model::{attentive_fuse, fuse, FuseParams, FusionMode};
use epan::{Error, ModelConfig, Network, Tape, Tensor, Variant};
use proptest::prelude::*;

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        levels: 3,
        cdn_base_channels: 8,
        ..Default::default()
    }
}

fn names(net: &Network<f64>) -> BTreeSet<String> {
    net.params().iter().map(|p| p.name.clone()).collect()
}

fn run(net: &Network<f64>, x: &Tensor<f64>, m: &Tensor<f64>) -> (Tape<f64>, epan::model::ForwardOutput) {
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape, true);
    let vx = tape.constant(x.clone());
    let vm = tape.constant(m.clone());
    let out = net.forward(&mut tape, &vars, vx, Some(vm)).unwrap();
    (tape, out)
}

#[test]
fn phi_has_no_edge_branch() {
    let net = Network::<f64>::build(&ModelConfig::with_variant(Variant::Phi), 0).unwrap();
    assert_eq!(net.een_param_count(), 0);
    assert_eq!(net.fusion_param_count(), 0);
    assert!(net.een_shape().is_none());
    let eal = Network::<f64>::build(&ModelConfig::with_variant(Variant::PhiEal), 0).unwrap();
    assert_eq!(eal.een_param_count(), 0);
}

#[test]
fn edge_branch_is_quarter_width_everywhere() {
    for variant in [Variant::PhiCat, Variant::PhiAdd, Variant::PhiAtt, Variant::Epan] {
        let net = Network::<f32>::build(&ModelConfig::with_variant(variant), 0).unwrap();
        let c = net.cdn_shape();
        let e = net.een_shape().unwrap();
        assert_eq!(c.encoder_channels.len(), e.encoder_channels.len());
        assert_eq!(c.decoder_channels.len(), e.decoder_channels.len());
        for (a, b) in c.encoder_channels.iter().zip(&e.encoder_channels) {
            assert_eq!(*a, 4 * b);
        }
        for (a, b) in c.decoder_channels.iter().zip(&e.decoder_channels) {
            assert_eq!(*a, 4 * b);
        }
        assert!(net.een_param_count() < net.cdn_param_count());
    }
}

#[test]
fn config_rejects_indivisible_width() {
    let cfg = ModelConfig {
        cdn_base_channels: 30,
        ..Default::default()
    };
    assert!(matches!(Network::<f32>::build(&cfg, 0), Err(Error::Config(_))));
    let cfg = ModelConfig {
        een_channel_divisor: 2,
        ..Default::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert!("unet".parse::<Variant>().is_err());
}

#[test]
fn build_is_deterministic_and_shared_across_variants() {
    let a = Network::<f64>::build(&small(Variant::Epan), 11).unwrap();
    let b = Network::<f64>::build(&small(Variant::Epan), 11).unwrap();
    assert_eq!(a.params(), b.params());
    let c = Network::<f64>::build(&small(Variant::Epan), 12).unwrap();
    assert_ne!(a.params(), c.params());
    let phi = Network::<f64>::build(&small(Variant::Phi), 11).unwrap();
    for p in phi.params() {
        assert_eq!(a.param(&p.name).unwrap().data(), p.tensor.data(), "{}", p.name);
    }
}

#[test]
fn ablation_structure() {
    let build = |v| Network::<f64>::build(&small(v), 0).unwrap();
    let phi = names(&build(Variant::Phi));
    assert_eq!(phi, names(&build(Variant::PhiEal)));
    assert_eq!(names(&build(Variant::PhiAtt)), names(&build(Variant::Epan)));
    let strip = |s: BTreeSet<String>| -> BTreeSet<String> { s.into_iter().filter(|n| !n.starts_with("fuse.")).collect() };
    let att = strip(names(&build(Variant::PhiAtt)));
    assert_eq!(att, strip(names(&build(Variant::PhiCat))));
    assert_eq!(att, strip(names(&build(Variant::PhiAdd))));
    assert!(phi.is_subset(&att));
    assert!(att.difference(&phi).all(|n| n.starts_with("een.")));
    // One fusion site per content decoder convolution.
    let epan = build(Variant::Epan);
    assert_eq!(epan.fusion_sites(), epan.cdn_shape().decoder_channels.len());
}

fn fuse_params(tape: &mut Tape<f64>, w: Tensor<f64>, b: f64) -> FuseParams {
    FuseParams {
        weight: tape.param(&w),
        bias: tape.param(&Tensor::full(&[1], b)),
    }
}

#[test]
fn zero_gate_halves_content() {
    let mut r = rng(1);
    let xe = random_tensor(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
    let xc = random_tensor(&mut r, &[2, 6, 5, 5], -1.0, 1.0);
    let mut tape = Tape::new();
    let ve = tape.constant(xe);
    let vc = tape.constant(xc.clone());
    let g = fuse_params(&mut tape, Tensor::zeros(&[1, 3, 3, 3]), 0.0);
    let out = attentive_fuse(&mut tape, ve, vc, g).unwrap();
    for (o, x) in tape.value(out).data().iter().zip(xc.data()) {
        assert_eq!(*o, 0.5 * x);
    }
}

#[test]
fn saturated_gate_passes_content() {
    let mut r = rng(2);
    let xe = random_tensor(&mut r, &[1, 2, 4, 4], -1.0, 1.0);
    let xc = random_tensor(&mut r, &[1, 8, 4, 4], -1.0, 1.0);
    let mut tape = Tape::new();
    let ve = tape.constant(xe);
    let vc = tape.constant(xc.clone());
    let g = fuse_params(&mut tape, Tensor::zeros(&[1, 2, 3, 3]), 50.0);
    let out = attentive_fuse(&mut tape, ve, vc, g).unwrap();
    for (o, x) in tape.value(out).data().iter().zip(xc.data()) {
        assert!((o - x).abs() < 1e-12);
    }
}

#[test]
fn attentive_fuse_matches_loop() {
    let mut r = rng(3);
    let (h, w) = (4, 4);
    let xe = random_tensor(&mut r, &[1, 2, h, w], -1.0, 1.0);
    let xc = random_tensor(&mut r, &[1, 8, h, w], -1.0, 1.0);
    let gw = random_tensor(&mut r, &[1, 2, 3, 3], -1.0, 1.0);
    let gb = 0.3;
    let mut tape = Tape::new();
    let ve = tape.constant(xe.clone());
    let vc = tape.constant(xc.clone());
    let g = fuse_params(&mut tape, gw.clone(), gb);
    let out = attentive_fuse(&mut tape, ve, vc, g).unwrap();
    let got = tape.value(out).data();
    for y in 0..h {
        for x in 0..w {
            let mut z = gb;
            for c in 0..2 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        z += xe.data()[(c * h + iy as usize) * w + ix as usize] * gw.data()[(c * 3 + ky) * 3 + kx];
                    }
                }
            }
            let s = 1.0 / (1.0 + (-z).exp());
            for c in 0..8 {
                let i = (c * h + y) * w + x;
                assert!((got[i] - s * xc.data()[i]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn fuse_modes_keep_content_shape() {
    let mut r = rng(4);
    let xe = random_tensor(&mut r, &[1, 2, 4, 4], -1.0, 1.0);
    let xc = random_tensor(&mut r, &[1, 8, 4, 4], -1.0, 1.0);
    let mut tape = Tape::new();
    let ve = tape.constant(xe);
    let vc = tape.constant(xc.clone());
    assert_eq!(fuse(&mut tape, FusionMode::None, None, vc, None).unwrap(), vc);
    let cat = fuse_params(&mut tape, Tensor::zeros(&[8, 10, 1, 1]), 0.0);
    let cat = FuseParams {
        bias: tape.param(&Tensor::zeros(&[8])),
        ..cat
    };
    let out = fuse(&mut tape, FusionMode::Concat, Some(ve), vc, Some(cat)).unwrap();
    assert_eq!(tape.shape(out), [1, 8, 4, 4]);
    // A zero projection makes additive fusion the identity.
    let add = FuseParams {
        weight: tape.param(&Tensor::zeros(&[8, 2, 1, 1])),
        bias: tape.param(&Tensor::zeros(&[8])),
    };
    let out = fuse(&mut tape, FusionMode::Add, Some(ve), vc, Some(add)).unwrap();
    assert_eq!(tape.value(out).data(), xc.data());
    assert!(matches!(fuse(&mut tape, FusionMode::Add, None, vc, Some(add)), Err(Error::Contract(_))));
    let small_e = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(matches!(fuse(&mut tape, FusionMode::Add, Some(small_e), vc, Some(add)), Err(Error::Dimension(_))));
}

#[test]
fn saturated_epan_reproduces_phi() {
    let mut r = rng(5);
    let x = random_tensor(&mut r, &[1, 3, 16, 16], 0.0, 1.0);
    let m = random_tensor(&mut r, &[1, 1, 16, 16], 0.0, 1.0);
    let phi = Network::<f64>::build(&small(Variant::Phi), 9).unwrap();
    let mut epan = Network::<f64>::build(&small(Variant::Epan), 9).unwrap();
    let gates: Vec<String> = epan
        .params()
        .iter()
        .filter(|p| p.name.starts_with("fuse."))
        .map(|p| p.name.clone())
        .collect();
    for name in gates {
        let fill = if name.ends_with(".bias") { 50.0 } else { 0.0 };
        epan.param_mut(&name).unwrap().data_mut().iter_mut().for_each(|v| *v = fill);
    }
    let (ta, a) = run(&phi, &x, &m);
    let (tb, b) = run(&epan, &x, &m);
    for (p, q) in ta.value(a.image).data().iter().zip(tb.value(b.image).data()) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn feature_pyramid_and_site_alignment() {
    let mut r = rng(6);
    let x = random_tensor(&mut r, &[1, 3, 64, 64], 0.0, 1.0);
    let m = random_tensor(&mut r, &[1, 1, 64, 64], 0.0, 1.0);
    let net = Network::<f64>::build(&small(Variant::Epan), 0).unwrap();
    let (tape, out) = run(&net, &x, &m);
    let sides: Vec<usize> = out.encoder_features.iter().map(|&v| tape.shape(v)[2]).collect();
    assert_eq!(sides, [64, 32, 16]);
    assert_eq!(tape.shape(out.image), [1, 3, 64, 64]);
    assert_eq!(tape.shape(out.edges.unwrap()), [1, 1, 64, 64]);
    assert_eq!(out.content_features.len(), out.edge_features.len());
    assert_eq!(out.masks.len(), out.content_features.len());
    for (&c, &e) in out.content_features.iter().zip(&out.edge_features) {
        assert_eq!(tape.shape(c)[2..], tape.shape(e)[2..]);
        assert_eq!(tape.shape(c)[1], 4 * tape.shape(e)[1]);
    }
    for &mask in &out.masks {
        assert!(tape.value(mask).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn forward_contract_errors() {
    let net = Network::<f64>::build(&small(Variant::Epan), 0).unwrap();
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&[1, 3, 30, 32]));
    let m = tape.constant(Tensor::zeros(&[1, 1, 30, 32]));
    match net.forward(&mut tape, &vars, x, Some(m)) {
        Err(Error::Dimension(msg)) => assert!(msg.contains("multiples of 4"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let x = tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
    assert!(matches!(net.forward(&mut tape, &vars, x, None), Err(Error::Contract(_))));
    let gray = tape.constant(Tensor::zeros(&[1, 1, 32, 32]));
    assert!(matches!(net.forward(&mut tape, &vars, gray, Some(gray)), Err(Error::Dimension(_))));
}

#[test]
fn zero_heads_is_identity() {
    let mut r = rng(7);
    let x = random_tensor(&mut r, &[1, 3, 8, 8], 0.0, 1.0);
    let m = random_tensor(&mut r, &[1, 1, 8, 8], 0.0, 1.0);
    let mut net = Network::<f64>::build(&small(Variant::Epan), 0).unwrap();
    net.zero_heads();
    let (tape, out) = run(&net, &x, &m);
    assert_eq!(tape.value(out.image).data(), x.data());
    assert!(tape.value(out.edges.unwrap()).data().iter().all(|&v| v == 0.5));
}

#[test]
fn edge_branch_learns_through_content_loss() {
    let mut r = rng(8);
    let x = random_tensor(&mut r, &[1, 3, 16, 16], 0.2, 0.8);
    let s = random_tensor(&mut r, &[1, 3, 16, 16], 0.2, 0.8);
    let m = random_tensor(&mut r, &[1, 1, 16, 16], 0.0, 1.0);
    for variant in [Variant::PhiCat, Variant::PhiAdd, Variant::PhiAtt, Variant::Epan] {
        let mut net = Network::<f64>::build(&small(variant), 3).unwrap();
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape, true);
        let vx = tape.constant(x.clone());
        let vm = tape.constant(m.clone());
        let vs = tape.constant(s.clone());
        let out = net.forward(&mut tape, &vars, vx, Some(vm)).unwrap();
        let loss = mse_loss(&mut tape, out.image, vs).unwrap();
        tape.backward(loss).unwrap();
        net.accumulate_grads(&tape, &vars).unwrap();
        let een_grad: f64 = net
            .params()
            .iter()
            .filter(|p| p.name.starts_with("een."))
            .flat_map(|p| p.tensor.grad().unwrap().iter().map(|g| g.abs()))
            .sum();
        assert!(een_grad > 0.0, "{variant}");
    }
}

#[test]
fn infer_pads_and_crops() {
    let mut r = rng(9);
    let data = random_tensor(&mut r, &[1, 3, 13, 10], 0.0, 1.0);
    let img = epan::Image::unstack(&data).unwrap().remove(0);
    let edges = epan::Image::zeros(1, 13, 10);
    let net = Network::<f32>::build(&small(Variant::Epan), 0).unwrap();
    let (out, me) = net.infer(&img, &edges).unwrap();
    assert_eq!(out.dims(), (3, 13, 10));
    assert_eq!(me.unwrap().dims(), (1, 13, 10));
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn full_network_gradient_check() {
    let cfg = ModelConfig {
        variant: Variant::Epan,
        levels: 3,
        cdn_base_channels: 4,
        ..Default::default()
    };
    let mut net = Network::<f64>::build(&cfg, 21).unwrap();
    let mut r = rng(10);
    // Zero biases put dead-channel pre-activations exactly on the ReLU kink;
    // move them to a generic point.
    for p in net.params_mut().iter_mut().filter(|p| p.name.ends_with(".bias")) {
        let n = p.tensor.numel();
        p.tensor.data_mut().copy_from_slice(random_tensor(&mut r, &[n], 0.01, 0.1).data());
    }
    // Kept well inside (0, 1) so the output clamps stay inactive.
    let x = random_tensor(&mut r, &[1, 3, 8, 8], 0.3, 0.7);
    let s = random_tensor(&mut r, &[1, 3, 8, 8], 0.3, 0.7);
    let mb = random_tensor(&mut r, &[1, 1, 8, 8], 0.3, 0.7);
    let ms = random_tensor(&mut r, &[1, 1, 8, 8], 0.0, 1.0);
    let mut inputs: Vec<Tensor<f64>> = net.params().iter().map(|p| p.tensor.clone()).collect();
    inputs.push(x);
    let np = net.params().len();
    let worst = grad_check(&inputs, |tape, vars| {
        let vx = vars[np];
        let vm = tape.constant(mb.clone());
        let vs = tape.constant(s.clone());
        let out = net.forward(tape, &vars[..np], vx, Some(vm)).unwrap();
        total_loss(tape, out.image, vs, out.edges, &ms, &LossWeights::default(), Variant::Epan)
            .unwrap()
            .total
    });
    assert!(worst < 1e-4, "worst relative error {worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn outputs_stay_in_unit_range(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[1, 3, 8, 8], 0.0, 1.0);
        let m = random_tensor(&mut r, &[1, 1, 8, 8], 0.0, 1.0);
        let net = Network::<f64>::build(&small(Variant::Epan), seed).unwrap();
        let (tape, out) = run(&net, &x, &m);
        prop_assert!(tape.value(out.image).data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(tape.value(out.edges.unwrap()).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

use super::*;
use crate::kernels::{reference_conv2d, reference_matmul, NoCount};

fn t(dims: &[usize], v: Vec<f32>) -> DenseTensor {
    DenseTensor::from_vec(Shape::new(dims.to_vec()).unwrap(), v).unwrap()
}

fn rand_t(rng: &mut Rng, dims: &[usize], scale: f32) -> DenseTensor {
    let n = dims.iter().product();
    t(dims, (0..n).map(|_| (rng.next_f32() * 2.0 - 1.0) * scale).collect())
}

fn dense(out: usize, mode: WeightMode) -> LayerSpec {
    LayerSpec::Dense {
        out,
        mode: Some(mode),
        grouping: None,
    }
}

fn toy_conv_net(mode: WeightMode, loss: LossKind, seed: u64) -> Network {
    let specs = vec![
        LayerSpec::Conv {
            out: 3,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            mode: None,
            grouping: None,
        },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2, stride: 2 },
        LayerSpec::Dense {
            out: 4,
            mode: None,
            grouping: None,
        },
        LayerSpec::Loss(loss),
    ];
    Network::build(&[2, 6, 6], &specs, mode, seed).unwrap()
}

#[test]
fn identity_fc_ternary_predicts_input() {
    let w = t(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let layer = Layer::Dense(WeightedLayer::new(w, vec![0.0; 3], WeightMode::Ternary, Grouping::PerLayer));
    let mut net = Network::new(vec![3], vec![layer]).unwrap();
    net.quantize().unwrap();
    let q = net.quant_cache(0).unwrap();
    assert_eq!(q.alphas, vec![1.0]);
    let x = t(&[2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.25]);
    let out = net.forward_eval(&x, None).unwrap();
    assert_eq!(out.scores, x);
}

#[test]
fn full_mode_matches_reference_kernels_bitwise() {
    let specs = vec![
        LayerSpec::Conv {
            out: 4,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            mode: None,
            grouping: None,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2, stride: 2 },
        dense(5, WeightMode::Full),
    ];
    let net = Network::build(&[2, 6, 6], &specs, WeightMode::Full, 7).unwrap();
    let mut rng = Rng::new(1);
    let x = rand_t(&mut rng, &[3, 2, 6, 6], 1.0);
    let got = net.forward_eval(&x, None).unwrap().scores;

    let conv = net.layers()[0].weighted().unwrap();
    let y = reference_conv2d(&x, conv.weight(), conv.bias(), 1, 1, &mut NoCount).unwrap();
    let y = layers::relu_forward(&y);
    let (y, _) = layers::max_pool_forward(&y, 2, 2).unwrap();
    let y = y.reshape(Shape::new([3, 36]).unwrap()).unwrap();
    let fc = net.layers()[3].weighted().unwrap();
    let expect = reference_matmul(&y, fc.weight(), fc.bias(), &mut NoCount).unwrap();
    assert_eq!(got, expect);
}

#[test]
fn golden_toy_loss() {
    // Frozen from the full-precision path on a fixed seed.
    let mut net = toy_conv_net(WeightMode::Full, LossKind::Hinge { squared: true }, 11);
    let mut rng = Rng::new(12);
    let x = rand_t(&mut rng, &[4, 2, 6, 6], 1.0);
    let pass = net.forward_train(&x, &[0, 1, 2, 3]).unwrap();
    assert_eq!(pass.loss.unwrap().to_bits(), GOLDEN_TOY_LOSS_BITS, "{}", pass.loss.unwrap());
}

const GOLDEN_TOY_LOSS_BITS: u64 = 4626475809446341637;

#[test]
fn full_network_gradients_match_differences() {
    let specs = vec![
        dense(6, WeightMode::Full),
        LayerSpec::Relu,
        LayerSpec::BatchNorm,
        dense(5, WeightMode::Full),
        LayerSpec::Relu,
        dense(3, WeightMode::Full),
        LayerSpec::Loss(LossKind::SoftmaxCrossEntropy),
    ];
    let net = Network::build(&[4], &specs, WeightMode::Full, 5).unwrap();
    let mut rng = Rng::new(6);
    let x = rand_t(&mut rng, &[6, 4], 1.0);
    let rep = gradcheck::check_network(&net, &x, &[0, 1, 2, 0, 1, 2], 9, true).unwrap();
    assert!(rep.passed(), "{rep:?}");
    assert!(rep.checked >= 20 * 3);
}

#[test]
fn ternary_input_gradient_matches_differences() {
    let net = toy_conv_net(WeightMode::Ternary, LossKind::SoftmaxCrossEntropy, 3);
    let mut rng = Rng::new(4);
    let x = rand_t(&mut rng, &[3, 2, 6, 6], 1.0);
    let rep = gradcheck::check_network(&net, &x, &[0, 3, 1], 2, false).unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn isolated_layer_checks() {
    for rep in gradcheck::check_all_layers(21) {
        assert!(rep.passed(), "{rep:?}");
    }
}

#[test]
fn zero_everything_stays_finite() {
    let specs = vec![dense(4, WeightMode::Full), LayerSpec::Relu, dense(3, WeightMode::Full), LayerSpec::Loss(LossKind::Hinge { squared: true })];
    let mut net = Network::build(&[5], &specs, WeightMode::Full, 1).unwrap();
    for (_, p) in net.params_mut() {
        p.fill(0.0);
    }
    let x = DenseTensor::zeros(Shape::new([2, 5]).unwrap());
    let pass = net.forward_train(&x, &[0, 2]).unwrap();
    assert_eq!(pass.loss, Some(2.0));
    let g = net.backward(&pass, true).unwrap();
    for (_, v) in g.params() {
        assert!(v.iter().all(|x| x.is_finite()));
    }
}

#[test]
fn conv_groups_per_output_channel() {
    let mut net = toy_conv_net(WeightMode::Ternary, LossKind::SoftmaxCrossEntropy, 8);
    net.quantize().unwrap();
    let q = net.quant_cache(0).unwrap().clone();
    assert_eq!(q.alphas.len(), 3);
    assert_eq!(q.group_size, 18);
    assert_eq!(net.quant_cache(4).unwrap().alphas.len(), 1);

    let lambda = 2.5f32;
    for (id, p) in net.params_mut() {
        if id.layer == 0 && id.kind == ParamKind::Weight {
            p.iter_mut().for_each(|v| *v *= lambda);
        }
    }
    net.quantize().unwrap();
    let scaled = net.quant_cache(0).unwrap();
    assert_eq!(scaled.codes, q.codes);
    for (a, b) in scaled.alphas.iter().zip(&q.alphas) {
        assert!((a - lambda * b).abs() <= 1e-5 * a);
    }

    let mut full = toy_conv_net(WeightMode::Full, LossKind::SoftmaxCrossEntropy, 8);
    full.quantize().unwrap();
    assert!(full.quant_cache(0).is_none());
}

#[test]
fn all_zero_group_names_layer_and_channel() {
    let mut net = toy_conv_net(WeightMode::Ternary, LossKind::SoftmaxCrossEntropy, 8);
    for (id, p) in net.params_mut() {
        if id.layer == 0 && id.kind == ParamKind::Weight {
            p[18..36].fill(0.0);
        }
    }
    match net.quantize() {
        Err(NnError::Quantize { layer: 0, group: 1, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn step_changes_masters_not_codes() {
    let mut net = toy_conv_net(WeightMode::Ternary, LossKind::SoftmaxCrossEntropy, 9);
    let mut rng = Rng::new(1);
    let x = rand_t(&mut rng, &[4, 2, 6, 6], 1.0);
    let pass = net.forward_train(&x, &[0, 1, 2, 3]).unwrap();
    let codes_before = net.quant_cache(0).unwrap().codes.clone();
    let g = net.backward(&pass, false).unwrap();
    let grads: Vec<Vec<f32>> = g.params().iter().map(|(_, v)| v.to_vec()).collect();
    let w_before = net.layers()[0].weighted().unwrap().weight().clone();
    for ((_, p), g) in net.params_mut().into_iter().zip(&grads) {
        for (v, d) in p.iter_mut().zip(g) {
            *v -= 0.5 * d;
        }
    }
    assert_ne!(net.layers()[0].weighted().unwrap().weight(), &w_before);
    // the stored codes are untouched and no longer current
    let stored = net.layers()[0].weighted().unwrap().cache.as_ref().unwrap();
    assert_eq!(stored.codes, codes_before);
    assert!(net.quant_cache(0).is_none());
    assert!(matches!(net.backward(&pass, false), Err(NnError::StaleForward)));
}

#[test]
fn eval_is_pure_and_repeatable() {
    let mut net = toy_conv_net(WeightMode::Ternary, LossKind::Hinge { squared: true }, 10);
    let mut rng = Rng::new(2);
    let x = rand_t(&mut rng, &[4, 2, 6, 6], 1.0);
    net.forward_train(&x, &[0, 1, 2, 3]).unwrap();
    let snapshot = net.clone();
    let a = net.forward_eval(&x, Some(&[0, 1, 2, 3])).unwrap();
    let b = net.forward_eval(&x, Some(&[0, 1, 2, 3])).unwrap();
    assert_eq!(a.scores, b.scores);
    assert_eq!(a.loss, b.loss);
    assert_eq!(net, snapshot);
}

#[test]
fn ternary_eval_close_to_float_on_effective_weights() {
    let mut net = toy_conv_net(WeightMode::Ternary, LossKind::Hinge { squared: true }, 13);
    let mut rng = Rng::new(3);
    let x = rand_t(&mut rng, &[4, 2, 6, 6], 1.0);
    net.forward_train(&x, &[0, 1, 2, 3]).unwrap();
    let model = net.to_model_file().unwrap();
    let mut as_full = model.clone();
    for layer in &mut as_full.layers {
        if let LayerRecord::Conv { mode, weight, .. } | LayerRecord::Dense { mode, weight, .. } = layer {
            if let WeightRecord::Packed(p) = weight {
                *weight = WeightRecord::Raw(p.dequantize().unwrap());
            }
            *mode = WeightMode::Full;
        }
    }
    let ternary = Network::from_model_file(&model).unwrap().forward_eval(&x, None).unwrap();
    let float = Network::from_model_file(&as_full).unwrap().forward_eval(&x, None).unwrap();
    for (a, b) in ternary.scores.data().iter().zip(float.scores.data()) {
        assert!((a - b).abs() <= 1e-4 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn model_file_round_trip_preserves_outputs() {
    for mode in WeightMode::ALL {
        let mut net = toy_conv_net(mode, LossKind::Hinge { squared: false }, 14);
        let mut rng = Rng::new(5);
        let x = rand_t(&mut rng, &[4, 2, 6, 6], 1.0);
        net.forward_train(&x, &[0, 1, 2, 3]).unwrap();
        let before = net.forward_eval(&x, None).unwrap();
        let bytes = net.to_model_file().unwrap().to_bytes();
        let loaded = Network::from_model_file(&ModelFile::from_bytes(&bytes).unwrap()).unwrap();
        let after = loaded.forward_eval(&x, None).unwrap();
        assert_eq!(before.scores, after.scores, "{mode}");
        assert_eq!(loaded.to_model_file().unwrap().to_bytes(), bytes);
        // requantizing loaded masters reproduces the stored codes
        let mut again = loaded.clone();
        again.quantize().unwrap();
        assert_eq!(again.to_model_file().unwrap().to_bytes(), bytes);
    }
}

#[test]
fn invalid_networks() {
    let specs = vec![LayerSpec::Loss(LossKind::SoftmaxCrossEntropy), dense(3, WeightMode::Full)];
    assert!(Network::build(&[4], &specs, WeightMode::Full, 1).is_err());
    let specs = vec![LayerSpec::MaxPool { size: 2, stride: 2 }];
    assert!(Network::build(&[4], &specs, WeightMode::Full, 1).is_err());
    let net = Network::build(&[4], &[dense(2, WeightMode::Full)], WeightMode::Full, 1).unwrap();
    assert!(net.forward_eval(&t(&[1, 5], vec![0.0; 5]), None).is_err());
}

#[test]
fn lenet_shapes() {
    let net = Network::build(&[1, 28, 28], &lenet_small(), WeightMode::Ternary, 1).unwrap();
    assert_eq!(net.output_dims().unwrap(), vec![10]);
    let conv2 = net.layers()[4].weighted().unwrap();
    assert_eq!(conv2.weight().shape().dims(), &[32, 16, 5, 5]);
    let fc1 = net.layers()[8].weighted().unwrap();
    assert_eq!(fc1.weight().shape().dims(), &[256, 32 * 7 * 7]);
}

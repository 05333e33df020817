use super::*;
use crate::gradcheck::finite_diff;
use crate::quant::GradScale;
use crate::rng::{normal, uniform};
use crate::Rng;

fn dense(w: &[f64], out: usize, inp: usize) -> Layer {
    Layer::new(LayerKind::Dense, Tensor::new([out, inp], w.to_vec()).unwrap()).unwrap()
}

#[test]
fn identity_layer_passes_input_through() {
    let net = Network::new(vec![3], vec![dense(&[1., 0., 0., 0., 1., 0., 0., 0., 1.], 3, 3)], LossKind::Mse).unwrap();
    let x = Tensor::new([2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.25]).unwrap();
    for p in [Precision::Latent, Precision::Quantized] {
        assert_eq!(net.forward(&x, p).unwrap(), x);
    }
}

#[test]
fn representable_net_is_unchanged_by_quantization() {
    let mut l = dense(&[0.25, -0.5, 0.75, 0.0], 2, 2);
    l.w_quant = Some(QuantizerState::per_tensor(4, true, 0.25).unwrap());
    l.a_quant = Some(QuantizerState::per_tensor(4, false, 0.5).unwrap());
    let net = Network::new(vec![2], vec![l], LossKind::Mse).unwrap();
    let x = Tensor::new([2, 2], vec![0.5, 1.0, 2.0, 0.0]).unwrap();
    assert_eq!(net.forward(&x, Precision::Quantized).unwrap(), net.forward(&x, Precision::Latent).unwrap());
}

fn random_mlp(seed: u64, bits: u32) -> Network {
    let mut rng = Rng::new(seed);
    let mut net = mlp(&[4, 6, 3], LossKind::Mse, &mut rng).unwrap();
    let x = uniform(&mut rng, &[32, 4], 0.0, 1.0).unwrap();
    let plan = QuantPlan { bits_w: bits, bits_a: bits, first_last_bits: None, ..QuantPlan::default() };
    attach_quantizers(&mut net, &plan, &x).unwrap();
    for bn in net.layers.iter_mut().filter_map(|l| l.bn.as_mut()) {
        bn.running_mean = normal(&mut rng, &[6], 0.3);
        bn.running_var = uniform(&mut rng, &[6], 0.5, 2.0).unwrap();
        bn.gain = uniform(&mut rng, &[6], 0.5, 1.5).unwrap();
        bn.bias = normal(&mut rng, &[6], 0.2);
    }
    net
}

#[test]
fn soft_round_at_half_matches_hard_rounding() {
    let net = random_mlp(1, 3);
    let x = uniform(&mut Rng::new(2), &[8, 4], 0.0, 1.0).unwrap();
    let soft = Precision::SoftRound(SoftRoundConfig::new(0.5).unwrap());
    assert_eq!(net.forward(&x, soft).unwrap(), net.forward(&x, Precision::Quantized).unwrap());
}

#[test]
fn two_layer_forward_matches_hand_composition() {
    let net = random_mlp(4, 4);
    let x = uniform(&mut Rng::new(5), &[5, 4], 0.0, 1.0).unwrap();
    let mut act = x.clone();
    for l in &net.layers {
        let a = quantize(&act, l.a_quant.as_ref().unwrap()).unwrap();
        let w = quantize(&l.weight, l.w_quant.as_ref().unwrap()).unwrap();
        let mut h = a.matmul(&w.transpose().unwrap()).unwrap();
        let c = l.out_channels();
        for (i, v) in h.data_mut().iter_mut().enumerate() {
            *v += l.bias.data()[i % c];
        }
        if let Some(bn) = &l.bn {
            h = bn.forward_eval(&h).unwrap();
        }
        act = h.map(|v| l.nonlinearity.apply(v));
    }
    let out = net.forward(&x, Precision::Quantized).unwrap();
    assert!(out.max_abs_diff(&act).unwrap() < 1e-12);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let net = random_mlp(6, 3);
    let x = uniform(&mut Rng::new(7), &[8, 4], 0.0, 1.0).unwrap();
    let (out, cache) = net.forward_cached(&x, ForwardOptions::train(Precision::Quantized)).unwrap();
    let grads = net.backward(&cache, &Tensor::zeros(out.shape().to_vec())).unwrap();
    assert_eq!(grads.entries.len(), net.params().len());
    for (_, g) in &grads.entries {
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn latent_backward_matches_finite_differences_with_batch_stats() {
    // without quantizers the network is smooth, so every parameter can be checked
    let mut rng = Rng::new(8);
    let mut net = random_mlp(8, 8);
    for l in &mut net.layers {
        let n = l.out_channels();
        let mut c = crate::qc::CorrectionParams::identity(n, crate::qc::QcGranularity::PerChannel);
        c.gamma = uniform(&mut rng, &[n], 0.5, 1.5).unwrap();
        c.beta = normal(&mut rng, &[n], 0.1);
        l.correction = Some(c);
    }
    let x = uniform(&mut rng, &[6, 4], 0.0, 1.0).unwrap();
    let t = normal(&mut rng, &[6, 3], 1.0);
    let opts = ForwardOptions::train(Precision::Latent);
    let (out, cache) = net.forward_cached(&x, opts).unwrap();
    let (_, g) = loss::loss_and_grad(LossKind::Mse, &out, &t).unwrap();
    let grads = net.backward(&cache, &g).unwrap();
    for (id, p) in net.params() {
        if id.kind.is_scale() {
            continue;
        }
        let fd = finite_diff(
            |v| {
                let mut probe = net.clone();
                for (pid, pt) in probe.params_mut() {
                    if pid == id {
                        pt.data_mut().copy_from_slice(v.data());
                    }
                }
                let (o, _) = probe.forward_cached(&x, opts).unwrap();
                loss::loss(LossKind::Mse, &o, &t).unwrap()
            },
            p,
            1e-6,
        )
        .unwrap();
        let an = grads.get(id).unwrap();
        let tol = 1e-6 * (1.0 + fd.max_abs());
        assert!(an.max_abs_diff(&fd).unwrap() < tol, "{}: {:?} vs {:?}", id.name(), an, fd);
    }
}

#[test]
fn duplicated_rows_give_the_same_gradient() {
    let mut net = random_mlp(9, 4);
    net.layers.iter_mut().for_each(|l| l.bn = None);
    let x = Tensor::new([1, 4], vec![0.2, 0.9, 0.4, 0.6]).unwrap();
    let t = Tensor::new([1, 3], vec![1.0, -1.0, 0.5]).unwrap();
    let xx = Tensor::new([2, 4], [x.data(), x.data()].concat()).unwrap();
    let tt = Tensor::new([2, 3], [t.data(), t.data()].concat()).unwrap();
    let grad = |x: &Tensor, t: &Tensor| {
        let (o, c) = net.forward_cached(x, ForwardOptions::eval(Precision::Quantized)).unwrap();
        let (_, g) = loss::loss_and_grad(LossKind::Mse, &o, t).unwrap();
        net.backward(&c, &g).unwrap()
    };
    let (a, b) = (grad(&x, &t), grad(&xx, &tt));
    for ((_, ga), (_, gb)) in a.entries.iter().zip(&b.entries) {
        assert!(ga.max_abs_diff(gb).unwrap() < 1e-12 * (1.0 + ga.max_abs()));
    }
}

#[test]
fn soft_round_has_no_backward() {
    let net = random_mlp(10, 4);
    let x = Tensor::zeros([2, 4]);
    let p = Precision::SoftRound(SoftRoundConfig::new(0.45).unwrap());
    let (out, cache) = net.forward_cached(&x, ForwardOptions::eval(p)).unwrap();
    assert!(matches!(net.backward(&cache, &out), Err(Error::State(_))));
}

#[test]
fn input_shape_is_checked() {
    let net = random_mlp(11, 4);
    assert!(matches!(net.forward(&Tensor::zeros([2, 5]), Precision::Latent), Err(Error::Dimension { .. })));
}

#[test]
fn dampening_examples() {
    let mut l = dense(&[0.26], 1, 1);
    l.w_quant = Some(QuantizerState::per_tensor(4, true, 0.1).unwrap());
    let mut net = Network::new(vec![1], vec![l], LossKind::Mse).unwrap();
    let p = dampening_penalty(&net, 1.0).unwrap();
    assert!((p.value - 0.0016).abs() < 1e-15);
    net.layers[0].weight = Tensor::new([1, 1], vec![0.3]).unwrap();
    assert!(dampening_penalty(&net, 1.0).unwrap().value < 1e-30);
}

#[test]
fn dampening_gradient_matches_finite_differences() {
    let net = random_mlp(12, 3);
    let lambda = 0.7;
    let pen = dampening_penalty(&net, lambda).unwrap();
    for (id, g) in &pen.grads.entries {
        let w = net.param(*id).unwrap();
        let fd = finite_diff(
            |v| {
                let mut probe = net.clone();
                probe.layers[id.layer].weight = v.clone();
                dampening_penalty(&probe, lambda).unwrap().value
            },
            w,
            1e-7,
        )
        .unwrap();
        assert!(g.max_abs_diff(&fd).unwrap() < 1e-6);
    }
}

#[test]
fn adam_first_step_closed_form() {
    let mut net = Network::new(vec![2], vec![dense(&[0.5, -0.5], 1, 2)], LossKind::Mse).unwrap();
    let id = ParamId { layer: 0, kind: ParamKind::Weight };
    let g = Tensor::new([1, 2], vec![0.3, -2.0]).unwrap();
    let grads = Gradients {
        entries: vec![(id, g.clone()), (ParamId { layer: 0, kind: ParamKind::Bias }, Tensor::zeros([1]))],
    };
    let mut adam = Adam::new(0.01);
    adam.step(&mut net, &grads, |_| true).unwrap();
    for (k, &w0) in [0.5, -0.5].iter().enumerate() {
        let gk = g.data()[k];
        let want = w0 - 0.01 * gk / (gk.abs() + 1e-8);
        assert!((net.layers[0].weight.data()[k] - want).abs() < 1e-15);
    }
    assert_eq!(net.layers[0].bias.data(), &[0.0]);
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut net = Network::new(vec![1], vec![dense(&[1.0], 1, 1)], LossKind::Mse).unwrap();
    let grads = Gradients {
        entries: vec![(ParamId { layer: 0, kind: ParamKind::Weight }, Tensor::from_parts(vec![1, 1], vec![f64::NAN]))],
    };
    assert!(matches!(Adam::new(0.1).step(&mut net, &grads, |_| true), Err(Error::Evaluation(_))));
}

#[test]
fn adam_clamps_scales() {
    let mut l = dense(&[1.0], 1, 1);
    l.w_quant = Some(QuantizerState::per_tensor(4, true, 1e-3).unwrap().with_grad_scale(GradScale::None));
    let mut net = Network::new(vec![1], vec![l], LossKind::Mse).unwrap();
    let grads = Gradients {
        entries: vec![(ParamId { layer: 0, kind: ParamKind::WeightScale }, Tensor::from_slice(&[1.0]))],
    };
    Adam::new(1.0).step(&mut net, &grads, |_| true).unwrap();
    assert_eq!(net.layers[0].w_quant.as_ref().unwrap().scale.data(), &[crate::MIN_SCALE]);
}

#[test]
fn param_names_round_trip() {
    let net = random_mlp(13, 4);
    for (id, _) in net.params() {
        assert_eq!(ParamId::parse(&id.name()), Some(id));
    }
    assert_eq!(ParamId::parse("layers.x.weight"), None);
}

#[test]
fn cnn_shapes_and_op_count() {
    let net = desk_cnn([1, 8, 8], 16, 4, &mut Rng::new(0)).unwrap();
    let shapes = net.layer_shapes(2).unwrap();
    assert_eq!(shapes.last().unwrap(), &vec![2, 4]);
    assert_eq!(shapes[2], vec![2, 16, 4, 4]);
    let macs = 64 * 16 * 9 + 16 * 16 * 9 + 16 * 32 * 16 + 512 * 4;
    let bn = 64 * 16 + 16 * 16 + 16 * 32;
    assert_eq!(net.op_count().unwrap(), macs + bn);
}

#[test]
fn zero_epochs_leave_the_net_alone() {
    let data = crate::data::gen_classification(1, 200, 3, crate::data::ClassMode::Blobs { dim: 4, noise: 0.1 }).unwrap();
    let net = mlp(&[4, 8, 3], LossKind::SoftmaxCrossEntropy, &mut Rng::new(1)).unwrap();
    let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let out = train_qat(net.clone(), &data, &cfg).unwrap();
    assert!(out.history.is_empty());
    let mut expect = net;
    expect.set_bn_mode(BnMode::Eval);
    assert_eq!(out.net, expect);
}

#[test]
fn latent_training_separates_blobs() {
    let data = crate::data::gen_classification(2, 600, 3, crate::data::ClassMode::Blobs { dim: 2, noise: 0.05 }).unwrap();
    let net = mlp(&[2, 16, 3], LossKind::SoftmaxCrossEntropy, &mut Rng::new(2)).unwrap();
    let cfg = TrainConfig { epochs: 15, lr: 1e-2, precision: Precision::Latent, ..TrainConfig::default() };
    let out = train_qat(net, &data, &cfg).unwrap();
    assert!(out.history.last().unwrap().eval.accuracy.unwrap() >= 0.99);
}

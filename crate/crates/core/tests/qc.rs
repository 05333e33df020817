use proptest::prelude::*;
use qatlab_core::data::{gen_regression, Dataset, Task, Teacher};
use qatlab_core::nn::{
    attach_quantizers, mlp, BatchNorm, BnMode, Layer, LayerKind, LossKind, Network, Nonlinearity, Precision, QuantPlan,
};
use qatlab_core::qc::{
    absorb_corrections, fit_qc, fold_bn_into_quant_scale, qc_ablation, CorrectionParams, QcConfig, QcGranularity,
    QcVariant,
};
use qatlab_core::quant::{integer_code, QuantizerState};
use qatlab_core::rng::{normal, uniform};
use qatlab_core::{Rng, Tensor};

/// Dense layer whose weights sit on the grid with codes in `[u + 1, v]`, so a
/// negated code is still representable.
fn grid_layer(rng: &mut Rng, cin: usize, cout: usize, with_bn: bool) -> Layer {
    let q = QuantizerState::per_tensor(4, true, 0.125).unwrap();
    let (u, v) = (q.lower(), q.upper());
    let codes: Vec<f64> = (0..cin * cout).map(|_| (u + 1 + rng.below((v - u) as usize) as i64) as f64).collect();
    let weight = Tensor::new([cout, cin], codes.iter().map(|c| c * 0.125).collect()).unwrap();
    let mut layer = Layer::new(LayerKind::Dense, weight).unwrap();
    layer.bias = normal(rng, &[cout], 0.3);
    layer.w_quant = Some(q);
    layer.a_quant = Some(QuantizerState::per_tensor(8, true, 0.02).unwrap());
    if with_bn {
        let mut bn = BatchNorm::new(cout);
        bn.gain = normal(rng, &[cout], 1.0);
        bn.bias = normal(rng, &[cout], 0.5);
        bn.running_mean = normal(rng, &[cout], 0.5);
        bn.running_var = uniform(rng, &[cout], 0.2, 2.0).unwrap();
        bn.mode = BnMode::Eval;
        layer.bn = Some(bn);
    }
    layer
}

fn random_correction(rng: &mut Rng, cout: usize, g: QcGranularity) -> CorrectionParams {
    let mut c = CorrectionParams::identity(cout, g);
    let n = c.gamma.len();
    c.gamma = Tensor::from_slice(&(0..n).map(|_| rng.range(0.5, 1.5) * if rng.below(3) == 0 { -1.0 } else { 1.0 }).collect::<Vec<_>>());
    c.beta = normal(rng, &[n], 0.5);
    c
}

fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).unwrap() / (1.0 + a.max_abs())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn absorbing_corrections_preserves_outputs(seed in any::<u64>(), with_bn in any::<bool>(), per_channel in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let g = if per_channel { QcGranularity::PerChannel } else { QcGranularity::PerTensor };
        let mut l0 = grid_layer(&mut rng, 5, 6, with_bn).with_nonlinearity(Nonlinearity::Silu);
        l0.correction = Some(random_correction(&mut rng, 6, g));
        let mut l1 = grid_layer(&mut rng, 6, 3, false);
        l1.correction = Some(random_correction(&mut rng, 3, g));
        let net = Network::new(vec![5], vec![l0, l1], LossKind::Mse).unwrap();
        let (absorbed, recoded) = absorb_corrections(&net).unwrap();
        prop_assert_eq!(recoded, 0);
        prop_assert!(absorbed.layers.iter().all(|l| l.correction.is_none()));
        let x = uniform(&mut rng, &[16, 5], -1.0, 1.0).unwrap();
        for p in [Precision::Quantized, Precision::Latent] {
            let a = net.forward(&x, p).unwrap();
            let b = absorbed.forward(&x, p).unwrap();
            prop_assert!(rel_diff(&a, &b) <= 1e-10, "{:?}: {}", p, rel_diff(&a, &b));
        }
    }

    #[test]
    fn folding_batch_norm_preserves_outputs_and_codes(seed in any::<u64>(), with_correction in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let mut layer = grid_layer(&mut rng, 7, 4, true);
        if with_correction {
            layer.correction = Some(random_correction(&mut rng, 4, QcGranularity::PerChannel));
        }
        let folded = fold_bn_into_quant_scale(&layer).unwrap();
        prop_assert_eq!(folded.recoded, 0);
        prop_assert!(folded.layer.bn.is_none() && folded.layer.correction.is_none());
        let before = Network::new(vec![7], vec![layer.clone()], LossKind::Mse).unwrap();
        let after = Network::new(vec![7], vec![folded.layer.clone()], LossKind::Mse).unwrap();
        let x = uniform(&mut rng, &[16, 7], -1.0, 1.0).unwrap();
        let d = rel_diff(&before.forward(&x, Precision::Quantized).unwrap(), &after.forward(&x, Precision::Quantized).unwrap());
        prop_assert!(d <= 1e-6, "{}", d);
        let q0 = layer.w_quant.as_ref().unwrap();
        let q1 = folded.layer.w_quant.as_ref().unwrap();
        let old = integer_code(&layer.weight, q0).unwrap();
        let new = integer_code(&folded.layer.weight, q1).unwrap();
        for (i, (o, n)) in old.iter().zip(&new).enumerate() {
            prop_assert!(*n >= q1.lower() && *n <= q1.upper());
            prop_assert_eq!(o.abs(), n.abs(), "element {}", i);
        }
    }
}

#[test]
fn sign_flip_at_the_clip_edge_is_recoded_and_counted() {
    let mut rng = Rng::new(1);
    let mut layer = grid_layer(&mut rng, 3, 2, true);
    let q = layer.w_quant.clone().unwrap();
    layer.weight.data_mut()[0] = q.lower() as f64 * 0.125;
    layer.bn.as_mut().unwrap().gain = Tensor::from_slice(&[-1.0, 1.0]);
    let folded = fold_bn_into_quant_scale(&layer).unwrap();
    assert_eq!(folded.recoded, 1);
    let code = integer_code(&folded.layer.weight, folded.layer.w_quant.as_ref().unwrap()).unwrap()[0];
    assert_eq!(code, q.upper());
}

fn regression_setup(seed: u64) -> (Network, Dataset) {
    let data = gen_regression(seed, 800, 6, &Teacher::Mlp { hidden: vec![12], outputs: 3 }, 0.05).unwrap();
    let mut net = mlp(&[6, 16, 3], LossKind::Mse, &mut Rng::new(seed)).unwrap();
    let (x, _) = data.batch(&data.train[..128]).unwrap();
    let plan = QuantPlan { bits_w: 3, bits_a: 3, first_last_bits: None, ..QuantPlan::default() };
    attach_quantizers(&mut net, &plan, &x).unwrap();
    net.set_bn_mode(BnMode::Eval);
    (net, data)
}

#[test]
fn fitting_leaves_the_base_network_untouched() {
    let (net, data) = regression_setup(2);
    let out = fit_qc(&net, &data, &QcConfig { seed: 2, ..QcConfig::default() }).unwrap();
    assert!(out.corrections().iter().all(|c| c.is_some()));
    assert!(out.corrections().iter().any(|c| !c.unwrap().is_identity()));
    for (a, b) in net.layers.iter().zip(&out.net.layers) {
        assert_eq!(a.weight, b.weight);
        assert_eq!(a.bias, b.bias);
        assert_eq!(a.w_quant, b.w_quant);
        assert_eq!(a.a_quant, b.a_quant);
        assert_eq!(a.bn, b.bn);
    }
    let (absorbed, _) = absorb_corrections(&out.net).unwrap();
    assert_eq!(absorbed.op_count().unwrap(), net.op_count().unwrap());
}

#[test]
fn scale_only_fit_undoes_a_uniform_gain() {
    // y = 2x on an exact grid; the best scale-only correction is 1/2
    let mut rng = Rng::new(3);
    let x: Vec<f64> = (0..4000 * 4).map(|_| rng.below(64) as f64 / 64.0).collect();
    let inputs = Tensor::new([4000, 4], x.clone()).unwrap();
    let targets = Tensor::new([4000, 4], x).unwrap();
    let data = Dataset::from_samples(inputs, targets, Task::Regression, 3, 0.0, 1.0).unwrap();
    let mut w = vec![0.0; 16];
    for i in 0..4 {
        w[i * 5] = 2.0;
    }
    let mut layer = Layer::new(LayerKind::Dense, Tensor::new([4, 4], w).unwrap()).unwrap();
    layer.w_quant = Some(QuantizerState::per_tensor(4, true, 0.5).unwrap());
    layer.a_quant = Some(QuantizerState::per_tensor(8, false, 1.0 / 64.0).unwrap());
    let net = Network::new(vec![4], vec![layer], LossKind::Mse).unwrap();
    let cfg = QcConfig { lr: 5e-3, batch: 8, use_shift: false, ..QcConfig::default() };
    let out = fit_qc(&net, &data, &cfg).unwrap();
    let c = out.corrections()[0].unwrap();
    for &g in c.gamma.data() {
        assert!((g - 0.5).abs() < 1e-2, "{g}");
    }
    assert_eq!(c.beta.data(), &[0.0; 4]);
    assert!(out.calib_loss_after < 1e-3 * out.calib_loss_before);
}

#[test]
fn ablation_grid_shape_and_identity_cells() {
    let (net, data) = regression_setup(4);
    let variants = [QcVariant::ScaleOnly, QcVariant::ShiftOnly, QcVariant::Both, QcVariant::Identity];
    let t = qc_ablation(&net, &data, &QcConfig::default(), &variants).unwrap();
    assert_eq!(t.cells.len(), 2);
    assert!(t.cells.iter().all(|row| row.len() == 4));
    for g in [QcGranularity::PerTensor, QcGranularity::PerChannel] {
        assert_eq!(t.cell(g, QcVariant::Identity).unwrap(), &t.uncorrected);
        for v in QcVariant::TABLE {
            assert!(t.cell(g, v).unwrap().loss.is_finite());
        }
    }
}

#[test]
fn empty_calibration_is_rejected() {
    let (net, mut data) = regression_setup(5);
    data.calibration.clear();
    assert!(matches!(fit_qc(&net, &data, &QcConfig::default()), Err(qatlab_core::Error::Argument(_))));
}

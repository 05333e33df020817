use qatlab::checkpoint::{Checkpoint, FORMAT_VERSION};
use qatlab::core::ema::EmaState;
use qatlab::core::nn::{attach_quantizers, desk_cnn, mlp, BnMode, LossKind, QuantPlan};
use qatlab::core::qc::{CorrectionParams, QcGranularity};
use qatlab::core::rng::{normal, uniform};
use qatlab::core::Rng;
use qatlab::LabError;
use serde_json::json;

fn sample() -> Checkpoint {
    let mut rng = Rng::new(1);
    let mut net = desk_cnn([1, 6, 6], 4, 3, &mut rng).unwrap();
    let x = uniform(&mut rng, &[8, 1, 6, 6], 0.0, 1.0).unwrap();
    attach_quantizers(&mut net, &QuantPlan { per_channel_weights: true, ..QuantPlan::default() }, &x).unwrap();
    for l in &mut net.layers {
        if let Some(bn) = &mut l.bn {
            bn.running_mean = normal(&mut rng, &[bn.channels()], 1.0);
            bn.mode = BnMode::Eval;
        }
    }
    let mut c = CorrectionParams::identity(net.layers[1].out_channels(), QcGranularity::PerChannel);
    c.gamma = normal(&mut rng, c.gamma.shape(), 1.0);
    net.layers[1].correction = Some(c);
    let mut ema = EmaState::new(0.99, 3).unwrap();
    ema.update_from(&net).unwrap();
    ema.update_from(&net).unwrap();
    Checkpoint::new(net, vec![ema], json!({"note": "test", "lr": 0.1 + 0.2}))
}

#[test]
fn round_trip_is_lossless() {
    let c = sample();
    let back = Checkpoint::decode(&c.encode()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.config["lr"].as_f64().unwrap().to_bits(), (0.1f64 + 0.2).to_bits());
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.qckpt"), dir.path().join("b.qckpt"));
    sample().save(&a).unwrap();
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn mlp_without_quantizers_round_trips() {
    let net = mlp(&[3, 5, 2], LossKind::Mse, &mut Rng::new(2)).unwrap();
    let c = Checkpoint::new(net, vec![], json!(null));
    assert_eq!(Checkpoint::decode(&c.encode()).unwrap(), c);
}

#[test]
fn truncation_names_the_cut_tensor() {
    let bytes = sample().encode();
    let err = Checkpoint::decode(&bytes[..bytes.len() - 3]).unwrap_err();
    match err {
        LabError::Checksum(name) => assert!(name.starts_with("ema.0."), "{name}"),
        e => panic!("unexpected {e}"),
    }
    assert!(matches!(Checkpoint::decode(&bytes[..40]), Err(LabError::Format(_))));
}

#[test]
fn flipped_payload_byte_names_its_tensor() {
    let c = sample();
    let mut bytes = c.encode();
    // the first payload tensor is layers.0.weight
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    bytes[52 + header_len + 5] ^= 0x40;
    match Checkpoint::decode(&bytes).unwrap_err() {
        LabError::Checksum(name) => assert_eq!(name, "layers.0.weight"),
        e => panic!("unexpected {e}"),
    }
    let mut bytes = c.encode();
    bytes[60] ^= 1;
    assert!(matches!(Checkpoint::decode(&bytes), Err(LabError::Checksum(n)) if n == "header"));
}

#[test]
fn other_versions_are_rejected_explicitly() {
    let mut bytes = sample().encode();
    bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let err = Checkpoint::decode(&bytes).unwrap_err();
    assert!(matches!(err, LabError::Version { found, expected } if found == FORMAT_VERSION + 1 && expected == FORMAT_VERSION));
    assert!(err.to_string().contains("version"));
}

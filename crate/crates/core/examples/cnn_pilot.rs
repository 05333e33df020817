//! Pilot for the desk-scale CNN trend criteria. For each seed: latent
//! pre-training, 3-bit QAT with EMA shadows, then QC on the shadow model.
//! Positional args: noise epochs lr qc_lr first_last_bits width n seeds qc_batch;
//! the defaults are the lab's default experiment.

use std::time::Instant;

use qatlab_core::data::{gen_classification, ClassMode, Split};
use qatlab_core::ema::materialize_ema;
use qatlab_core::nn::{attach_quantizers, desk_cnn, evaluate, train_qat, EmaConfig, Precision, QuantPlan, TrainConfig};
use qatlab_core::qc::{fit_qc, QcConfig, QcGranularity};
use qatlab_core::quant::SoftRoundConfig;
use qatlab_core::Rng;

fn arg(i: usize, d: f64) -> f64 {
    std::env::args().nth(i).map(|a| a.parse().unwrap()).unwrap_or(d)
}

fn main() {
    let noise = arg(1, 0.8);
    let epochs = arg(2, 15.0) as usize;
    let lr = arg(3, 1e-2);
    let qc_lr = arg(4, 5e-3);
    let fl = arg(5, 0.0) as u32;
    let width = arg(6, 8.0) as usize;
    let n = arg(7, 8000.0) as usize;
    let seeds = arg(8, 10.0) as u64;
    let qb = arg(9, 16.0) as usize;
    let t0 = Instant::now();
    let mut wins = [0; 6];
    for seed in 0..seeds {
        let data = gen_classification(seed, n, 8, ClassMode::Blobs { dim: 64, noise })
            .unwrap()
            .reshape_samples(&[1, 8, 8])
            .unwrap();
        let net = desk_cnn([1, 8, 8], width, 8, &mut Rng::stream(seed, 100)).unwrap();
        let pre = TrainConfig { epochs: 6, lr: 1e-2, precision: Precision::Latent, seed, eval_emas: false, ..TrainConfig::default() };
        let pre = train_qat(net, &data, &pre).unwrap();
        let fp = pre.history.last().unwrap().eval.accuracy.unwrap();
        let mut net = pre.net;
        let (calx, _) = data.batch(&data.indices(Split::Train)[..256]).unwrap();
        let plan = QuantPlan { bits_w: 3, bits_a: 3, first_last_bits: if fl > 0 { Some(fl) } else { None }, input_signed: true, ..QuantPlan::default() };
        attach_quantizers(&mut net, &plan, &calx).unwrap();
        let ptq = evaluate(&net, &data, Split::Eval, Precision::Quantized).unwrap().accuracy.unwrap();
        let cfg = TrainConfig { epochs, lr, seed, emas: vec![EmaConfig::new(0.99), EmaConfig::new(0.999)], eval_emas: false, ..TrainConfig::default() };
        let out = train_qat(net, &data, &cfg).unwrap();
        let lsq = evaluate(&out.net, &data, Split::Eval, Precision::Quantized).unwrap();
        let ema_net = materialize_ema(&out.net, &out.emas[0]).unwrap();
        let ema = evaluate(&ema_net, &data, Split::Eval, Precision::Quantized).unwrap();
        let ema3 = evaluate(&materialize_ema(&out.net, &out.emas[1]).unwrap(), &data, Split::Eval, Precision::Quantized).unwrap();
        let qc = fit_qc(&ema_net, &data, &QcConfig { lr: qc_lr, seed, batch: qb, ..QcConfig::default() }).unwrap();
        let emaqc = evaluate(&qc.net, &data, Split::Eval, Precision::Quantized).unwrap();
        let qct = fit_qc(&ema_net, &data, &QcConfig { lr: qc_lr, seed, batch: qb, granularity: QcGranularity::PerTensor, ..QcConfig::default() }).unwrap();
        let emaqct = evaluate(&qct.net, &data, Split::Eval, Precision::Quantized).unwrap();
        let soft = evaluate(&out.net, &data, Split::Eval, Precision::SoftRound(SoftRoundConfig::new(0.45).unwrap())).unwrap();
        let osc = out.tracker.oscillating_fraction(0.01).unwrap_or(0.0);
        let a = |m: &qatlab_core::nn::EvalMetrics| m.accuracy.unwrap();
        wins[0] += (a(&emaqc) >= a(&lsq)) as u32;
        wins[1] += (qc.calib_loss_after <= qc.calib_loss_before) as u32;
        wins[2] += (soft.loss <= lsq.loss) as u32;
        wins[3] += (a(&emaqc) >= a(&emaqct)) as u32;
        wins[4] += (a(&ema) >= a(&lsq)) as u32;
        wins[5] += (emaqc.loss <= emaqct.loss) as u32;
        println!(
            "seed {seed}: fp {fp:.3} ptq {ptq:.3} lsq {:.3} ema {:.3} ema.999 {:.3} ema+qc {:.3} (pt {:.3}) calib {:.4}->{:.4} loss lsq {:.4} soft {:.4} osc {osc:.4} t {:.0}s",
            a(&lsq), a(&ema), a(&ema3), a(&emaqc), a(&emaqct), qc.calib_loss_before, qc.calib_loss_after, lsq.loss, soft.loss, t0.elapsed().as_secs_f64()
        );
    }
    println!("emaqc>=lsq {} calib {} soft {} pc>=pt {} ema>=lsq {} pc-loss {}", wins[0], wins[1], wins[2], wins[3], wins[4], wins[5]);
}

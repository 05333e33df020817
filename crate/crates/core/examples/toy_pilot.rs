//! Pilot sweep for the toy oscillation criteria: for each seed, prints the
//! largest live and shadow flip frequency over the final 500 steps and the
//! final loss of both parameter sets on a fixed evaluation batch.

use qatlab_core::rng::uniform;
use qatlab_core::toy::{run_toy, toy_loss_at, ToyProblem};
use qatlab_core::Rng;

fn main() {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let mut p = ToyProblem::one_bit();
    if let Some(&a) = args.first() {
        p.ema_alpha = a;
    }
    if let Some(&s) = args.get(1) {
        p.signed_w = s != 0.0;
    }
    let x_eval = uniform(&mut Rng::stream(0, 77), &[4096, 3], 0.0, 1.0).unwrap();
    let (mut osc, mut lower, mut better) = (0, 0, 0);
    for seed in 0..10 {
        let run = run_toy(&p, true, &mut Rng::new(seed)).unwrap();
        let live = run.tail_flip_frequency(500);
        let shadow = run.shadow_tail_flip_frequency(500).unwrap();
        let (w, sw, sx) = run.final_live();
        let (wb, swb, sxb) = run.final_shadow().unwrap();
        let _ = (&w, &wb, swb, sxb);
        let tail = run.steps.len() - 500;
        let mut l_live = 0.0;
        let mut l_ema = 0.0;
        for (st, sh) in run.steps[tail..].iter().zip(&run.shadow.as_ref().unwrap()[tail..]) {
            l_live += toy_loss_at(&p, &qatlab_core::Tensor::from_slice(&st.w), st.s_w, st.s_x, &x_eval).unwrap() / 500.0;
            l_ema += toy_loss_at(&p, &qatlab_core::Tensor::from_slice(&sh.w), sh.s_w, sh.s_x, &x_eval).unwrap() / 500.0;
        }
        let lmax = live.iter().cloned().fold(0.0, f64::max);
        let smax = shadow.iter().cloned().fold(0.0, f64::max);
        osc += (lmax > 0.05) as u32;
        lower += (shadow.iter().sum::<f64>() < live.iter().sum::<f64>()) as u32;
        better += (l_ema <= l_live) as u32;
        println!(
            "seed {seed}: live {live:.3?} shadow {shadow:.3?} max {lmax:.3}/{smax:.3} loss {l_live:.4}/{l_ema:.4} s_w {sw:.3} s_x {sx:.3} w {:.3?}",
            w.data()
        );
    }
    println!("oscillating {osc}/10, shadow fewer flips {lower}/10, shadow loss <= live {better}/10");
}

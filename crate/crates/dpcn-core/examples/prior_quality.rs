use dpcn_core::config::Config;
use dpcn_core::model::{bind_model, ModelParams, Trainability};
use dpcn_core::pipeline::{forward_episode, PinSession};
use dpcn_core::synth::{fold_split, ClassLibrary, Phase};
use dpcn_core::tape::GradTape;
use dpcn_core::tensor::resize_nearest;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lib = ClassLibrary::build(12, 0xD47A);
    let split = fold_split(12, 0);
    let cfg = Config::default();
    let params = if args.len() > 1 {
        ModelParams::load_checkpoint(std::path::Path::new(&args[1])).unwrap()
    } else {
        ModelParams::init(&cfg, 0)
    };
    // How well do m_pse0 / m_pse_r rank foreground above background?
    // AUC-style: mean prior value inside gt fg minus outside.
    let mut gap0 = 0.0;
    let mut gap_r = 0.0;
    let n = 40;
    for seed in 0..n {
        let ep = lib.sample_episode(&split, Phase::Test, 1, seed).unwrap();
        let mut tape = GradTape::new();
        let frozen = Trainability { encoder_stage: [false; 3], ffm: false, kgen: false, decoder: false };
        let bound = bind_model(&mut tape, &params, &frozen);
        let mut pins = PinSession::off();
        let (out, _, _) = forward_episode(&mut tape, &bound, &cfg, &ep, &mut pins).unwrap();
        let act = out.activation.as_ref().unwrap();
        let gt = resize_nearest(&ep.query_mask, 16, 16);
        let stat = |map: &[f64]| {
            let (mut fg, mut bg, mut nf, mut nb) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for (v, g) in map.iter().zip(&gt.data) {
                if *g > 0.5 { fg += v; nf += 1.0; } else { bg += v; nb += 1.0; }
            }
            fg / nf.max(1.0) - bg / nb.max(1.0)
        };
        gap0 += stat(&act.m_pse0.data);
        let mpr = tape.value(out.m_pse_r.unwrap()).data.clone();
        gap_r += stat(&mpr);
    }
    println!("mean fg-bg gap: m_pse0 {:.4}, m_pse_r {:.4}", gap0 / n as f64, gap_r / n as f64);
}

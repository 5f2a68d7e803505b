//! Episodic training: SGD with a poly learning-rate schedule, batched
//! episode gradients, CSV logging, checkpointing, and the end-to-end
//! gradient check.

use std::fs;
use std::io::Write as IoWrite;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::gradcheck::rel_err;
use crate::model::{bind_model, ModelParams, Trainability, PARAM_GROUPS};
use crate::pipeline::{episode_loss, PinSession};
use crate::synth::{derive_seed, ClassLibrary, Episode, FoldSplit, Phase};
use crate::tape::GradTape;
use crate::tensor::{resize_bilinear, resize_nearest, Tensor};

/// Episodes used for the per-epoch validation log line.
const VAL_EPISODES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss_q: f64,
    pub loss_s: f64,
    pub loss_total: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<StepRow>,
    pub val: Vec<(usize, f64)>,
}

/// lr0 * (1 - iter/max_iter)^power.
pub fn poly_lr(cfg: &Config, iter: usize, max_iter: usize) -> f64 {
    cfg.lr0 * (1.0 - iter as f64 / max_iter as f64).powf(cfg.poly_power)
}

/// Which parts train at this epoch: backbone stages 1-2 only during
/// warmup (stage 3 feeds the fixed matching prior), heads always.
pub fn trainability(cfg: &Config, epoch: usize) -> Trainability {
    if cfg.train_backbone {
        return Trainability::all();
    }
    let warm = epoch < cfg.warmup_epochs;
    Trainability { encoder_stage: [warm, warm, true], ffm: true, kgen: true, decoder: true }
}

pub fn steps_per_epoch(cfg: &Config) -> usize {
    (cfg.episodes_per_epoch / cfg.batch).max(1)
}

/// CSV text of a training log, full-precision floats.
pub fn log_to_csv(rows: &[StepRow]) -> String {
    let mut out = String::from("epoch,step,lr,loss_q,loss_s,loss_total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.step, r.lr, r.loss_q, r.loss_s, r.loss_total
        ));
    }
    out
}

/// Train on the fold's train classes. Deterministic in (lib, split,
/// cfg): episode gradients are computed in parallel but accumulated in
/// episode order.
pub fn train(
    lib: &ClassLibrary,
    split: &FoldSplit,
    cfg: &Config,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let spe = steps_per_epoch(cfg);
    let max_iter = cfg.epochs * spe;
    let mut params = ModelParams::init(cfg, cfg.seed);
    let mut last_good = params.clone();
    let mut log = Vec::with_capacity(max_iter);
    let mut val = Vec::with_capacity(cfg.epochs);
    let episode_salt = derive_seed(cfg.seed, 0xB47C);

    for epoch in 0..cfg.epochs {
        let tr = trainability(cfg, epoch);
        for step in 0..spe {
            let iter = epoch * spe + step;
            let lr = poly_lr(cfg, iter, max_iter);
            let seeds: Vec<u64> = (0..cfg.batch)
                .map(|slot| derive_seed(episode_salt, (iter * cfg.batch + slot) as u64))
                .collect();

            let results: Vec<Result<(Vec<f64>, f64, f64, f64)>> = seeds
                .par_iter()
                .map(|&s| {
                    let ep = lib.sample_episode(split, Phase::Train, cfg.shots, s)?;
                    let mut tape = GradTape::new();
                    let bound = bind_model(&mut tape, &params, &tr);
                    let mut pins = PinSession::off();
                    let el = episode_loss(&mut tape, &bound, cfg, &ep, &mut pins)?;
                    let total = tape.value(el.total).data[0];
                    tape.backward(el.total)?;
                    Ok((bound.flat_grad(&tape), el.loss_q, el.loss_s, total))
                })
                .collect();

            let mut grad = vec![0.0; params.flat_len()];
            let (mut lq, mut ls, mut lt) = (0.0, 0.0, 0.0);
            for r in results {
                match r {
                    Ok((g, q, s, t)) => {
                        for (acc, v) in grad.iter_mut().zip(&g) {
                            *acc += v;
                        }
                        lq += q;
                        ls += s;
                        lt += t;
                    }
                    Err(e) => {
                        if let Some(dir) = out_dir {
                            let ckpt = dir.join("model.ckpt");
                            last_good.save_checkpoint(&ckpt)?;
                            warn!(
                                "aborting at epoch {epoch} step {step}: {e}; \
                                 last-good checkpoint written to {}",
                                ckpt.display()
                            );
                        }
                        return Err(e);
                    }
                }
            }
            let inv = 1.0 / cfg.batch as f64;
            for g in grad.iter_mut() {
                *g *= inv;
            }
            if cfg.clip > 0.0 {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > cfg.clip {
                    let scale = cfg.clip / norm;
                    for g in grad.iter_mut() {
                        *g *= scale;
                    }
                }
            }
            // This step's losses were finite, so the pre-update state is
            // the last known-good one.
            last_good = params.clone();
            params.add_scaled(&grad, -lr);
            log.push(StepRow {
                epoch,
                step,
                lr,
                loss_q: lq * inv,
                loss_s: ls * inv,
                loss_total: lt * inv,
            });
        }

        let report = evaluate(
            lib,
            split,
            &params,
            cfg,
            Phase::Test,
            VAL_EPISODES,
            cfg.shots,
            derive_seed(cfg.seed, 0x7A11),
        )?;
        info!("epoch {epoch}: val mIoU {:.4}", report.miou);
        val.push((epoch, report.miou));
    }

    if let Some(dir) = out_dir {
        fs::write(dir.join("log.csv"), log_to_csv(&log))?;
        let mut vcsv = String::from("epoch,miou\n");
        for (e, m) in &val {
            vcsv.push_str(&format!("{e},{m}\n"));
        }
        fs::write(dir.join("val.csv"), vcsv)?;
        fs::write(dir.join("config.txt"), cfg.serialize())?;
        params.save_checkpoint(&dir.join("model.ckpt"))?;
        let mut f = fs::File::create(dir.join("fingerprint.txt"))?;
        writeln!(f, "{}", cfg.fingerprint(cfg.seed))?;
    }

    Ok(TrainOutcome { params, log, val })
}

// ── End-to-end gradient check ────────────────────────────────────────

#[derive(Debug)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (group, scalars checked, worst relative error in group)
    pub per_group: Vec<(&'static str, usize, f64)>,
}

/// Shrink an episode to `side`x`side` (bilinear images, nearest masks).
pub fn shrink_episode(ep: &Episode, side: usize) -> Episode {
    let shrink_pair = |img: &Tensor, mask: &Tensor| {
        (resize_bilinear(img, side, side), resize_nearest(mask, side, side))
    };
    Episode {
        support: ep.support.iter().map(|(i, m)| shrink_pair(i, m)).collect(),
        query_image: resize_bilinear(&ep.query_image, side, side),
        query_mask: resize_nearest(&ep.query_mask, side, side),
        class_id: ep.class_id,
    }
}

fn episode_for_gradcheck(lib: &ClassLibrary, split: &FoldSplit, cfg: &Config) -> Result<Episode> {
    // Find a seed whose shrunken masks stay usable at feature resolution.
    for attempt in 0..64 {
        let seed = derive_seed(cfg.seed, 0x6C0 + attempt);
        let ep = lib.sample_episode(split, Phase::Train, cfg.shots, seed)?;
        let small = shrink_episode(&ep, 32);
        let ok = small
            .support
            .iter()
            .map(|(_, m)| m)
            .chain(std::iter::once(&small.query_mask))
            .all(|m| {
                let coarse = resize_nearest(m, 8, 8);
                coarse.data.iter().sum::<f64>() >= 1.0 && m.data.iter().sum::<f64>() >= 1.0
            });
        if ok {
            return Ok(small);
        }
    }
    Err(Error::DegenerateGeometry { class_id: 0 })
}

/// Central-difference check of the total episodic loss over sampled
/// parameters spanning all four groups. SAM maps and foreground
/// selections are pinned from the reference forward, so the differences
/// probe exactly the stop-gradient loss the tape differentiates.
pub fn gradcheck_pipeline(cfg: &Config, n_params: usize) -> Result<GradcheckReport> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let lib = ClassLibrary::build(12, derive_seed(cfg.seed, 0x11B));
    let split = crate::synth::fold_split(12, 0);
    let ep = episode_for_gradcheck(&lib, &split, cfg)?;
    let params = ModelParams::init(cfg, derive_seed(cfg.seed, 0x9A7));

    // Reference forward: record pins, take the analytic gradient.
    let mut pins = PinSession::recording();
    let analytic = {
        let mut tape = GradTape::new();
        let bound = bind_model(&mut tape, &params, &Trainability::all());
        let el = episode_loss(&mut tape, &bound, cfg, &ep, &mut pins)?;
        tape.backward(el.total)?;
        bound.flat_grad(&tape)
    };
    pins.start_replay();

    // Sample indices: at least one per parameter group, the rest uniform.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5A3));
    let ranges = params.group_ranges();
    let mut indices: Vec<usize> = Vec::new();
    for (_, r) in &ranges {
        indices.push(r.start + (derive_seed(cfg.seed, r.start as u64) as usize) % r.len());
    }
    let mut pool: Vec<usize> = (0..params.flat_len()).collect();
    pool.shuffle(&mut rng);
    for idx in pool {
        if indices.len() >= n_params.max(PARAM_GROUPS.len()) {
            break;
        }
        if !indices.contains(&idx) {
            indices.push(idx);
        }
    }

    let mut probe = params.clone();
    let h = crate::gradcheck::DEFAULT_FD_STEP;
    let eval_loss = |p: &ModelParams, pins: &mut PinSession| -> Result<f64> {
        pins.rewind();
        let mut tape = GradTape::new();
        let bound = bind_model(&mut tape, p, &Trainability::all());
        let el = episode_loss(&mut tape, &bound, cfg, &ep, pins)?;
        let v = tape.value(el.total).data[0];
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok(v)
    };

    let mut max_err = 0.0f64;
    let mut group_stats: Vec<(&'static str, usize, f64)> =
        PARAM_GROUPS.iter().map(|g| (*g, 0usize, 0.0f64)).collect();
    for &idx in &indices {
        let orig = params.get_scalar(idx);
        probe.set_scalar(idx, orig + h);
        let fp = eval_loss(&probe, &mut pins)?;
        probe.set_scalar(idx, orig - h);
        let fm = eval_loss(&probe, &mut pins)?;
        probe.set_scalar(idx, orig);
        let fd = (fp - fm) / (2.0 * h);
        let err = rel_err(fd, analytic[idx]);
        max_err = max_err.max(err);
        let group = params.group_of(idx);
        let slot = group_stats.iter_mut().find(|(g, _, _)| *g == group).unwrap();
        slot.1 += 1;
        slot.2 = slot.2.max(err);
    }

    Ok(GradcheckReport { max_rel_err: max_err, checked: indices.len(), per_group: group_stats })
}

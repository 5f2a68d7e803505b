//! Metrics and the test-episode evaluation protocol.
//!
//! Per-class IoU accumulates intersections and unions across all
//! episodes of that class before dividing; mIoU is the unweighted mean
//! over classes. FB-IoU ignores classes and averages the accumulated
//! foreground and background IoU.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{bind_model, ModelParams, Trainability};
use crate::pipeline::{forward_episode, PinSession};
use crate::synth::{derive_seed, ClassLibrary, FoldSplit, Phase};
use crate::tape::GradTape;
use crate::tensor::Tensor;

/// Intersection over union of two binary masks. Both empty: 1;
/// exactly one empty: 0.
pub fn iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape != gt.shape {
        return Err(Error::ShapeMismatch {
            op: "iou",
            detail: format!("{:?} vs {:?}", pred.shape, gt.shape),
        });
    }
    let (inter, union) = mask_counts(pred, gt);
    Ok(ratio(inter, union))
}

fn ratio(inter: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn mask_counts(pred: &Tensor, gt: &Tensor) -> (u64, u64) {
    let mut inter = 0;
    let mut union = 0;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let p = p > 0.5;
        let g = g > 0.5;
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    (inter, union)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// class id -> (accumulated IoU, episode count)
    pub per_class: BTreeMap<usize, (f64, usize)>,
    pub miou: f64,
    pub fb_iou: f64,
    pub episodes: usize,
    /// Hash of config + seed identifying this evaluation.
    pub fingerprint: String,
}

struct EpisodeCounts {
    class_id: usize,
    inter: u64,
    union: u64,
    bg_inter: u64,
    bg_union: u64,
}

/// Prediction for one episode: forward the query branch, threshold at
/// one half.
pub fn predict_episode(
    params: &ModelParams,
    cfg: &Config,
    ep: &crate::synth::Episode,
) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let frozen = Trainability {
        encoder_stage: [false; 3],
        ffm: false,
        kgen: false,
        decoder: false,
    };
    let bound = bind_model(&mut tape, params, &frozen);
    let mut pins = PinSession::off();
    let (out, _, _) = forward_episode(&mut tape, &bound, cfg, ep, &mut pins)?;
    let prob = tape.value(out.pred_full);
    Ok(Tensor::new(
        prob.shape.clone(),
        prob.data.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
    ))
}

/// Evaluate over `n_episodes` sampled episodes. Deterministic in
/// (params, split, phase, k, seed); episodes run in parallel, the
/// reduction folds in episode order.
pub fn evaluate(
    lib: &ClassLibrary,
    split: &FoldSplit,
    params: &ModelParams,
    cfg: &Config,
    phase: Phase,
    n_episodes: usize,
    k: usize,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_with(lib, split, params, cfg, phase, n_episodes, k, seed, |_, _, _| {})
}

/// Same as [`evaluate`] with a per-episode callback (episode index,
/// episode, thresholded prediction) for mask dumping.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_with(
    lib: &ClassLibrary,
    split: &FoldSplit,
    params: &ModelParams,
    cfg: &Config,
    phase: Phase,
    n_episodes: usize,
    k: usize,
    seed: u64,
    on_episode: impl FnMut(usize, &crate::synth::Episode, &Tensor),
) -> Result<EvalReport> {
    evaluate_with_predictor(
        lib,
        split,
        cfg,
        phase,
        n_episodes,
        k,
        seed,
        |ep| predict_episode(params, cfg, ep),
        on_episode,
    )
}

/// Evaluation core over an arbitrary (thresholded binary) predictor;
/// the oracle predictor `|ep| Ok(ep.query_mask.clone())` must score
/// mIoU = FB-IoU = 1.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_with_predictor<P>(
    lib: &ClassLibrary,
    split: &FoldSplit,
    cfg: &Config,
    phase: Phase,
    n_episodes: usize,
    k: usize,
    seed: u64,
    predict: P,
    mut on_episode: impl FnMut(usize, &crate::synth::Episode, &Tensor),
) -> Result<EvalReport>
where
    P: Fn(&crate::synth::Episode) -> Result<Tensor> + Sync,
{
    let results: Vec<Result<(EpisodeCounts, crate::synth::Episode, Tensor)>> = (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            let ep = lib.sample_episode(split, phase, k, derive_seed(seed, i as u64))?;
            let pred = predict(&ep)?;
            let (inter, union) = mask_counts(&pred, &ep.query_mask);
            let inv_pred = invert(&pred);
            let inv_gt = invert(&ep.query_mask);
            let (bg_inter, bg_union) = mask_counts(&inv_pred, &inv_gt);
            let counts =
                EpisodeCounts { class_id: ep.class_id, inter, union, bg_inter, bg_union };
            Ok((counts, ep, pred))
        })
        .collect();

    let mut acc: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    let (mut fg_i, mut fg_u, mut bg_i, mut bg_u) = (0u64, 0u64, 0u64, 0u64);
    let mut class_eps: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, r) in results.into_iter().enumerate() {
        let (c, ep, pred) = r?;
        let e = acc.entry(c.class_id).or_insert((0, 0));
        e.0 += c.inter;
        e.1 += c.union;
        *class_eps.entry(c.class_id).or_insert(0) += 1;
        fg_i += c.inter;
        fg_u += c.union;
        bg_i += c.bg_inter;
        bg_u += c.bg_union;
        on_episode(i, &ep, &pred);
    }

    let per_class: BTreeMap<usize, (f64, usize)> = acc
        .iter()
        .map(|(&cid, &(i, u))| (cid, (ratio(i, u), class_eps[&cid])))
        .collect();
    let miou = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().map(|(v, _)| v).sum::<f64>() / per_class.len() as f64
    };
    let fb_iou = (ratio(fg_i, fg_u) + ratio(bg_i, bg_u)) / 2.0;
    Ok(EvalReport {
        per_class,
        miou,
        fb_iou,
        episodes: n_episodes,
        fingerprint: cfg.fingerprint(seed),
    })
}

fn invert(mask: &Tensor) -> Tensor {
    Tensor::new(
        mask.shape.clone(),
        mask.data.iter().map(|&v| if v > 0.5 { 0.0 } else { 1.0 }).collect(),
    )
}

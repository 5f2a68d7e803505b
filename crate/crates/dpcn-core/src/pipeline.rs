//! Pipeline wiring: encode, support activation, feature filtering,
//! dynamic convolution, decode — for both loss directions.
//!
//! The support-mask input is either episode data (hard binary mask) or
//! a predicted soft mask node from the query pass; the latter keeps the
//! support loss differentiable end to end.
//!
//! SAM outputs and foreground selections are data-dependent constants
//! (stop-gradient / discrete selection). [`PinSession`] can record them
//! on a reference forward and replay them on later evaluations so
//! finite differences see exactly the function the tape differentiates.

use log::warn;

use crate::config::Config;
use crate::dcm;
use crate::decoder::decode;
use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::ffm;
use crate::model::BoundModel;
use crate::sam::{run_sam, ActivationSet};
use crate::synth::Episode;
use crate::tape::{GradTape, ValId};
use crate::tensor::{resize_nearest, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PinMode {
    Off,
    Record,
    Replay,
}

/// Recorded stop-gradient artifacts of one episode forward.
#[derive(Default)]
pub struct PinSession {
    mode: PinMode,
    sam: Vec<ActivationSet>,
    fg: Vec<Vec<usize>>,
    sam_cursor: usize,
    fg_cursor: usize,
}

impl Default for PinMode {
    fn default() -> Self {
        PinMode::Off
    }
}

impl PinSession {
    pub fn off() -> Self {
        PinSession { mode: PinMode::Off, ..Default::default() }
    }

    pub fn recording() -> Self {
        PinSession { mode: PinMode::Record, ..Default::default() }
    }

    /// Switch to replay and reset the cursors.
    pub fn start_replay(&mut self) {
        self.mode = PinMode::Replay;
        self.rewind();
    }

    pub fn rewind(&mut self) {
        self.sam_cursor = 0;
        self.fg_cursor = 0;
    }

    fn next_sam(&mut self, compute: impl FnOnce() -> Result<ActivationSet>) -> Result<ActivationSet> {
        match self.mode {
            PinMode::Off => compute(),
            PinMode::Record => {
                let set = compute()?;
                self.sam.push(set.clone());
                Ok(set)
            }
            PinMode::Replay => {
                let set = self.sam.get(self.sam_cursor).expect("pinned SAM entry").clone();
                self.sam_cursor += 1;
                Ok(set)
            }
        }
    }

    fn next_fg(&mut self, compute: impl FnOnce() -> Vec<usize>) -> Vec<usize> {
        match self.mode {
            PinMode::Off => compute(),
            PinMode::Record => {
                let pos = compute();
                self.fg.push(pos.clone());
                pos
            }
            PinMode::Replay => {
                let pos = self.fg.get(self.fg_cursor).expect("pinned selection entry").clone();
                self.fg_cursor += 1;
                pos
            }
        }
    }
}

/// A support mask at image resolution: episode data or a predicted
/// soft-mask node.
pub enum MaskSource {
    Data(Tensor),
    Node(ValId),
}

#[derive(Debug, Clone, Copy)]
pub struct EncodedImage {
    pub mid: ValId,
    pub high: ValId,
}

pub fn encode_image(tape: &mut GradTape, bound: &BoundModel, image: &Tensor) -> Result<EncodedImage> {
    let img = tape.constant(image.clone());
    let (mid, high) = encode(tape, &bound.enc, img)?;
    Ok(EncodedImage { mid, high })
}

/// Everything one direction of the pipeline produces.
pub struct BranchOutput {
    /// Probability map at feature resolution.
    pub pred_feat: ValId,
    /// Bilinear upsample to mask resolution.
    pub pred_full: ValId,
    pub activation: Option<ActivationSet>,
    pub m_pse_r: Option<ValId>,
    pub x_out: ValId,
    /// Foreground vector count when the dynamic module ran.
    pub n_fg: Option<usize>,
    pub per_shot_fg: Vec<usize>,
}

fn average_sets(sets: &[ActivationSet]) -> ActivationSet {
    if sets.len() == 1 {
        return sets[0].clone();
    }
    let shape = sets[0].maps[0].shape.clone();
    let n = sets[0].maps[0].numel();
    let inv = 1.0 / sets.len() as f64;
    let maps: [Tensor; 3] = std::array::from_fn(|i| {
        let mut acc = vec![0.0; n];
        for set in sets {
            for (a, v) in acc.iter_mut().zip(&set.maps[i].data) {
                *a += v;
            }
        }
        Tensor::new(shape.clone(), acc.iter().map(|v| v * inv).collect())
    });
    let mut m_pse0 = Tensor::zeros(shape);
    for map in &maps {
        for (acc, v) in m_pse0.data.iter_mut().zip(&map.data) {
            *acc += v;
        }
    }
    for v in m_pse0.data.iter_mut() {
        *v /= 3.0;
    }
    ActivationSet { maps, m_pse0 }
}

/// One direction of the pipeline over already-encoded features.
pub fn forward_branch(
    tape: &mut GradTape,
    bound: &BoundModel,
    cfg: &Config,
    support: &[(EncodedImage, MaskSource)],
    query: &EncodedImage,
    out_hw: (usize, usize),
    pins: &mut PinSession,
) -> Result<BranchOutput> {
    assert!(!support.is_empty());
    let (_, hf, wf) = tape.value(query.mid).dims3();

    // Per-shot masks: image-resolution value for SAM, feature-resolution
    // node for pooling and extraction.
    let mut shot_masks: Vec<(Tensor, ValId)> = Vec::with_capacity(support.len());
    for (_, source) in support {
        match source {
            MaskSource::Data(m) => {
                let feat = tape.constant(resize_nearest(m, hf, wf));
                shot_masks.push((m.clone(), feat));
            }
            MaskSource::Node(id) => {
                let img_value = tape.value(*id).clone();
                let feat = tape.resize_nearest(*id, hf, wf);
                shot_masks.push((img_value, feat));
            }
        }
    }

    // Support activation: a fixed prior, averaged over shots.
    let activation = if cfg.sam_enabled {
        let high_q = tape.value(query.high).clone();
        let highs: Vec<Tensor> =
            support.iter().map(|(enc, _)| tape.value(enc.high).clone()).collect();
        let set = pins.next_sam(|| {
            let mut sets = Vec::with_capacity(highs.len());
            for (high_s, (mask_img, _)) in highs.iter().zip(&shot_masks) {
                sets.push(run_sam(high_s, mask_img, &high_q)?);
            }
            Ok(average_sets(&sets))
        })?;
        Some(set)
    } else {
        None
    };

    // Prototype: mean of per-shot masked average pools.
    let mut proto_sum = None;
    for ((enc, _), (_, feat_mask)) in support.iter().zip(&shot_masks) {
        let p = ffm::support_prototype(tape, enc.mid, *feat_mask)?;
        proto_sum = Some(match proto_sum {
            None => p,
            Some(acc) => tape.add(acc, p)?,
        });
    }
    let prototype = tape.scale(proto_sum.unwrap(), 1.0 / support.len() as f64);

    // Feature filtering.
    let m_pse0 = match &activation {
        Some(act) => act.m_pse0.clone(),
        // Uninformative prior when the activation module is off.
        None => Tensor::full(vec![hf, wf], 0.5),
    };
    let (x_q_filtered, m_pse_r) = if cfg.ffm_enabled {
        let m0 = tape.constant(m_pse0);
        let m_r = ffm::refine_pseudo_mask(tape, query.mid, m0, prototype, &bound.ffm)?;
        let filtered = ffm::filter_query(tape, query.mid, m_r)?;
        (filtered, Some(m_r))
    } else {
        (query.mid, None)
    };

    // Dynamic convolution.
    let (dynamic, n_fg, per_shot_fg) = if cfg.dcm_enabled() {
        let mut shots = Vec::with_capacity(support.len());
        for ((enc, _), (_, feat_mask)) in support.iter().zip(&shot_masks) {
            let positions = pins.next_fg(|| tape.fg_positions(*feat_mask));
            shots.push(dcm::extract_foreground(tape, enc.mid, *feat_mask, Some(positions))?);
        }
        let merged = dcm::merge_shots(tape, &shots)?;
        let (p_s, p_s2) =
            dcm::pool_prototypes(tape, &merged, cfg.kernel_size, cfg.pool_variant)?;
        let kernels =
            dcm::generate_kernels(tape, p_s, p_s2, &bound.kgen, cfg.kernel_size, cfg.kernels)?;
        let feats = dcm::enhance_query(tape, x_q_filtered, &kernels)?;
        let per_shot = merged.per_shot.clone();
        (feats, Some(merged.count()), per_shot)
    } else {
        (Vec::new(), None, Vec::new())
    };

    let x_out = dcm::assemble_xout(
        tape,
        &dynamic,
        x_q_filtered,
        prototype,
        activation.as_ref(),
        m_pse_r,
    )?;
    let pred_feat = decode(tape, &bound.dec, x_out)?;
    let pred_full = tape.resize_bilinear(pred_feat, out_hw.0, out_hw.1);
    Ok(BranchOutput { pred_feat, pred_full, activation, m_pse_r, x_out, n_fg, per_shot_fg })
}

/// Encode an episode and run the support->query direction.
pub fn forward_episode(
    tape: &mut GradTape,
    bound: &BoundModel,
    cfg: &Config,
    ep: &Episode,
    pins: &mut PinSession,
) -> Result<(BranchOutput, Vec<EncodedImage>, EncodedImage)> {
    let mut support_enc = Vec::with_capacity(ep.support.len());
    let mut pairs = Vec::with_capacity(ep.support.len());
    for (img, mask) in &ep.support {
        let enc = encode_image(tape, bound, img)?;
        support_enc.push(enc);
        pairs.push((enc, MaskSource::Data(mask.clone())));
    }
    let query_enc = encode_image(tape, bound, &ep.query_image)?;
    let (h, w) = ep.query_mask.dims2();
    let out = forward_branch(tape, bound, cfg, &pairs, &query_enc, (h, w), pins)?;
    Ok((out, support_enc, query_enc))
}

/// Scalar losses of one episode (total is on the tape).
pub struct EpisodeLoss {
    pub total: ValId,
    pub loss_q: f64,
    pub loss_s: f64,
    pub skipped_shots: usize,
    pub query: BranchOutput,
}

/// Dual-direction episodic loss: query BCE plus lambda times the
/// support BCE, where each support image is predicted in turn using the
/// (soft, differentiable) predicted query mask as its support
/// annotation. A collapsed predicted mask skips that shot's term.
pub fn episode_loss(
    tape: &mut GradTape,
    bound: &BoundModel,
    cfg: &Config,
    ep: &Episode,
    pins: &mut PinSession,
) -> Result<EpisodeLoss> {
    let (query_out, support_enc, query_enc) = forward_episode(tape, bound, cfg, ep, pins)?;
    let loss_q = tape.bce_mean(query_out.pred_full, &ep.query_mask)?;
    let loss_q_val = tape.value(loss_q).data[0];

    if cfg.lambda == 0.0 {
        return Ok(EpisodeLoss {
            total: loss_q,
            loss_q: loss_q_val,
            loss_s: 0.0,
            skipped_shots: 0,
            query: query_out,
        });
    }

    let mut shot_losses = Vec::with_capacity(ep.support.len());
    let mut skipped = 0;
    for (i, (_, s_mask)) in ep.support.iter().enumerate() {
        let swapped = [(query_enc, MaskSource::Node(query_out.pred_full))];
        let (h, w) = s_mask.dims2();
        match forward_branch(tape, bound, cfg, &swapped, &support_enc[i], (h, w), pins) {
            Ok(branch) => shot_losses.push(tape.bce_mean(branch.pred_full, s_mask)?),
            Err(Error::EmptyForeground) | Err(Error::EmptyMask) => {
                warn!("support pass for shot {i} collapsed; skipping its loss term");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }

    let (total, loss_s_val) = if shot_losses.is_empty() {
        (loss_q, 0.0)
    } else {
        let mut sum = shot_losses[0];
        for &l in &shot_losses[1..] {
            sum = tape.add(sum, l)?;
        }
        let mean = tape.scale(sum, 1.0 / shot_losses.len() as f64);
        let weighted = tape.scale(mean, cfg.lambda);
        (tape.add(loss_q, weighted)?, tape.value(mean).data[0])
    };

    Ok(EpisodeLoss {
        total,
        loss_q: loss_q_val,
        loss_s: loss_s_val,
        skipped_shots: skipped,
        query: query_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Config, KernelSet, MID_CHANNELS};
    use crate::model::{bind_model, ModelParams, Trainability};
    use crate::synth::{fold_split, ClassLibrary, Phase};

    fn setup() -> (ClassLibrary, Episode) {
        let lib = ClassLibrary::build(12, 7);
        let split = fold_split(12, 0);
        let ep = lib.sample_episode(&split, Phase::Train, 1, 11).unwrap();
        (lib, ep)
    }

    fn forward_with(cfg: &Config, ep: &Episode) -> (GradTape, BranchOutput) {
        let params = ModelParams::init(cfg, 3);
        let mut tape = GradTape::new();
        let bound = bind_model(&mut tape, &params, &Trainability::all());
        let mut pins = PinSession::off();
        let (out, _, _) = forward_episode(&mut tape, &bound, cfg, ep, &mut pins).unwrap();
        (tape, out)
    }

    #[test]
    fn full_config_produces_4c4_xout_and_mask_shaped_output() {
        let (_, ep) = setup();
        let cfg = Config::default();
        let (tape, out) = forward_with(&cfg, &ep);
        assert_eq!(tape.shape(out.x_out)[0], 4 * MID_CHANNELS + 4);
        assert_eq!(tape.shape(out.pred_full), &ep.query_mask.shape[..]);
        assert!(tape.value(out.pred_full).data.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(out.n_fg.unwrap() >= 1);
    }

    #[test]
    fn baseline_mode_is_query_plus_prototype() {
        let (_, ep) = setup();
        let mut cfg = Config::default();
        cfg.sam_enabled = false;
        cfg.ffm_enabled = false;
        cfg.kernels = KernelSet::NONE;
        let (tape, out) = forward_with(&cfg, &ep);
        assert_eq!(tape.shape(out.x_out)[0], 2 * MID_CHANNELS);
        assert!(out.activation.is_none());
        assert!(out.m_pse_r.is_none());
        assert!(out.n_fg.is_none());
    }

    #[test]
    fn each_single_module_runs() {
        let (_, ep) = setup();
        for (sam, ffm_on, kernels) in [
            (true, false, KernelSet::NONE),
            (false, true, KernelSet::NONE),
            (false, false, KernelSet::ALL),
            (true, true, KernelSet::NONE),
        ] {
            let mut cfg = Config::default();
            cfg.sam_enabled = sam;
            cfg.ffm_enabled = ffm_on;
            cfg.kernels = kernels;
            let (tape, out) = forward_with(&cfg, &ep);
            assert_eq!(tape.shape(out.x_out)[0], cfg.xout_channels());
        }
    }

    #[test]
    fn lambda_zero_total_equals_query_loss_exactly() {
        let (_, ep) = setup();
        let mut cfg = Config::default();
        cfg.lambda = 0.0;
        let params = ModelParams::init(&cfg, 3);
        let mut tape = GradTape::new();
        let bound = bind_model(&mut tape, &params, &Trainability::all());
        let mut pins = PinSession::off();
        let el = episode_loss(&mut tape, &bound, &cfg, &ep, &mut pins).unwrap();
        assert_eq!(el.loss_s, 0.0);
        assert_eq!(tape.value(el.total).data[0], el.loss_q);
    }

    #[test]
    fn total_is_query_plus_lambda_support() {
        let (_, ep) = setup();
        let mut cfg = Config::default();
        cfg.lambda = 0.7;
        let params = ModelParams::init(&cfg, 3);
        let mut tape = GradTape::new();
        let bound = bind_model(&mut tape, &params, &Trainability::all());
        let mut pins = PinSession::off();
        let el = episode_loss(&mut tape, &bound, &cfg, &ep, &mut pins).unwrap();
        let total = tape.value(el.total).data[0];
        assert!((total - (el.loss_q + 0.7 * el.loss_s)).abs() < 1e-12);
        assert_eq!(el.skipped_shots, 0);
    }

    #[test]
    fn five_shot_counts_are_additive() {
        let lib = ClassLibrary::build(12, 7);
        let split = fold_split(12, 0);
        let ep = lib.sample_episode(&split, Phase::Train, 5, 21).unwrap();
        let mut cfg = Config::default();
        cfg.shots = 5;
        let (_, out) = forward_with(&cfg, &ep);
        assert_eq!(out.per_shot_fg.len(), 5);
        assert_eq!(out.per_shot_fg.iter().sum::<usize>(), out.n_fg.unwrap());
        assert!(out.per_shot_fg.iter().all(|&n| n >= 1));
    }

    #[test]
    fn duplicated_support_repeats_foreground_rows() {
        let lib = ClassLibrary::build(12, 7);
        let split = fold_split(12, 0);
        let single = lib.sample_episode(&split, Phase::Train, 1, 31).unwrap();
        let mut dup = single.clone();
        for _ in 0..4 {
            dup.support.push(single.support[0].clone());
        }
        let cfg = Config::default();
        let (_, out1) = forward_with(&cfg, &single);
        let (_, out5) = forward_with(&cfg, &dup);
        let n1 = out1.n_fg.unwrap();
        assert_eq!(out5.n_fg.unwrap(), 5 * n1);
        assert_eq!(out5.per_shot_fg, vec![n1; 5]);
    }

    #[test]
    fn pinned_replay_reproduces_the_loss() {
        let (_, ep) = setup();
        let cfg = Config::default();
        let params = ModelParams::init(&cfg, 4);
        let mut pins = PinSession::recording();
        let reference = {
            let mut tape = GradTape::new();
            let bound = bind_model(&mut tape, &params, &Trainability::all());
            let el = episode_loss(&mut tape, &bound, &cfg, &ep, &mut pins).unwrap();
            tape.value(el.total).data[0]
        };
        pins.start_replay();
        let replayed = {
            let mut tape = GradTape::new();
            let bound = bind_model(&mut tape, &params, &Trainability::all());
            let el = episode_loss(&mut tape, &bound, &cfg, &ep, &mut pins).unwrap();
            tape.value(el.total).data[0]
        };
        assert_eq!(reference, replayed);
    }
}

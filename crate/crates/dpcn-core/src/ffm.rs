//! Feature filtering: support prototype extraction, pseudo-mask
//! refinement, and background suppression of the query feature.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::MID_CHANNELS;
use crate::error::Result;
use crate::tape::{GradTape, ValId};
use crate::tensor::{he_uniform, Tensor};

/// Single 3x3 conv C -> 1 producing the refined mask logit.
#[derive(Debug, Clone, PartialEq)]
pub struct FfmParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl FfmParams {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = MID_CHANNELS;
        FfmParams { w: he_uniform(vec![1, c, 3, 3], c * 9, &mut rng), b: Tensor::zeros(vec![1]) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundFfm {
    pub w: ValId,
    pub b: ValId,
}

pub fn bind_ffm(tape: &mut GradTape, params: &FfmParams, trainable: bool) -> BoundFfm {
    let mut w = params.w.clone();
    let mut b = params.b.clone();
    w.requires_grad = trainable;
    b.requires_grad = trainable;
    BoundFfm { w: tape.leaf(w), b: tape.leaf(b) }
}

/// Masked average pooling of the support feature: the prototype vector.
pub fn support_prototype(tape: &mut GradTape, x_s: ValId, m_s: ValId) -> Result<ValId> {
    tape.masked_avg_pool(x_s, m_s)
}

/// sigmoid(conv3x3((x_q ⊗ m_pse0) ⊕ x_p)): the refined pseudo mask.
/// `m_pse0` enters as a stop-gradient input per the SAM contract.
pub fn refine_pseudo_mask(
    tape: &mut GradTape,
    x_q: ValId,
    m_pse0: ValId,
    prototype: ValId,
    ffm: &BoundFfm,
) -> Result<ValId> {
    let gated = tape.mul(x_q, m_pse0)?;
    let fused = tape.add(gated, prototype)?;
    let logit = tape.conv2d(fused, ffm.w, ffm.b, 1)?;
    let (_, h, w) = tape.value(logit).dims3();
    let flat = tape.reshape(logit, vec![h, w])?;
    Ok(tape.sigmoid(flat))
}

/// (x_q ⊗ m) ⊕ x_q: per-position scaling by (1 + m).
pub fn filter_query(tape: &mut GradTape, x_q: ValId, m_pse_r: ValId) -> Result<ValId> {
    let gated = tape.mul(x_q, m_pse_r)?;
    tape.add(gated, x_q)
}

//! Shared-weight convolutional feature extractor.
//!
//! Three stages: 3->16 stride 2, 16->C stride 2, C->C_h dilation 2, each
//! followed by ReLU. For a 64x64 input the mid-level feature is Cx16x16
//! (after stage 2) and the high-level feature is C_hx16x16 (stage 3 is
//! dilated, not strided, so the resolutions match). Strides are realized
//! as same-padding convolution plus subsampling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{HIGH_CHANNELS, MID_CHANNELS};
use crate::error::Result;
use crate::tape::{GradTape, ValId};
use crate::tensor::{he_uniform, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvLayer {
    pub fn init(cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvLayer {
            w: he_uniform(vec![cout, cin, k, k], cin * k * k, rng),
            b: Tensor::zeros(vec![cout]),
        }
    }
}

/// Stage spec: (out channels, dilation, subsample stride).
pub const STAGES: [(usize, usize, usize); 3] =
    [(16, 1, 2), (MID_CHANNELS, 1, 2), (HIGH_CHANNELS, 2, 1)];

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub stages: [ConvLayer; 3],
}

impl EncoderParams {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let stages = STAGES.map(|(cout, _, _)| {
            let layer = ConvLayer::init(cout, cin, 3, &mut rng);
            cin = cout;
            layer
        });
        EncoderParams { stages }
    }
}

/// Tape ids of the bound encoder weights.
#[derive(Debug, Clone, Copy)]
pub struct BoundEncoder {
    pub stages: [(ValId, ValId); 3],
}

pub fn bind_encoder(
    tape: &mut GradTape,
    params: &EncoderParams,
    trainable: [bool; 3],
) -> BoundEncoder {
    let stages = std::array::from_fn(|i| {
        let mut w = params.stages[i].w.clone();
        let mut b = params.stages[i].b.clone();
        w.requires_grad = trainable[i];
        b.requires_grad = trainable[i];
        (tape.leaf(w), tape.leaf(b))
    });
    BoundEncoder { stages }
}

/// Run the backbone on one image. Pure in (image, params); support and
/// query images go through the same bound weights.
pub fn encode(tape: &mut GradTape, enc: &BoundEncoder, image: ValId) -> Result<(ValId, ValId)> {
    let mut x = image;
    let mut mid = image;
    for (i, (cout_dil_sub, (w, b))) in STAGES.iter().zip(enc.stages).enumerate() {
        let (_, dilation, sub) = *cout_dil_sub;
        let mut y = tape.conv2d(x, w, b, dilation)?;
        if sub > 1 {
            y = tape.subsample(y, sub)?;
        }
        x = tape.relu(y);
        if i == 1 {
            mid = x;
        }
    }
    Ok((mid, x))
}

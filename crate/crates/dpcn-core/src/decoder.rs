//! Decoder: 1x1 reduction, three-rate dilated pyramid, classifier head.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::MID_CHANNELS;
use crate::error::Result;
use crate::tape::{GradTape, ValId};
use crate::tensor::{he_uniform, Tensor};

pub const ASPP_DILATIONS: [usize; 3] = [1, 2, 4];

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// 1x1 conv (xout channels -> C) + ReLU.
    pub fconv_w: Tensor,
    pub fconv_b: Tensor,
    /// Three parallel 3x3 convs C -> C, dilations 1/2/4, no shared weights.
    pub aspp: [(Tensor, Tensor); 3],
    /// 1x1 fuse conv 3C -> C + ReLU.
    pub fuse_w: Tensor,
    pub fuse_b: Tensor,
    /// 3x3 classifier conv C -> 1 + sigmoid.
    pub cls_w: Tensor,
    pub cls_b: Tensor,
}

impl DecoderParams {
    pub fn init(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = MID_CHANNELS;
        DecoderParams {
            fconv_w: he_uniform(vec![c, in_channels, 1, 1], in_channels, &mut rng),
            fconv_b: Tensor::zeros(vec![c]),
            aspp: std::array::from_fn(|_| {
                (he_uniform(vec![c, c, 3, 3], c * 9, &mut rng), Tensor::zeros(vec![c]))
            }),
            fuse_w: he_uniform(vec![c, 3 * c, 1, 1], 3 * c, &mut rng),
            fuse_b: Tensor::zeros(vec![c]),
            cls_w: he_uniform(vec![1, c, 3, 3], c * 9, &mut rng),
            cls_b: Tensor::zeros(vec![1]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.fconv_w.shape[1]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDecoder {
    pub fconv: (ValId, ValId),
    pub aspp: [(ValId, ValId); 3],
    pub fuse: (ValId, ValId),
    pub cls: (ValId, ValId),
}

pub fn bind_decoder(tape: &mut GradTape, params: &DecoderParams, trainable: bool) -> BoundDecoder {
    let mut bind = |t: &Tensor| {
        let mut t = t.clone();
        t.requires_grad = trainable;
        tape.leaf(t)
    };
    BoundDecoder {
        fconv: (bind(&params.fconv_w), bind(&params.fconv_b)),
        aspp: std::array::from_fn(|i| (bind(&params.aspp[i].0), bind(&params.aspp[i].1))),
        fuse: (bind(&params.fuse_w), bind(&params.fuse_b)),
        cls: (bind(&params.cls_w), bind(&params.cls_b)),
    }
}

/// x_out -> probability map at feature resolution, strictly in (0,1).
pub fn decode(tape: &mut GradTape, dec: &BoundDecoder, x_out: ValId) -> Result<ValId> {
    let reduced = tape.conv2d(x_out, dec.fconv.0, dec.fconv.1, 1)?;
    let reduced = tape.relu(reduced);
    let mut branches = Vec::with_capacity(3);
    for (i, dilation) in ASPP_DILATIONS.iter().enumerate() {
        branches.push(tape.conv2d(reduced, dec.aspp[i].0, dec.aspp[i].1, *dilation)?);
    }
    let stacked = tape.concat0(&branches)?;
    let fused = tape.conv2d(stacked, dec.fuse.0, dec.fuse.1, 1)?;
    let fused = tape.relu(fused);
    let logit = tape.conv2d(fused, dec.cls.0, dec.cls.1, 1)?;
    let (_, h, w) = tape.value(logit).dims3();
    let flat = tape.reshape(logit, vec![h, w])?;
    Ok(tape.sigmoid(flat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_params_give_half_everywhere() {
        let mut params = DecoderParams::init(10, 1);
        params.fconv_w = Tensor::zeros(params.fconv_w.shape.clone());
        for (w, _) in &mut params.aspp {
            *w = Tensor::zeros(w.shape.clone());
        }
        params.fuse_w = Tensor::zeros(params.fuse_w.shape.clone());
        params.cls_w = Tensor::zeros(params.cls_w.shape.clone());
        let mut tape = GradTape::new();
        let dec = bind_decoder(&mut tape, &params, false);
        let x = tape.leaf(rand_t(&[10, 6, 6], 2));
        let m = decode(&mut tape, &dec, x).unwrap();
        assert!(tape.value(m).data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn output_bounded_open_interval() {
        let params = DecoderParams::init(12, 3);
        let mut tape = GradTape::new();
        let dec = bind_decoder(&mut tape, &params, false);
        let x = tape.leaf(rand_t(&[12, 5, 7], 4));
        let m = decode(&mut tape, &dec, x).unwrap();
        assert_eq!(tape.shape(m), &[5, 7]);
        assert!(tape.value(m).data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn dilated_delta_kernels_are_identity() {
        // A centered delta in a 3x3 kernel is the identity for every
        // dilation; padding arithmetic must not shift anything.
        for dilation in [1usize, 2, 4] {
            let mut tape = GradTape::new();
            let x = tape.leaf(rand_t(&[1, 8, 8], 5));
            let mut wdata = vec![0.0; 9];
            wdata[4] = 1.0;
            let w = tape.leaf(Tensor::new(vec![1, 1, 3, 3], wdata));
            let b = tape.leaf(Tensor::zeros(vec![1]));
            let y = tape.conv2d(x, w, b, dilation).unwrap();
            assert_eq!(tape.value(y).data, tape.value(x).data, "dilation {dilation}");
        }
    }
}

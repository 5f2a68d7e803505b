//! Dynamic convolution: support foreground vectors, prototype pooling,
//! kernel generation, depthwise dynamic convolution, and the assembled
//! decoder input.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{KernelSet, PoolVariant, MID_CHANNELS};
use crate::error::{Error, Result};
use crate::sam::ActivationSet;
use crate::tape::{GradTape, ValId};
use crate::tensor::{he_uniform, Tensor};

/// Support foreground rows on the tape plus per-shot bookkeeping.
#[derive(Debug, Clone)]
pub struct ForegroundVectors {
    pub id: ValId,
    pub per_shot: Vec<usize>,
}

impl ForegroundVectors {
    pub fn count(&self) -> usize {
        self.per_shot.iter().sum()
    }
}

/// Two-layer 1D conv net (k=3, C -> C -> C, ReLU between).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl KernelNet {
    fn init(rng: &mut ChaCha8Rng) -> Self {
        let c = MID_CHANNELS;
        KernelNet {
            w1: he_uniform(vec![c, c, 3], c * 3, rng),
            b1: Tensor::zeros(vec![c]),
            w2: he_uniform(vec![c, c, 3], c * 3, rng),
            b2: Tensor::zeros(vec![c]),
        }
    }
}

/// The three generator nets; they share no parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGenParams {
    pub vertical: KernelNet,
    pub horizontal: KernelNet,
    pub square: KernelNet,
}

impl KernelGenParams {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KernelGenParams {
            vertical: KernelNet::init(&mut rng),
            horizontal: KernelNet::init(&mut rng),
            square: KernelNet::init(&mut rng),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundKernelNet {
    pub w1: ValId,
    pub b1: ValId,
    pub w2: ValId,
    pub b2: ValId,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundKernelGen {
    pub vertical: BoundKernelNet,
    pub horizontal: BoundKernelNet,
    pub square: BoundKernelNet,
}

fn bind_net(tape: &mut GradTape, net: &KernelNet, trainable: bool) -> BoundKernelNet {
    let mut bind = |t: &Tensor| {
        let mut t = t.clone();
        t.requires_grad = trainable;
        tape.leaf(t)
    };
    BoundKernelNet { w1: bind(&net.w1), b1: bind(&net.b1), w2: bind(&net.w2), b2: bind(&net.b2) }
}

pub fn bind_kernel_gen(
    tape: &mut GradTape,
    params: &KernelGenParams,
    trainable: bool,
) -> BoundKernelGen {
    BoundKernelGen {
        vertical: bind_net(tape, &params.vertical, trainable),
        horizontal: bind_net(tape, &params.horizontal, trainable),
        square: bind_net(tape, &params.square, trainable),
    }
}

/// Generated kernels present for this configuration.
#[derive(Debug, Clone, Copy)]
pub struct DynamicKernels {
    pub vertical: Option<ValId>,
    pub horizontal: Option<ValId>,
    pub square: Option<ValId>,
}

/// Rows of (x_s ⊗ m) where the mask is on, row-major scan order.
/// No learnable parameters; the gradient reaches the selected feature
/// columns (and the mask weights when the mask is a soft prediction).
/// `positions` overrides the selection when replaying pinned runs.
pub fn extract_foreground(
    tape: &mut GradTape,
    x_s: ValId,
    m_feat: ValId,
    positions: Option<Vec<usize>>,
) -> Result<ForegroundVectors> {
    let pos = positions.unwrap_or_else(|| tape.fg_positions(m_feat));
    let id = tape.extract_fg_at(x_s, m_feat, pos)?;
    let n = tape.shape(id)[0];
    Ok(ForegroundVectors { id, per_shot: vec![n] })
}

/// Concatenate per-shot foreground vectors in shot order.
pub fn merge_shots(tape: &mut GradTape, shots: &[ForegroundVectors]) -> Result<ForegroundVectors> {
    if shots.is_empty() {
        return Err(Error::EmptyForeground);
    }
    if shots.len() == 1 {
        return Ok(shots[0].clone());
    }
    let ids: Vec<ValId> = shots.iter().map(|s| s.id).collect();
    let id = tape.concat0(&ids)?;
    let per_shot = shots.iter().flat_map(|s| s.per_shot.iter().copied()).collect();
    Ok(ForegroundVectors { id, per_shot })
}

/// Pool the foreground rows into the two prototype groups.
pub fn pool_prototypes(
    tape: &mut GradTape,
    fg: &ForegroundVectors,
    s: usize,
    variant: PoolVariant,
) -> Result<(ValId, ValId)> {
    let p_s = tape.adaptive_pool1d(fg.id, s)?;
    let p_s2 = match variant {
        PoolVariant::Serial => tape.adaptive_pool1d(p_s, s * s)?,
        PoolVariant::Parallel => tape.adaptive_pool1d(fg.id, s * s)?,
    };
    Ok((p_s, p_s2))
}

fn apply_net(tape: &mut GradTape, net: &BoundKernelNet, x: ValId) -> Result<ValId> {
    let h1 = tape.conv1d(x, net.w1, net.b1)?;
    let h1 = tape.relu(h1);
    tape.conv1d(h1, net.w2, net.b2)
}

/// Run the enabled generator nets and reshape their outputs into
/// (S,1,C), (1,S,C) and (S,S,C) kernels. Raw weights, no normalization.
pub fn generate_kernels(
    tape: &mut GradTape,
    p_s: ValId,
    p_s2: ValId,
    gen: &BoundKernelGen,
    s: usize,
    which: KernelSet,
) -> Result<DynamicKernels> {
    let c = tape.shape(p_s)[1];
    let vertical = if which.v {
        let out = apply_net(tape, &gen.vertical, p_s)?;
        Some(tape.reshape(out, vec![s, 1, c])?)
    } else {
        None
    };
    let horizontal = if which.h {
        let out = apply_net(tape, &gen.horizontal, p_s)?;
        Some(tape.reshape(out, vec![1, s, c])?)
    } else {
        None
    };
    let square = if which.s {
        let out = apply_net(tape, &gen.square, p_s2)?;
        Some(tape.reshape(out, vec![s, s, c])?)
    } else {
        None
    };
    Ok(DynamicKernels { vertical, horizontal, square })
}

/// Depthwise-convolve the filtered query feature with each generated
/// kernel independently; outputs in (v, h, s) order.
pub fn enhance_query(
    tape: &mut GradTape,
    x_q_filtered: ValId,
    kernels: &DynamicKernels,
) -> Result<Vec<ValId>> {
    let mut out = Vec::new();
    for ker in [kernels.vertical, kernels.horizontal, kernels.square].into_iter().flatten() {
        out.push(tape.depthwise_conv2d_dynamic(x_q_filtered, ker)?);
    }
    Ok(out)
}

/// Concatenate the decoder input. Channel order is fixed: dynamic
/// blocks (or the plain query feature when none), the broadcast
/// prototype, the activation maps, the refined pseudo mask. Maps are
/// resized bilinearly if their spatial size disagrees.
pub fn assemble_xout(
    tape: &mut GradTape,
    dynamic: &[ValId],
    plain_query: ValId,
    prototype: ValId,
    activation: Option<&ActivationSet>,
    m_pse_r: Option<ValId>,
) -> Result<ValId> {
    let (_, h, w) = tape.value(plain_query).dims3();
    let mut blocks: Vec<ValId> = Vec::new();
    if dynamic.is_empty() {
        blocks.push(plain_query);
    } else {
        blocks.extend_from_slice(dynamic);
    }
    blocks.push(tape.expand_channel(prototype, h, w)?);
    if let Some(act) = activation {
        for map in &act.maps {
            let mut id = tape.constant(map.clone());
            if map.shape != [h, w] {
                id = tape.resize_bilinear(id, h, w);
            }
            blocks.push(tape.reshape(id, vec![1, h, w])?);
        }
    }
    if let Some(m) = m_pse_r {
        let mid = if tape.shape(m) == [h, w] { m } else { tape.resize_bilinear(m, h, w) };
        blocks.push(tape.reshape(mid, vec![1, h, w])?);
    }
    tape.concat0(&blocks)
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
    fn full_mask_extracts_every_position() {
        let mut tape = GradTape::new();
        let x = tape.leaf(rand_t(&[MID_CHANNELS, 16, 16], 1));
        let m = tape.leaf(Tensor::full(vec![16, 16], 1.0));
        let fg = extract_foreground(&mut tape, x, m, None).unwrap();
        assert_eq!(fg.count(), 256);
        assert_eq!(tape.shape(fg.id), &[256, MID_CHANNELS]);
    }

    #[test]
    fn single_pixel_mask_is_that_feature() {
        let mut tape = GradTape::new();
        let x = tape.leaf(rand_t(&[4, 3, 3], 2));
        let mut m = Tensor::zeros(vec![3, 3]);
        m.data[4] = 1.0;
        let m = tape.leaf(m);
        let fg = extract_foreground(&mut tape, x, m, None).unwrap();
        assert_eq!(fg.count(), 1);
        let xv = tape.value(x).data.clone();
        for c in 0..4 {
            assert_eq!(tape.value(fg.id).data[c], xv[c * 9 + 4]);
        }
    }

    #[test]
    fn merge_concatenates_in_shot_order() {
        let mut tape = GradTape::new();
        let x1 = tape.leaf(rand_t(&[2, 2, 2], 3));
        let x2 = tape.leaf(rand_t(&[2, 2, 2], 4));
        let m1 = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 0.0]));
        let m2 = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]));
        let f1 = extract_foreground(&mut tape, x1, m1, None).unwrap();
        let f2 = extract_foreground(&mut tape, x2, m2, None).unwrap();
        let merged = merge_shots(&mut tape, &[f1.clone(), f2.clone()]).unwrap();
        assert_eq!(merged.count(), 7);
        assert_eq!(merged.per_shot, vec![3, 4]);
        let mv = tape.value(merged.id).data.clone();
        let f1v = tape.value(f1.id).data.clone();
        let f2v = tape.value(f2.id).data.clone();
        assert_eq!(&mv[..f1v.len()], &f1v[..]);
        assert_eq!(&mv[f1v.len()..], &f2v[..]);
    }

    #[test]
    fn serial_pooling_repeats_rows() {
        let mut tape = GradTape::new();
        let x = tape.leaf(rand_t(&[5, MID_CHANNELS], 5));
        let fg = ForegroundVectors { id: x, per_shot: vec![5] };
        let (p_s, p_s2) = pool_prototypes(&mut tape, &fg, 5, PoolVariant::Serial).unwrap();
        // N == S: identity pooling.
        assert_eq!(tape.value(p_s).data, tape.value(x).data);
        // Upsample 5 -> 25: row i is p_s[i / 5].
        for i in 0..25 {
            let src = i / 5;
            assert_eq!(
                tape.value(p_s2).data[i * MID_CHANNELS..(i + 1) * MID_CHANNELS],
                tape.value(p_s).data[src * MID_CHANNELS..(src + 1) * MID_CHANNELS]
            );
        }
    }

    #[test]
    fn pool_variants_differ_but_keep_shapes() {
        let mut tape = GradTape::new();
        let x = tape.leaf(rand_t(&[40, MID_CHANNELS], 6));
        let fg = ForegroundVectors { id: x, per_shot: vec![40] };
        let (s1, s2) = pool_prototypes(&mut tape, &fg, 5, PoolVariant::Serial).unwrap();
        let (p1, p2) = pool_prototypes(&mut tape, &fg, 5, PoolVariant::Parallel).unwrap();
        assert_eq!(tape.shape(s1), &[5, MID_CHANNELS]);
        assert_eq!(tape.shape(s2), &[25, MID_CHANNELS]);
        assert_eq!(tape.shape(p2), &[25, MID_CHANNELS]);
        assert_eq!(tape.value(s1).data, tape.value(p1).data);
        assert_ne!(tape.value(s2).data, tape.value(p2).data);
    }

    #[test]
    fn kernel_shapes_across_sizes() {
        let params = KernelGenParams::init(7);
        for s in [3usize, 5, 7, 9] {
            let mut tape = GradTape::new();
            let gen = bind_kernel_gen(&mut tape, &params, false);
            let p_s = tape.leaf(rand_t(&[s, MID_CHANNELS], 8));
            let p_s2 = tape.leaf(rand_t(&[s * s, MID_CHANNELS], 9));
            let k = generate_kernels(&mut tape, p_s, p_s2, &gen, s, KernelSet::ALL).unwrap();
            assert_eq!(tape.shape(k.vertical.unwrap()), &[s, 1, MID_CHANNELS]);
            assert_eq!(tape.shape(k.horizontal.unwrap()), &[1, s, MID_CHANNELS]);
            assert_eq!(tape.shape(k.square.unwrap()), &[s, s, MID_CHANNELS]);
        }
    }

    #[test]
    fn zero_generators_zero_everything() {
        let mut tape = GradTape::new();
        let zero_net = KernelNet {
            w1: Tensor::zeros(vec![MID_CHANNELS, MID_CHANNELS, 3]),
            b1: Tensor::zeros(vec![MID_CHANNELS]),
            w2: Tensor::zeros(vec![MID_CHANNELS, MID_CHANNELS, 3]),
            b2: Tensor::zeros(vec![MID_CHANNELS]),
        };
        let params = KernelGenParams {
            vertical: zero_net.clone(),
            horizontal: zero_net.clone(),
            square: zero_net,
        };
        let gen = bind_kernel_gen(&mut tape, &params, false);
        let p_s = tape.leaf(rand_t(&[5, MID_CHANNELS], 10));
        let p_s2 = tape.leaf(rand_t(&[25, MID_CHANNELS], 11));
        let k = generate_kernels(&mut tape, p_s, p_s2, &gen, 5, KernelSet::ALL).unwrap();
        let xq = tape.leaf(rand_t(&[MID_CHANNELS, 6, 6], 12));
        let outs = enhance_query(&mut tape, xq, &k).unwrap();
        assert_eq!(outs.len(), 3);
        for o in outs {
            assert!(tape.value(o).data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn square_kernel_reshape_is_row_major() {
        let mut tape = GradTape::new();
        let s = 3;
        let c = 2;
        let rows = tape.leaf(rand_t(&[s * s, c], 13));
        let ker = tape.reshape(rows, vec![s, s, c]).unwrap();
        let rv = tape.value(rows).data.clone();
        for i in 0..s {
            for j in 0..s {
                for ch in 0..c {
                    assert_eq!(tape.value(ker).data[(i * s + j) * c + ch], rv[(i * s + j) * c + ch]);
                }
            }
        }
    }

    #[test]
    fn vertical_kernel_on_column_constant_feature() {
        // Feature constant along the vertical axis, all-equal kernel w:
        // interior output is S*w*x per channel.
        let mut tape = GradTape::new();
        let c = 2;
        let s = 5;
        let (h, w) = (9, 9);
        let mut x = Tensor::zeros(vec![c, h, w]);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    x.data[(ch * h + y) * w + xx] = (xx + ch) as f64; // varies only with x
                }
            }
        }
        let xid = tape.leaf(x);
        let kv = 0.25;
        let ker = tape.leaf(Tensor::full(vec![s, 1, c], kv));
        let out = tape.depthwise_conv2d_dynamic(xid, ker).unwrap();
        // Interior row (y in 2..7): full kernel support.
        for ch in 0..c {
            for xx in 0..w {
                let expect = s as f64 * kv * (xx + ch) as f64;
                let got = tape.value(out).data[(ch * h + 4) * w + xx];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn xout_layout_and_channel_count() {
        let mut tape = GradTape::new();
        let c = MID_CHANNELS;
        let (h, w) = (4, 4);
        let dyn_feats: Vec<ValId> =
            (0..3).map(|i| tape.leaf(rand_t(&[c, h, w], 20 + i))).collect();
        let plain = tape.leaf(rand_t(&[c, h, w], 30));
        let proto = tape.leaf(rand_t(&[c], 31));
        let act = ActivationSet {
            maps: [rand_t(&[h, w], 32), rand_t(&[h, w], 33), rand_t(&[h, w], 34)],
            m_pse0: Tensor::zeros(vec![h, w]),
        };
        let mpr = tape.leaf(rand_t(&[h, w], 35));
        let xout =
            assemble_xout(&mut tape, &dyn_feats, plain, proto, Some(&act), Some(mpr)).unwrap();
        assert_eq!(tape.shape(xout), &[4 * c + 4, h, w]);
        // Block 3 recovers the broadcast prototype exactly.
        let xv = tape.value(xout).data.clone();
        let pv = tape.value(proto).data.clone();
        for ch in 0..c {
            for i in 0..h * w {
                assert_eq!(xv[(3 * c + ch) * h * w + i], pv[ch]);
            }
        }
        // Map channels sit after the prototype block.
        for (k, map) in act.maps.iter().enumerate() {
            for i in 0..h * w {
                assert_eq!(xv[(4 * c + k) * h * w + i], map.data[i]);
            }
        }
    }

    #[test]
    fn xout_shrinks_without_modules() {
        let mut tape = GradTape::new();
        let c = MID_CHANNELS;
        let plain = tape.leaf(rand_t(&[c, 4, 4], 40));
        let proto = tape.leaf(rand_t(&[c], 41));
        let xout = assemble_xout(&mut tape, &[], plain, proto, None, None).unwrap();
        assert_eq!(tape.shape(xout), &[2 * c, 4, 4]);
        // Baseline layout is [x_q | x_p].
        assert_eq!(&tape.value(xout).data[..c * 16], &tape.value(plain).data[..]);
    }
}

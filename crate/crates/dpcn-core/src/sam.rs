//! Support activation: holistic region-to-region matching between
//! high-level support and query features.
//!
//! Region features slide a (dh, dw) window over the feature map; the
//! regional matching map pairs identical window offsets and scores them
//! by cosine similarity. Each window yields one activation map
//! (mean over offsets, max over support positions, min-max normalized);
//! the three maps average into the initial pseudo mask.
//!
//! This module is a fixed prior by contract: nothing here records onto
//! a tape, and no gradient flows through the matching into the backbone.

use crate::error::{Error, Result};
use crate::tape::matmul_into;
use crate::tensor::{cosine_sim, minmax_norm, resize_nearest, Tensor, EPS_COS, EPS_MASK};

/// Matching windows in fixed order; the asymmetric windows flank the
/// square one so the activation channel layout is deterministic.
pub const SAM_WINDOWS: [(usize, usize); 3] = [(5, 1), (3, 3), (1, 5)];

/// The three per-window activation maps plus the initial pseudo mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub maps: [Tensor; 3],
    pub m_pse0: Tensor,
}

fn window_offsets(dh: usize, dw: usize) -> Vec<(isize, isize)> {
    let ch = (dh as isize - 1) / 2;
    let cw = (dw as isize - 1) / 2;
    let mut offsets = Vec::with_capacity(dh * dw);
    for r in 0..dh as isize {
        for c in 0..dw as isize {
            offsets.push((r - ch, c - cw));
        }
    }
    offsets
}

fn check_window(dh: usize, dw: usize) -> Result<()> {
    if dh == 0 || dw == 0 || dh % 2 == 0 || dw % 2 == 0 {
        return Err(Error::UnsupportedWindow { dh, dw });
    }
    Ok(())
}

/// Window features: out[j, c, u] is the feature at offset j around
/// position u, zero outside the map. Offsets enumerate the window
/// row-major; positions are the row-major spatial scan.
pub fn region_features(x: &Tensor, window: (usize, usize)) -> Result<Tensor> {
    check_window(window.0, window.1)?;
    let (ch, h, w) = x.dims3();
    let offsets = window_offsets(window.0, window.1);
    let j = offsets.len();
    let hw = h * w;
    let mut out = vec![0.0; j * ch * hw];
    for (ji, &(dr, dc)) in offsets.iter().enumerate() {
        for c in 0..ch {
            let dst = &mut out[(ji * ch + c) * hw..(ji * ch + c + 1) * hw];
            for y in 0..h {
                let sy = y as isize + dr;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w {
                    let sx = xx as isize + dc;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    dst[y * w + xx] = x.data[(c * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    Ok(Tensor::new(vec![j, ch, hw], out))
}

/// Offset-aligned cosine matching: Corr[j,u,v] = cos(Rs[j,:,u], Rq[j,:,v]).
pub fn regional_corr(rs: &Tensor, rq: &Tensor) -> Result<Tensor> {
    let (js, ch_s, ns) = rs.dims3();
    let (jq, ch_q, nq) = rq.dims3();
    if js != jq || ch_s != ch_q {
        return Err(Error::ShapeMismatch {
            op: "regional_corr",
            detail: format!("{:?} vs {:?}", rs.shape, rq.shape),
        });
    }
    let mut out = vec![0.0; js * ns * nq];
    let mut a = vec![0.0; ch_s];
    let mut b = vec![0.0; ch_s];
    for j in 0..js {
        for u in 0..ns {
            for (c, av) in a.iter_mut().enumerate() {
                *av = rs.data[(j * ch_s + c) * ns + u];
            }
            for v in 0..nq {
                for (c, bv) in b.iter_mut().enumerate() {
                    *bv = rq.data[(j * ch_s + c) * nq + v];
                }
                out[(j * ns + u) * nq + v] = cosine_sim(&a, &b);
            }
        }
    }
    Ok(Tensor::new(vec![js, ns, nq], out))
}

/// A[v] = minmax_norm( max_u( mean_j Corr[j,u,v] ) ), reshaped to (hq, wq).
pub fn activation_map(corr: &Tensor, hq: usize, wq: usize) -> Tensor {
    let (j, ns, nq) = corr.dims3();
    assert_eq!(nq, hq * wq, "corr query axis does not match hq*wq");
    let inv_j = 1.0 / j as f64;
    let mut pre = vec![f64::NEG_INFINITY; nq];
    for u in 0..ns {
        for (v, best) in pre.iter_mut().enumerate() {
            let mut mean = 0.0;
            for ji in 0..j {
                mean += corr.data[(ji * ns + u) * nq + v];
            }
            mean *= inv_j;
            if mean > *best {
                *best = mean;
            }
        }
    }
    minmax_norm(&Tensor::new(vec![hq, wq], pre))
}

/// Dot products of all support/query feature columns: D0[p,q] =
/// sum_c xs[c,p] * xq[c,q]. Every window offset's cosine slice is a
/// shifted view into this one matrix, which is what makes the fast path
/// below exact and cheap.
struct SharedCos {
    cos0: Vec<f64>,
    n: usize,
}

fn shared_cos(xs_masked: &Tensor, xq: &Tensor) -> SharedCos {
    let (ch, h, w) = xs_masked.dims3();
    let n = h * w;
    // Transpose support features to [N, Ch] rows for the matmul.
    let mut xs_t = vec![0.0; n * ch];
    for c in 0..ch {
        for p in 0..n {
            xs_t[p * ch + c] = xs_masked.data[c * n + p];
        }
    }
    let mut dot = vec![0.0; n * n];
    matmul_into(&xs_t, &xq.data, &mut dot, n, ch, n);
    // Column norms, accumulated in channel order to match cosine_sim.
    let norms = |x: &Tensor| -> Vec<f64> {
        let mut sq = vec![0.0; n];
        for c in 0..ch {
            for p in 0..n {
                let v = x.data[c * n + p];
                sq[p] += v * v;
            }
        }
        sq.iter().map(|s| s.sqrt()).collect()
    };
    let ns = norms(xs_masked);
    let nq = norms(xq);
    let mut cos0 = dot;
    for p in 0..n {
        for q in 0..n {
            cos0[p * n + q] /= ns[p] * nq[q] + EPS_COS;
        }
    }
    SharedCos { cos0, n }
}

/// One window's activation map via the shared cosine matrix. Identical
/// (bit-for-bit) to region_features -> regional_corr -> activation_map.
fn window_map(shared: &SharedCos, h: usize, w: usize, window: (usize, usize)) -> Tensor {
    let offsets = window_offsets(window.0, window.1);
    let inv_j = 1.0 / offsets.len() as f64;
    let n = shared.n;
    let mut pre = vec![f64::NEG_INFINITY; n];
    let mut mean = vec![0.0; n];
    for u in 0..n {
        mean.fill(0.0);
        let (uy, ux) = (u / w, u % w);
        for &(dr, dc) in &offsets {
            let sy = uy as isize + dr;
            let sx = ux as isize + dc;
            let u_ok = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
            if !u_ok {
                continue; // support side out of bounds: cos = 0 for all v
            }
            let pu = (sy as usize * w + sx as usize) * n;
            let row = &shared.cos0[pu..pu + n];
            for v in 0..n {
                let (vy, vx) = (v / w, v % w);
                let qy = vy as isize + dr;
                let qx = vx as isize + dc;
                if qy >= 0 && qy < h as isize && qx >= 0 && qx < w as isize {
                    mean[v] += row[qy as usize * w + qx as usize];
                }
            }
        }
        for (m, best) in mean.iter().zip(pre.iter_mut()) {
            let v = m * inv_j;
            if v > *best {
                *best = v;
            }
        }
    }
    minmax_norm(&Tensor::new(vec![h, w], pre))
}

/// Full module: three activation maps in window order plus their mean.
///
/// The support mask arrives at image resolution and is applied to the
/// support features (nearest resize, then Hadamard) before matching, so
/// masked-out regions become zero vectors and can never win the max.
pub fn run_sam(x_s_high: &Tensor, m_s: &Tensor, x_q_high: &Tensor) -> Result<ActivationSet> {
    let (ch_s, hs, ws) = x_s_high.dims3();
    let (ch_q, hq, wq) = x_q_high.dims3();
    if ch_s != ch_q || hs != hq || ws != wq {
        return Err(Error::ShapeMismatch {
            op: "run_sam",
            detail: format!("{:?} vs {:?}", x_s_high.shape, x_q_high.shape),
        });
    }
    let mask = if m_s.shape == [hs, ws] { m_s.clone() } else { resize_nearest(m_s, hs, ws) };
    if mask.data.iter().sum::<f64>() < EPS_MASK {
        return Err(Error::EmptyMask);
    }
    let mut masked = x_s_high.clone();
    let hw = hs * ws;
    for c in 0..ch_s {
        for p in 0..hw {
            masked.data[c * hw + p] *= mask.data[p];
        }
    }
    let shared = shared_cos(&masked, x_q_high);
    let maps = SAM_WINDOWS.map(|win| window_map(&shared, hq, wq, win));
    let mut m_pse0 = Tensor::zeros(vec![hq, wq]);
    for map in &maps {
        for (acc, v) in m_pse0.data.iter_mut().zip(&map.data) {
            *acc += v;
        }
    }
    for v in m_pse0.data.iter_mut() {
        *v /= 3.0;
    }
    Ok(ActivationSet { maps, m_pse0 })
}

/// Reference composition of the three contract ops; the fast path in
/// `run_sam` must agree with this exactly.
pub fn run_sam_reference(
    x_s_high: &Tensor,
    m_s: &Tensor,
    x_q_high: &Tensor,
) -> Result<ActivationSet> {
    let (ch, hs, ws) = x_s_high.dims3();
    let (_, hq, wq) = x_q_high.dims3();
    let mask = if m_s.shape == [hs, ws] { m_s.clone() } else { resize_nearest(m_s, hs, ws) };
    if mask.data.iter().sum::<f64>() < EPS_MASK {
        return Err(Error::EmptyMask);
    }
    let mut masked = x_s_high.clone();
    let hw = hs * ws;
    for c in 0..ch {
        for p in 0..hw {
            masked.data[c * hw + p] *= mask.data[p];
        }
    }
    let mut maps = Vec::with_capacity(3);
    for win in SAM_WINDOWS {
        let rs = region_features(&masked, win)?;
        let rq = region_features(x_q_high, win)?;
        let corr = regional_corr(&rs, &rq)?;
        maps.push(activation_map(&corr, hq, wq));
    }
    let maps: [Tensor; 3] = maps.try_into().unwrap();
    let mut m_pse0 = Tensor::zeros(vec![hq, wq]);
    for map in &maps {
        for (acc, v) in m_pse0.data.iter_mut().zip(&map.data) {
            *acc += v;
        }
    }
    for v in m_pse0.data.iter_mut() {
        *v /= 3.0;
    }
    Ok(ActivationSet { maps, m_pse0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_feat(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn degenerate_window_is_flat_view() {
        let x = random_feat(&[2, 3, 4], 1);
        let r = region_features(&x, (1, 1)).unwrap();
        assert_eq!(r.shape, vec![1, 2, 12]);
        assert_eq!(r.data, x.data);
    }

    #[test]
    fn constant_map_offsets_equal_at_interior() {
        let x = Tensor::full(vec![1, 5, 5], 2.0);
        let r = region_features(&x, (3, 3)).unwrap();
        // Interior position (2,2) = index 12: all 9 offsets see 2.0.
        for j in 0..9 {
            assert_eq!(r.data[(j) * 25 + 12], 2.0);
        }
    }

    #[test]
    fn border_offsets_are_zero_padding() {
        let x = random_feat(&[2, 4, 4], 2);
        let r = region_features(&x, (3, 3)).unwrap();
        // Offset j=0 is (-1,-1); at position (0,0) it reads padding.
        assert_eq!(r.data[0], 0.0);
        // Index-formula oracle over every entry.
        let offsets = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];
        for (j, &(dr, dc)) in offsets.iter().enumerate() {
            for c in 0..2 {
                for y in 0..4i64 {
                    for xx in 0..4i64 {
                        let u = (y * 4 + xx) as usize;
                        let (sy, sx) = (y + dr, xx + dc);
                        let expect = if (0..4).contains(&sy) && (0..4).contains(&sx) {
                            x.data[(c * 4 + sy as usize) * 4 + sx as usize]
                        } else {
                            0.0
                        };
                        assert_eq!(r.data[(j * 2 + c) * 16 + u], expect);
                    }
                }
            }
        }
    }

    #[test]
    fn unsupported_windows_rejected() {
        let x = Tensor::zeros(vec![1, 4, 4]);
        assert!(matches!(
            region_features(&x, (2, 3)),
            Err(Error::UnsupportedWindow { dh: 2, dw: 3 })
        ));
        assert!(region_features(&x, (5, 1)).is_ok());
    }

    #[test]
    fn self_similarity_diagonal() {
        let x = random_feat(&[4, 4, 4], 3);
        let ones = Tensor::full(vec![4, 4], 1.0);
        // Same features both sides: interior diagonal close to 1.
        let rs = region_features(&x, (3, 3)).unwrap();
        let corr = regional_corr(&rs, &rs).unwrap();
        let n = 16;
        // Interior position (1,1) => u = 5.
        let u = 5;
        let j = 9;
        let mut mean = 0.0;
        for ji in 0..j {
            mean += corr.data[(ji * n + u) * n + u];
        }
        // Within the epsilon of the cosine denominator.
        assert!((mean / j as f64 - 1.0).abs() < 1e-6);
        drop(ones);
    }

    #[test]
    fn masked_support_rows_are_zero() {
        let x = random_feat(&[4, 4, 4], 4);
        let mut masked = x.clone();
        // Zero out support position u = 6 across channels.
        for c in 0..4 {
            masked.data[c * 16 + 6] = 0.0;
        }
        let rs = region_features(&masked, (1, 1)).unwrap();
        let rq = region_features(&x, (1, 1)).unwrap();
        let corr = regional_corr(&rs, &rq).unwrap();
        for v in 0..16 {
            assert_eq!(corr.data[6 * 16 + v], 0.0);
        }
    }

    #[test]
    fn fast_path_matches_reference_exactly() {
        for seed in 0..5 {
            let xs = random_feat(&[6, 8, 8], 100 + seed);
            let xq = random_feat(&[6, 8, 8], 200 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let mask = Tensor::new(
                vec![8, 8],
                (0..64).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect(),
            );
            if mask.data.iter().sum::<f64>() == 0.0 {
                continue;
            }
            let fast = run_sam(&xs, &mask, &xq).unwrap();
            let slow = run_sam_reference(&xs, &mask, &xq).unwrap();
            for i in 0..3 {
                assert_eq!(fast.maps[i].data, slow.maps[i].data, "window {i} differs");
            }
            assert_eq!(fast.m_pse0.data, slow.m_pse0.data);
        }
    }

    #[test]
    fn maps_are_three_normalized_and_averaged() {
        let xs = random_feat(&[8, 6, 6], 11);
        let xq = random_feat(&[8, 6, 6], 12);
        let mask = Tensor::full(vec![6, 6], 1.0);
        let act = run_sam(&xs, &mask, &xq).unwrap();
        assert_eq!(act.maps.len(), 3);
        for map in &act.maps {
            assert_eq!(map.shape, vec![6, 6]);
            assert!(map.data.iter().all(|&v| (-1e-6..=1.0 + 1e-6).contains(&v)));
        }
        // m_pse0 is exactly the elementwise mean.
        for i in 0..36 {
            let mean = (act.maps[0].data[i] + act.maps[1].data[i] + act.maps[2].data[i]) / 3.0;
            assert_eq!(act.m_pse0.data[i], mean);
        }
    }

    #[test]
    fn query_scale_invariance() {
        let xs = random_feat(&[6, 6, 6], 21);
        let mut xq = random_feat(&[6, 6, 6], 22);
        let mask = Tensor::full(vec![6, 6], 1.0);
        let base = run_sam(&xs, &mask, &xq).unwrap();
        for v in xq.data.iter_mut() {
            *v *= 37.5;
        }
        let scaled = run_sam(&xs, &mask, &xq).unwrap();
        for i in 0..3 {
            assert!(base.maps[i].max_abs_diff(&scaled.maps[i]) < 1e-6);
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        let xs = random_feat(&[4, 6, 6], 31);
        let xq = random_feat(&[4, 6, 6], 32);
        let mask = Tensor::zeros(vec![6, 6]);
        assert!(matches!(run_sam(&xs, &mask, &xq), Err(Error::EmptyMask)));
    }
}

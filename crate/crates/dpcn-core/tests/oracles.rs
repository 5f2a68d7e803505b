//! Brute-force oracle equivalence for the numeric kernels.
//!
//! Oracles live in `common/` as independent re-derivations from the
//! index formulas. 100+ randomized instances per op, absolute error
//! < 1e-10 in 64-bit.

mod common;

use common::*;
use rand::Rng;

use dpcn_core::dcm;
use dpcn_core::sam::{region_features, regional_corr, ActivationSet};
use dpcn_core::tape::GradTape;
use dpcn_core::tensor::Tensor;

const TOL: f64 = 1e-10;

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = seeded(1);
    for _ in 0..100 {
        let (m, k, n) = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..7));
        let a = rand_t(&mut rng, &[m, k]);
        let b = rand_t(&mut rng, &[k, n]);
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += a.data[i * k + t] * b.data[t * n + j];
                }
                expect[i * n + j] = acc;
            }
        }
        let mut tape = GradTape::new();
        let aid = tape.leaf(a);
        let bid = tape.leaf(b);
        let c = tape.matmul(aid, bid).unwrap();
        assert!(max_diff(&tape.value(c).data, &expect) < 1e-12);
    }
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = seeded(2);
    for case in 0..110 {
        let cin = rng.gen_range(1..=8);
        let cout = rng.gen_range(1..=6);
        let h = rng.gen_range(1..=16);
        let wd = rng.gen_range(1..=16);
        let kh = [1, 3, 5][rng.gen_range(0..3)];
        let kw = [1, 3, 5][rng.gen_range(0..3)];
        let dilation = rng.gen_range(1..=2);
        let x = rand_t(&mut rng, &[cin, h, wd]);
        let w = rand_t(&mut rng, &[cout, cin, kh, kw]);
        let b = rand_t(&mut rng, &[cout]);
        let expect = conv2d_oracle(&x, &w, &b, dilation);
        let mut tape = GradTape::new();
        let (xi, wi, bi) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
        let y = tape.conv2d(xi, wi, bi, dilation).unwrap();
        let d = max_diff(&tape.value(y).data, &expect);
        assert!(d < TOL, "case {case}: diff {d}");
    }
}

#[test]
fn depthwise_dynamic_matches_direct_loops() {
    let mut rng = seeded(3);
    for case in 0..110 {
        let c = rng.gen_range(1..=8);
        let h = rng.gen_range(1..=16);
        let w = rng.gen_range(1..=16);
        // The window shapes the dynamic module uses: Sx1, 1xS, SxS.
        let s = [3, 5][rng.gen_range(0..2)];
        let (kh, kw) = [(s, 1), (1, s), (s, s)][rng.gen_range(0..3)];
        let x = rand_t(&mut rng, &[c, h, w]);
        let ker = rand_t(&mut rng, &[kh, kw, c]);
        let expect = depthwise_oracle(&x, &ker);
        let mut tape = GradTape::new();
        let (xi, ki) = (tape.leaf(x), tape.leaf(ker));
        let y = tape.depthwise_conv2d_dynamic(xi, ki).unwrap();
        let d = max_diff(&tape.value(y).data, &expect);
        assert!(d < TOL, "case {case}: diff {d}");
    }
}

#[test]
fn masked_avg_pool_matches_explicit_sums() {
    let mut rng = seeded(4);
    for case in 0..110 {
        let c = rng.gen_range(1..=8);
        let h = rng.gen_range(1..=12);
        let w = rng.gen_range(1..=12);
        let x = rand_t(&mut rng, &[c, h, w]);
        let mut m = Tensor::zeros(vec![h, w]);
        for v in m.data.iter_mut() {
            if rng.gen_bool(0.4) {
                *v = 1.0;
            }
        }
        if m.data.iter().sum::<f64>() == 0.0 {
            m.data[0] = 1.0;
        }
        let expect = masked_pool_oracle(&x, &m);
        let mut tape = GradTape::new();
        let (xi, mi) = (tape.leaf(x), tape.leaf(m));
        let p = tape.masked_avg_pool(xi, mi).unwrap();
        let d = max_diff(&tape.value(p).data, &expect);
        assert!(d < TOL, "case {case}: diff {d}");
    }
}

#[test]
fn adaptive_pool1d_matches_index_formula() {
    let mut rng = seeded(5);
    for case in 0..120 {
        let n = rng.gen_range(1..=40);
        let c = rng.gen_range(1..=8);
        let target = rng.gen_range(1..=30);
        let x = rand_t(&mut rng, &[n, c]);
        let expect = adaptive_pool_oracle(&x, target);
        let mut tape = GradTape::new();
        let xi = tape.leaf(x);
        let y = tape.adaptive_pool1d(xi, target).unwrap();
        let d = max_diff(&tape.value(y).data, &expect);
        assert!(d < TOL, "case {case}: n={n} target={target} diff {d}");
    }
}

#[test]
fn regional_corr_matches_double_loop_cosine() {
    let mut rng = seeded(6);
    for case in 0..100 {
        let ch = rng.gen_range(1..=6);
        let h = rng.gen_range(2..=5);
        let w = rng.gen_range(2..=5);
        let win = [(5, 1), (3, 3), (1, 5), (1, 1)][rng.gen_range(0..4)];
        let xs = rand_t(&mut rng, &[ch, h, w]);
        let xq = rand_t(&mut rng, &[ch, h, w]);
        let rs = region_features(&xs, win).unwrap();
        let rq = region_features(&xq, win).unwrap();
        let corr = regional_corr(&rs, &rq).unwrap();
        let j = win.0 * win.1;
        let n = h * w;
        for ji in 0..j {
            for u in 0..n {
                let a: Vec<f64> = (0..ch).map(|c| rs.data[(ji * ch + c) * n + u]).collect();
                for v in 0..n {
                    let b: Vec<f64> = (0..ch).map(|c| rq.data[(ji * ch + c) * n + v]).collect();
                    let expect = cos_oracle(&a, &b);
                    let got = corr.data[(ji * n + u) * n + v];
                    assert!(
                        (got - expect).abs() < TOL,
                        "case {case} j={ji} u={u} v={v}: {got} vs {expect}"
                    );
                }
            }
        }
    }
}

#[test]
fn assemble_xout_matches_index_oracle() {
    let mut rng = seeded(7);
    for case in 0..100 {
        let c = rng.gen_range(1..=6);
        let h = rng.gen_range(2..=6);
        let w = rng.gen_range(2..=6);
        let n_dyn = rng.gen_range(0..=3usize);
        let with_maps = rng.gen_bool(0.5);
        let with_mask = rng.gen_bool(0.5);

        let mut tape = GradTape::new();
        let dyn_t: Vec<Tensor> = (0..n_dyn).map(|_| rand_t(&mut rng, &[c, h, w])).collect();
        let plain_t = rand_t(&mut rng, &[c, h, w]);
        let proto_t = rand_t(&mut rng, &[c]);
        let maps_t: [Tensor; 3] = std::array::from_fn(|_| rand_t(&mut rng, &[h, w]));
        let mask_t = rand_t(&mut rng, &[h, w]);

        let dyn_ids: Vec<_> = dyn_t.iter().map(|t| tape.leaf(t.clone())).collect();
        let plain = tape.leaf(plain_t.clone());
        let proto = tape.leaf(proto_t.clone());
        let act = ActivationSet { maps: maps_t.clone(), m_pse0: Tensor::zeros(vec![h, w]) };
        let mask_id = tape.leaf(mask_t.clone());

        let xout = dcm::assemble_xout(
            &mut tape,
            &dyn_ids,
            plain,
            proto,
            with_maps.then_some(&act),
            with_mask.then_some(mask_id),
        )
        .unwrap();

        // Oracle: build the expected buffer from the layout contract.
        let mut expect = Vec::new();
        if n_dyn == 0 {
            expect.extend_from_slice(&plain_t.data);
        } else {
            for t in &dyn_t {
                expect.extend_from_slice(&t.data);
            }
        }
        for ch in 0..c {
            expect.extend(std::iter::repeat(proto_t.data[ch]).take(h * w));
        }
        if with_maps {
            for m in &maps_t {
                expect.extend_from_slice(&m.data);
            }
        }
        if with_mask {
            expect.extend_from_slice(&mask_t.data);
        }
        let blocks = if n_dyn == 0 { 1 } else { n_dyn };
        let channels =
            blocks * c + c + if with_maps { 3 } else { 0 } + usize::from(with_mask);
        assert_eq!(tape.shape(xout), &[channels, h, w], "case {case}");
        assert_eq!(tape.value(xout).data, expect, "case {case}");
    }
}

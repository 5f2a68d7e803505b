//! Shared brute-force oracles for the oracle and acceptance suites.
//! Independent re-derivations from the index formulas; none of these
//! call back into the code they check.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dpcn_core::tensor::{Tensor, EPS_COS};

pub fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn conv2d_oracle(x: &Tensor, w: &Tensor, b: &Tensor, dilation: usize) -> Vec<f64> {
    let (cin, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let (cout, _, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    let mut out = vec![0.0; cout * h * wd];
    for co in 0..cout {
        for y in 0..h as isize {
            for xx in 0..wd as isize {
                let mut acc = b.data[co];
                for ci in 0..cin {
                    for i in 0..kh as isize {
                        for j in 0..kw as isize {
                            let sy = y + (i - (kh as isize - 1) / 2) * dilation as isize;
                            let sx = xx + (j - (kw as isize - 1) / 2) * dilation as isize;
                            if sy < 0 || sy >= h as isize || sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            acc += x.data[(ci * h + sy as usize) * wd + sx as usize]
                                * w.data[((co * cin + ci) * kh + i as usize) * kw + j as usize];
                        }
                    }
                }
                out[(co * h as usize + y as usize) * wd + xx as usize] = acc;
            }
        }
    }
    out
}

pub fn depthwise_oracle(x: &Tensor, ker: &Tensor) -> Vec<f64> {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (kh, kw, _) = (ker.shape[0], ker.shape[1], ker.shape[2]);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = 0.0;
                for i in 0..kh as isize {
                    for j in 0..kw as isize {
                        let sy = y + i - (kh as isize - 1) / 2;
                        let sx = xx + j - (kw as isize - 1) / 2;
                        if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                            continue;
                        }
                        acc += x.data[(ch * h + sy as usize) * w + sx as usize]
                            * ker.data[(i as usize * kw + j as usize) * c + ch];
                    }
                }
                out[(ch * h as usize + y as usize) * w + xx as usize] = acc;
            }
        }
    }
    out
}

pub fn masked_pool_oracle(x: &Tensor, m: &Tensor) -> Vec<f64> {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let s: f64 = m.data.iter().sum();
    let mut out = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for p in 0..h * w {
            acc += x.data[ch * h * w + p] * m.data[p];
        }
        out[ch] = acc / s;
    }
    out
}

pub fn adaptive_pool_oracle(x: &Tensor, target: usize) -> Vec<f64> {
    let (n, c) = (x.shape[0], x.shape[1]);
    let mut out = vec![0.0; target * c];
    if n >= target {
        for i in 0..target {
            let lo = i * n / target;
            let hi = (i + 1) * n / target;
            for ch in 0..c {
                let mut acc = 0.0;
                for row in lo..hi {
                    acc += x.data[row * c + ch];
                }
                out[i * c + ch] = acc / (hi - lo) as f64;
            }
        }
    } else {
        for i in 0..target {
            let src = i * n / target;
            for ch in 0..c {
                out[i * c + ch] = x.data[src * c + ch];
            }
        }
    }
    out
}

/// Independent cosine with the same epsilon rule.
pub fn cos_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt() + EPS_COS)
}

// ── Case runners: worst absolute error over n randomized instances ──

use dpcn_core::sam::{region_features, regional_corr, ActivationSet};
use dpcn_core::tape::GradTape;

pub fn run_conv2d_cases(n: usize, seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
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
        worst = worst.max(max_diff(&tape.value(y).data, &expect));
    }
    worst
}

pub fn run_depthwise_cases(n: usize, seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let c = rng.gen_range(1..=8);
        let h = rng.gen_range(1..=16);
        let w = rng.gen_range(1..=16);
        let s = [3, 5][rng.gen_range(0..2)];
        let (kh, kw) = [(s, 1), (1, s), (s, s)][rng.gen_range(0..3)];
        let x = rand_t(&mut rng, &[c, h, w]);
        let ker = rand_t(&mut rng, &[kh, kw, c]);
        let expect = depthwise_oracle(&x, &ker);
        let mut tape = GradTape::new();
        let (xi, ki) = (tape.leaf(x), tape.leaf(ker));
        let y = tape.depthwise_conv2d_dynamic(xi, ki).unwrap();
        worst = worst.max(max_diff(&tape.value(y).data, &expect));
    }
    worst
}

pub fn run_masked_pool_cases(n: usize, seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
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
        worst = worst.max(max_diff(&tape.value(p).data, &expect));
    }
    worst
}

pub fn run_adaptive_pool_cases(n: usize, seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let rows = rng.gen_range(1..=40);
        let c = rng.gen_range(1..=8);
        let target = rng.gen_range(1..=30);
        let x = rand_t(&mut rng, &[rows, c]);
        let expect = adaptive_pool_oracle(&x, target);
        let mut tape = GradTape::new();
        let xi = tape.leaf(x);
        let y = tape.adaptive_pool1d(xi, target).unwrap();
        worst = worst.max(max_diff(&tape.value(y).data, &expect));
    }
    worst
}

pub fn run_regional_corr_cases(n: usize, seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
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
        let sz = h * w;
        for ji in 0..j {
            for u in 0..sz {
                let a: Vec<f64> = (0..ch).map(|c| rs.data[(ji * ch + c) * sz + u]).collect();
                for v in 0..sz {
                    let b: Vec<f64> =
                        (0..ch).map(|c| rq.data[(ji * ch + c) * sz + v]).collect();
                    worst = worst
                        .max((corr.data[(ji * sz + u) * sz + v] - cos_oracle(&a, &b)).abs());
                }
            }
        }
    }
    worst
}

pub fn run_assemble_cases(n: usize, seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
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
        let xout = dpcn_core::dcm::assemble_xout(
            &mut tape,
            &dyn_ids,
            plain,
            proto,
            with_maps.then_some(&act),
            with_mask.then_some(mask_id),
        )
        .unwrap();
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
        worst = worst.max(max_diff(&tape.value(xout).data, &expect));
    }
    worst
}

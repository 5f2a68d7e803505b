//! Synthetic shape classes, episode sampling, fold splits, and PGM masks.
//!
//! Twelve procedural classes over eight shape families stand in for the
//! usual benchmark categories. Several families carry holes and slots
//! (rings, combs, grids, hollow squares) so thin-structure handling
//! actually matters, and every render composites distractor shapes from
//! other families into the background so the support set is required to
//! disambiguate which object to segment.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{resize_nearest, Tensor};

pub const IMAGE_SIDE: usize = 64;
/// Feature-grid side the encoder produces; renders guarantee the mask
/// survives nearest-resize to this resolution.
pub const FEATURE_SIDE: usize = IMAGE_SIDE / 4;
pub const NOISE_SIGMA: f64 = 0.05;
pub const FG_FRAC_MIN: f64 = 0.02;
pub const FG_FRAC_MAX: f64 = 0.6;
const RENDER_ATTEMPTS: usize = 16;

/// Stable seed mixer (splitmix64 over the xored inputs).
pub fn derive_seed(master: u64, salt: u64) -> u64 {
    let mut z = master ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Ring,
    Comb,
    Cross,
    Bars,
    Blob,
    Ellipse,
    Grid,
    HollowSquare,
}

pub const FAMILIES: [Family; 8] = [
    Family::Ring,
    Family::Comb,
    Family::Cross,
    Family::Bars,
    Family::Blob,
    Family::Ellipse,
    Family::Grid,
    Family::HollowSquare,
];

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Ring => "ring",
            Family::Comb => "comb",
            Family::Cross => "cross",
            Family::Bars => "bars",
            Family::Blob => "blob",
            Family::Ellipse => "ellipse",
            Family::Grid => "grid",
            Family::HollowSquare => "hollow-square",
        }
    }

    /// Families that contain at least one hole or slot by construction.
    pub fn has_hole_or_slot(self) -> bool {
        matches!(self, Family::Ring | Family::Comb | Family::Grid | Family::HollowSquare)
    }
}

/// One synthetic class: a family plus appearance and geometry ranges.
#[derive(Debug, Clone)]
pub struct ShapeClass {
    pub id: usize,
    pub family: Family,
    pub texture_freq: f64,
    pub intensity_lo: f64,
    pub intensity_hi: f64,
    pub tint: [f64; 3],
    /// Object extent as a fraction of the image side.
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Family-specific feature count (teeth, bars, grid lines, lobes).
    pub feature_lo: usize,
    pub feature_hi: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

/// Support/query task for one class.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: Vec<(Tensor, Tensor)>,
    pub query_image: Tensor,
    pub query_mask: Tensor,
    pub class_id: usize,
}

/// Disjoint train/test class split for one cross-validation fold.
#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Split `n_classes` into 4 folds; each fold's test set is a contiguous
/// quarter of the class ids.
pub fn fold_split(n_classes: usize, fold: usize) -> FoldSplit {
    assert!(fold < 4, "fold index must be 0..=3");
    assert!(n_classes % 4 == 0, "class count must divide into 4 folds");
    let per = n_classes / 4;
    let test: Vec<usize> = (fold * per..(fold + 1) * per).collect();
    let train: Vec<usize> = (0..n_classes).filter(|c| !test.contains(c)).collect();
    FoldSplit { fold, train, test }
}

#[derive(Debug, Clone)]
pub struct ClassLibrary {
    pub classes: Vec<ShapeClass>,
}

impl ClassLibrary {
    /// Deterministic class set; families cycle, appearance varies.
    pub fn build(n_classes: usize, seed: u64) -> Self {
        let mut classes = Vec::with_capacity(n_classes);
        for id in 0..n_classes {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, id as u64));
            let family = FAMILIES[id % FAMILIES.len()];
            let texture_freq = rng.gen_range(2.0..9.0);
            let intensity_lo: f64 = rng.gen_range(0.15..0.45);
            let intensity_hi = (intensity_lo + rng.gen_range(0.3..0.5)).min(1.0);
            let mut tint = [rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0)];
            let peak = tint.iter().cloned().fold(0.0, f64::max);
            for t in &mut tint {
                *t /= peak;
            }
            // Combs need room for their slots to survive rasterization.
            let lo_floor = if family == Family::Comb { 0.38 } else { 0.28 };
            let scale_lo: f64 = rng.gen_range(lo_floor..0.42);
            let scale_hi = (scale_lo + rng.gen_range(0.1..0.18)).min(0.6);
            let (feature_lo, feature_hi) = match family {
                Family::Ring | Family::HollowSquare | Family::Cross | Family::Ellipse => (1, 1),
                Family::Comb => (3, 5),
                Family::Bars => (2, 4),
                Family::Blob => (2, 4),
                Family::Grid => (2, 3),
            };
            classes.push(ShapeClass {
                id,
                family,
                texture_freq,
                intensity_lo,
                intensity_hi,
                tint,
                scale_lo,
                scale_hi,
                feature_lo,
                feature_hi,
            });
        }
        ClassLibrary { classes }
    }

    /// Sample one episode: class uniform over the phase pool, then k
    /// support renders plus one query render with distinct seeds.
    pub fn sample_episode(
        &self,
        split: &FoldSplit,
        phase: Phase,
        k: usize,
        seed: u64,
    ) -> Result<Episode> {
        assert!(k >= 1);
        let pool = match phase {
            Phase::Train => &split.train,
            Phase::Test => &split.test,
        };
        if pool.is_empty() {
            return Err(Error::EmptyPool);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xE915));
        let class_id = pool[rng.gen_range(0..pool.len())];
        let class = &self.classes[class_id];
        let mut support = Vec::with_capacity(k);
        for i in 0..k {
            support.push(render(class, derive_seed(seed, 1 + i as u64))?);
        }
        let (query_image, query_mask) = render(class, derive_seed(seed, 1 + k as u64))?;
        Ok(Episode { support, query_image, query_mask, class_id })
    }
}

// ── Rendering ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
enum Geometry {
    Ring { r_in: f64 },
    Comb { teeth: usize, tooth_frac: f64, spine_frac: f64 },
    Cross { arm: f64 },
    Bars { n: usize, bar_frac: f64 },
    Blob { lobes: Vec<(f64, f64, f64, f64)> },
    Ellipse { b: f64 },
    Grid { n: usize, line_frac: f64 },
    HollowSquare { r_in: f64 },
}

/// Point-in-shape test in the local [-1,1]^2 frame.
fn contains(geom: &Geometry, u: f64, v: f64) -> bool {
    let in_box = u.abs() <= 1.0 && v.abs() <= 1.0;
    match geom {
        Geometry::Ring { r_in } => {
            let r = (u * u + v * v).sqrt();
            r >= *r_in && r <= 1.0
        }
        Geometry::Comb { teeth, tooth_frac, spine_frac } => {
            if !in_box {
                return false;
            }
            let spine_top = 1.0 - 2.0 * spine_frac;
            if v >= spine_top {
                return true; // spine bar
            }
            let pitch = 2.0 / *teeth as f64;
            let offset = (u + 1.0) / pitch;
            let frac = offset - offset.floor();
            frac < *tooth_frac
        }
        Geometry::Cross { arm } => in_box && (u.abs() <= *arm || v.abs() <= *arm),
        Geometry::Bars { n, bar_frac } => {
            if !in_box {
                return false;
            }
            let pitch = 2.0 / *n as f64;
            let offset = (v + 1.0) / pitch;
            let frac = offset - offset.floor();
            frac < *bar_frac
        }
        Geometry::Blob { lobes } => lobes.iter().any(|&(cu, cv, ru, rv)| {
            let du = (u - cu) / ru;
            let dv = (v - cv) / rv;
            du * du + dv * dv <= 1.0
        }),
        Geometry::Ellipse { b } => {
            let dv = v / b;
            u * u + dv * dv <= 1.0
        }
        Geometry::Grid { n, line_frac } => {
            if !in_box {
                return false;
            }
            // n+1 lines each way; cells between them are holes.
            let pitch = 2.0 / *n as f64;
            let half = line_frac * pitch * 0.5;
            let near_line = |t: f64| {
                let offset = (t + 1.0) / pitch;
                let d = (offset - offset.round()).abs() * pitch;
                d <= half
            };
            near_line(u) || near_line(v)
        }
        Geometry::HollowSquare { r_in } => {
            let r = u.abs().max(v.abs());
            r >= *r_in && r <= 1.0
        }
    }
}

fn draw_geometry(rng: &mut ChaCha8Rng, class: &ShapeClass) -> Geometry {
    let count = rng.gen_range(class.feature_lo..=class.feature_hi);
    match class.family {
        Family::Ring => Geometry::Ring { r_in: rng.gen_range(0.45..0.65) },
        Family::Comb => Geometry::Comb {
            teeth: count.max(3),
            tooth_frac: rng.gen_range(0.5..0.68),
            spine_frac: rng.gen_range(0.25..0.38),
        },
        Family::Cross => Geometry::Cross { arm: rng.gen_range(0.18..0.32) },
        Family::Bars => Geometry::Bars { n: count.max(2), bar_frac: rng.gen_range(0.35..0.55) },
        Family::Blob => {
            let lobes = (0..count.max(2))
                .map(|_| {
                    (
                        rng.gen_range(-0.45..0.45),
                        rng.gen_range(-0.45..0.45),
                        rng.gen_range(0.3..0.55),
                        rng.gen_range(0.3..0.55),
                    )
                })
                .collect();
            Geometry::Blob { lobes }
        }
        Family::Ellipse => Geometry::Ellipse { b: rng.gen_range(0.45..0.95) },
        Family::Grid => Geometry::Grid { n: count.max(2), line_frac: rng.gen_range(0.24..0.34) },
        Family::HollowSquare => Geometry::HollowSquare { r_in: rng.gen_range(0.5..0.7) },
    }
}

struct Placement {
    cx: f64,
    cy: f64,
    cos_t: f64,
    sin_t: f64,
    half: f64,
}

fn draw_placement(rng: &mut ChaCha8Rng, scale_lo: f64, scale_hi: f64) -> Placement {
    let side = IMAGE_SIDE as f64;
    let scale = rng.gen_range(scale_lo..scale_hi);
    let half = scale * side / 2.0;
    let margin = (half * 1.1 + 2.0).min(side / 2.0 - 1.0);
    let cx = rng.gen_range(margin..side - margin);
    let cy = rng.gen_range(margin..side - margin);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    Placement { cx, cy, cos_t: theta.cos(), sin_t: theta.sin(), half }
}

fn rasterize(geom: &Geometry, place: &Placement) -> Vec<f64> {
    let mut mask = vec![0.0; IMAGE_SIDE * IMAGE_SIDE];
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let px = x as f64 + 0.5 - place.cx;
            let py = y as f64 + 0.5 - place.cy;
            let u = (px * place.cos_t + py * place.sin_t) / place.half;
            let v = (-px * place.sin_t + py * place.cos_t) / place.half;
            if contains(geom, u, v) {
                mask[y * IMAGE_SIDE + x] = 1.0;
            }
        }
    }
    mask
}

/// Standard normal via Box-Muller, driven by the episode RNG.
fn sample_gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

struct Appearance {
    freq: f64,
    lo: f64,
    hi: f64,
    tint: [f64; 3],
    dir: f64,
    phase: f64,
}

fn paint(img: &mut [f64], mask: &[f64], ap: &Appearance) {
    let side = IMAGE_SIDE as f64;
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let p = y * IMAGE_SIDE + x;
            if mask[p] == 0.0 {
                continue;
            }
            let t = (x as f64 * ap.dir.cos() + y as f64 * ap.dir.sin()) / side;
            let tex = ap.lo
                + (ap.hi - ap.lo) * (0.5 + 0.5 * (std::f64::consts::TAU * ap.freq * t + ap.phase).sin());
            for (c, &tint) in ap.tint.iter().enumerate() {
                img[c * plane + p] = tex * tint;
            }
        }
    }
}

/// Render one (image, mask) pair. Deterministic in (class, seed).
///
/// The geometry is redrawn up to 16 times until the foreground fraction
/// lands in [0.02, 0.6] and the mask survives nearest-resize to the
/// feature grid; otherwise the class is degenerate.
pub fn render(class: &ShapeClass, seed: u64) -> Result<(Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class.id as u64 ^ 0x5eed));
    let plane = IMAGE_SIDE * IMAGE_SIDE;

    let mut accepted = None;
    for _ in 0..RENDER_ATTEMPTS {
        let geom = draw_geometry(&mut rng, class);
        let place = draw_placement(&mut rng, class.scale_lo, class.scale_hi);
        let mask = rasterize(&geom, &place);
        let frac = mask.iter().sum::<f64>() / plane as f64;
        if !(FG_FRAC_MIN..=FG_FRAC_MAX).contains(&frac) {
            continue;
        }
        let t = Tensor::new(vec![IMAGE_SIDE, IMAGE_SIDE], mask);
        let coarse = resize_nearest(&t, FEATURE_SIDE, FEATURE_SIDE);
        if coarse.data.iter().sum::<f64>() < 1.0 {
            continue;
        }
        accepted = Some(t);
        break;
    }
    let mask = accepted.ok_or(Error::DegenerateGeometry { class_id: class.id })?;

    // Background: gentle gradient.
    let gdir = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut img = vec![0.0; 3 * plane];
    let side = IMAGE_SIDE as f64;
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let t = (x as f64 * gdir.cos() + y as f64 * gdir.sin()) / side;
            let base = 0.42 + 0.12 * (0.5 + 0.5 * t);
            for c in 0..3 {
                img[c * plane + y * IMAGE_SIDE + x] = base;
            }
        }
    }

    // Distractor objects: geometry always from other families; half of
    // them mimic the class's own appearance so foreground cannot be
    // identified by texture alone, the rest look arbitrary.
    let n_distract = rng.gen_range(1..=2);
    for _ in 0..n_distract {
        let mut fam_idx = rng.gen_range(0..FAMILIES.len());
        if FAMILIES[fam_idx] == class.family {
            fam_idx = (fam_idx + 1) % FAMILIES.len();
        }
        let fake = ShapeClass {
            id: class.id,
            family: FAMILIES[fam_idx],
            texture_freq: 0.0,
            intensity_lo: 0.0,
            intensity_hi: 0.0,
            tint: [1.0; 3],
            scale_lo: 0.15,
            scale_hi: 0.35,
            feature_lo: 2,
            feature_hi: 4,
        };
        let geom = draw_geometry(&mut rng, &fake);
        let place = draw_placement(&mut rng, fake.scale_lo, fake.scale_hi);
        let dmask = rasterize(&geom, &place);
        let camouflaged = rng.gen_bool(0.5);
        let ap = if camouflaged {
            let lo = (class.intensity_lo + rng.gen_range(-0.08..0.08)).clamp(0.05, 0.9);
            let band = class.intensity_hi - class.intensity_lo;
            Appearance {
                freq: class.texture_freq * rng.gen_range(0.8..1.25),
                lo,
                hi: (lo + band * rng.gen_range(0.85..1.15)).min(1.0),
                tint: [
                    (class.tint[0] * rng.gen_range(0.85..1.15)).clamp(0.2, 1.0),
                    (class.tint[1] * rng.gen_range(0.85..1.15)).clamp(0.2, 1.0),
                    (class.tint[2] * rng.gen_range(0.85..1.15)).clamp(0.2, 1.0),
                ],
                dir: rng.gen_range(0.0..std::f64::consts::TAU),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            }
        } else {
            let lo = rng.gen_range(0.15..0.55);
            Appearance {
                freq: rng.gen_range(2.0..9.0),
                lo,
                hi: (lo + rng.gen_range(0.25..0.45)).min(1.0),
                tint: [
                    rng.gen_range(0.4..1.0),
                    rng.gen_range(0.4..1.0),
                    rng.gen_range(0.4..1.0),
                ],
                dir: rng.gen_range(0.0..std::f64::consts::TAU),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            }
        };
        paint(&mut img, &dmask, &ap);
    }

    // Foreground texture.
    let ap = Appearance {
        freq: class.texture_freq,
        lo: class.intensity_lo,
        hi: class.intensity_hi,
        tint: class.tint,
        dir: rng.gen_range(0.0..std::f64::consts::TAU),
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
    };
    paint(&mut img, &mask.data, &ap);

    // Pixel noise, fixed scan order for determinism.
    for v in img.iter_mut() {
        *v = (*v + NOISE_SIGMA * sample_gauss(&mut rng)).clamp(0.0, 1.0);
    }

    Ok((Tensor::new(vec![3, IMAGE_SIDE, IMAGE_SIDE], img), mask))
}

// ── Mask topology helpers (used by tests and data checks) ────────────

/// Count background regions not connected to the border (holes).
pub fn count_enclosed_holes(mask: &Tensor) -> usize {
    let (h, w) = mask.dims2();
    let mut visited = vec![false; h * w];
    let mut stack = Vec::new();
    let flood = |start: usize, visited: &mut Vec<bool>, stack: &mut Vec<usize>| {
        stack.push(start);
        visited[start] = true;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if !visited[q] && mask.data[q] == 0.0 {
                    visited[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
    };
    // Flood the border-connected background first.
    for y in 0..h {
        for x in 0..w {
            let border = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let p = y * w + x;
            if border && mask.data[p] == 0.0 && !visited[p] {
                flood(p, &mut visited, &mut stack);
            }
        }
    }
    // Remaining background components are enclosed.
    let mut holes = 0;
    for p in 0..h * w {
        if mask.data[p] == 0.0 && !visited[p] {
            holes += 1;
            flood(p, &mut visited, &mut stack);
        }
    }
    holes
}

/// True if some row or column crosses the foreground in 2+ disjoint
/// runs: a witness for slots or holes.
pub fn has_multirun_scanline(mask: &Tensor) -> bool {
    let (h, w) = mask.dims2();
    let runs = |values: &mut dyn Iterator<Item = f64>| {
        let mut count = 0;
        let mut inside = false;
        for v in values {
            if v > 0.5 && !inside {
                count += 1;
                inside = true;
            } else if v <= 0.5 {
                inside = false;
            }
        }
        count
    };
    for y in 0..h {
        if runs(&mut (0..w).map(|x| mask.data[y * w + x])) >= 2 {
            return true;
        }
    }
    for x in 0..w {
        if runs(&mut (0..h).map(|y| mask.data[y * w + x])) >= 2 {
            return true;
        }
    }
    false
}

// ── PGM io ───────────────────────────────────────────────────────────

/// Write a binary mask as P5 PGM, maxval 255, foreground = 255.
pub fn write_mask_pgm(mask: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = mask.dims2();
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = mask.data.iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn read_mask_pgm(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut content = Vec::new();
    r.read_to_end(&mut content)?;
    parse_pgm(&content)
}

fn pgm_token(content: &[u8], pos: &mut usize) -> Result<String> {
    // Skip whitespace and `#` comments.
    loop {
        while *pos < content.len() && content[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < content.len() && content[*pos] == b'#' {
            while *pos < content.len() && content[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < content.len() && !content[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::MalformedHeader("truncated PGM header".into()));
    }
    Ok(String::from_utf8_lossy(&content[start..*pos]).into_owned())
}

fn parse_pgm(content: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    if pgm_token(content, &mut pos)? != "P5" {
        return Err(Error::MalformedHeader("not a P5 PGM".into()));
    }
    let w: usize = pgm_token(content, &mut pos)?
        .parse()
        .map_err(|_| Error::MalformedHeader("bad width".into()))?;
    let h: usize = pgm_token(content, &mut pos)?
        .parse()
        .map_err(|_| Error::MalformedHeader("bad height".into()))?;
    let maxval: usize = pgm_token(content, &mut pos)?
        .parse()
        .map_err(|_| Error::MalformedHeader("bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::MalformedHeader(format!("maxval {maxval}, want 255")));
    }
    pos += 1; // single whitespace after maxval
    if content.len() < pos + w * h {
        return Err(Error::MalformedHeader("truncated PGM payload".into()));
    }
    let data = content[pos..pos + w * h]
        .iter()
        .map(|&b| if b > 127 { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::new(vec![h, w], data))
}

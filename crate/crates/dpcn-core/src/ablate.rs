//! Ablation sweeps: component toggles, kernel size, kernel variants,
//! pooling variant, and the support-loss weight.

use std::fs;
use std::path::Path;

use log::error;

use crate::config::{Config, KernelSet, PoolVariant};
use crate::error::Result;
use crate::eval::evaluate;
use crate::synth::{derive_seed, fold_split, ClassLibrary, Phase};
use crate::trainer::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Components,
    KernelSize,
    KernelVariants,
    PoolVariant,
    Lambda,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "components" => Some(Self::Components),
            "kernel_size" => Some(Self::KernelSize),
            "kernel_variants" => Some(Self::KernelVariants),
            "pool_variant" => Some(Self::PoolVariant),
            "lambda" => Some(Self::Lambda),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Components => "components",
            Self::KernelSize => "kernel_size",
            Self::KernelVariants => "kernel_variants",
            Self::PoolVariant => "pool_variant",
            Self::Lambda => "lambda",
        }
    }
}

/// The labeled configurations one axis sweeps over.
pub fn axis_settings(axis: AblationAxis, base: &Config) -> Vec<(String, Config)> {
    let mut out = Vec::new();
    match axis {
        AblationAxis::Components => {
            for (sam, ffm, dcm) in [
                (false, false, false),
                (true, false, false),
                (false, true, false),
                (false, false, true),
                (true, true, false),
                (true, false, true),
                (false, true, true),
                (true, true, true),
            ] {
                let mut cfg = base.clone();
                cfg.sam_enabled = sam;
                cfg.ffm_enabled = ffm;
                cfg.kernels = if dcm { KernelSet::ALL } else { KernelSet::NONE };
                let mut parts = Vec::new();
                if sam {
                    parts.push("sam");
                }
                if ffm {
                    parts.push("ffm");
                }
                if dcm {
                    parts.push("dcm");
                }
                let label = if parts.is_empty() { "none".into() } else { parts.join("+") };
                out.push((label, cfg));
            }
        }
        AblationAxis::KernelSize => {
            for s in [3usize, 5, 7, 9] {
                let mut cfg = base.clone();
                cfg.kernel_size = s;
                out.push((s.to_string(), cfg));
            }
        }
        AblationAxis::KernelVariants => {
            for (label, set) in [
                ("none", KernelSet::NONE),
                ("s", KernelSet { v: false, h: false, s: true }),
                ("v", KernelSet { v: true, h: false, s: false }),
                ("v+h", KernelSet { v: true, h: true, s: false }),
                ("v+h+s", KernelSet::ALL),
            ] {
                let mut cfg = base.clone();
                cfg.kernels = set;
                out.push((label.to_string(), cfg));
            }
        }
        AblationAxis::PoolVariant => {
            for variant in [PoolVariant::Serial, PoolVariant::Parallel] {
                let mut cfg = base.clone();
                cfg.pool_variant = variant;
                out.push((variant.name().to_string(), cfg));
            }
        }
        AblationAxis::Lambda => {
            for l in [0.0, 0.1, 0.5, 1.0, 2.0] {
                let mut cfg = base.clone();
                cfg.lambda = l;
                out.push((l.to_string(), cfg));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub fold: usize,
    pub seed: u64,
    pub miou: f64,
    pub fb_iou: f64,
}

#[derive(Debug, Clone)]
pub struct AblateOptions {
    pub fold: usize,
    pub seeds: Vec<u64>,
    pub episodes: usize,
}

impl Default for AblateOptions {
    fn default() -> Self {
        AblateOptions { fold: 0, seeds: vec![0], episodes: 200 }
    }
}

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("setting,fold,seed,miou,fb_iou\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.setting, r.fold, r.seed, r.miou, r.fb_iou));
    }
    out
}

/// Train+evaluate one run per (setting, seed) with a shared seed set.
/// A failed run is logged and the sweep continues.
pub fn run_ablation(
    lib: &ClassLibrary,
    axis: AblationAxis,
    base: &Config,
    opts: &AblateOptions,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let split = fold_split(lib.classes.len(), opts.fold);
    let mut rows = Vec::new();
    for (label, setting) in axis_settings(axis, base) {
        for &seed in &opts.seeds {
            let mut cfg = setting.clone();
            cfg.seed = seed;
            let run = train(lib, &split, &cfg, None).and_then(|outcome| {
                evaluate(
                    lib,
                    &split,
                    &outcome.params,
                    &cfg,
                    Phase::Test,
                    opts.episodes,
                    cfg.shots,
                    derive_seed(seed, 0xE7A1),
                )
            });
            match run {
                Ok(report) => rows.push(AblationRow {
                    setting: label.clone(),
                    fold: opts.fold,
                    seed,
                    miou: report.miou,
                    fb_iou: report.fb_iou,
                }),
                Err(e) => error!("ablation setting '{label}' seed {seed} failed: {e}"),
            }
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("ablation_{}.csv", axis.name())), rows_to_csv(&rows))?;
        let means = setting_means(&rows);
        let svg = bar_chart_svg(&format!("mIoU by {}", axis.name()), &means);
        fs::write(dir.join(format!("ablation_{}.svg", axis.name())), svg)?;
    }
    Ok(rows)
}

/// Mean mIoU per setting, in first-appearance order.
pub fn setting_means(rows: &[AblationRow]) -> Vec<(String, f64)> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.setting) {
            order.push(r.setting.clone());
        }
    }
    order
        .into_iter()
        .map(|s| {
            let vals: Vec<f64> =
                rows.iter().filter(|r| r.setting == s).map(|r| r.miou).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            (s, mean)
        })
        .collect()
}

/// Self-contained SVG bar chart (no plotting dependency).
pub fn bar_chart_svg(title: &str, data: &[(String, f64)]) -> String {
    let bar_w = 56.0;
    let gap = 24.0;
    let left = 60.0;
    let bottom = 60.0;
    let top = 40.0;
    let plot_h = 220.0;
    let width = left + data.len() as f64 * (bar_w + gap) + 30.0;
    let height = top + plot_h + bottom;
    let max_v = data.iter().map(|(_, v)| *v).fold(0.0f64, f64::max).max(1e-9);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{left}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">{title}</text>\n"
    );
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        top + plot_h,
        top + plot_h,
        width - 10.0,
        top + plot_h
    ));
    for tick in 0..=4 {
        let frac = tick as f64 / 4.0;
        let y = top + plot_h * (1.0 - frac);
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"end\">{:.2}</text>\n",
            left - 6.0,
            y + 3.0,
            max_v * frac
        ));
    }
    for (i, (label, v)) in data.iter().enumerate() {
        let x = left + gap / 2.0 + i as f64 * (bar_w + gap);
        let h = plot_h * (v / max_v);
        let y = top + plot_h - h;
        svg.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w}\" height=\"{h:.1}\" \
             fill=\"#4878a8\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"middle\">{v:.3}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"middle\">{label}</text>\n",
            x + bar_w / 2.0,
            y - 4.0,
            x + bar_w / 2.0,
            top + plot_h + 16.0,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

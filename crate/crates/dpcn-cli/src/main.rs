//! Command-line interface: dataset generation, training, evaluation,
//! ablation sweeps, gradient checking, and tensor dumps.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dpcn_core::ablate::{run_ablation, AblateOptions, AblationAxis};
use dpcn_core::config::Config;
use dpcn_core::eval::evaluate_with;
use dpcn_core::io::{save_dpcnt, Dtype};
use dpcn_core::model::{bind_model, ModelParams, Trainability};
use dpcn_core::pipeline::{forward_episode, PinSession};
use dpcn_core::sam::run_sam;
use dpcn_core::synth::{fold_split, write_mask_pgm, ClassLibrary, Phase};
use dpcn_core::tape::GradTape;
use dpcn_core::trainer::{gradcheck_pipeline, train};

/// Class count of the built-in synthetic benchmark.
const BENCH_CLASSES: usize = 12;
/// Seed that defines the benchmark's class library.
const BENCH_LIB_SEED: u64 = 0xD47A;

fn benchmark_library() -> ClassLibrary {
    ClassLibrary::build(BENCH_CLASSES, BENCH_LIB_SEED)
}

#[derive(Parser)]
#[command(name = "dpcn", about = "Few-shot segmentation with dynamic prototype convolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Plain-text config file, `key = value` per line.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shots per episode.
    #[arg(long)]
    shots: Option<usize>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Run seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                Config::parse(&text)?
            }
            None => Config::default(),
        };
        if let Some(s) = self.shots {
            cfg.shots = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic class library to disk.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of classes to generate.
        #[arg(long, default_value_t = BENCH_CLASSES)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Renders per class.
        #[arg(long, default_value_t = 5)]
        per_class: usize,
    },
    /// Train on one fold of the synthetic benchmark.
    Train {
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on test episodes.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        /// Write predicted masks (thresholded at 0.5) as PGM files.
        #[arg(long)]
        dump_masks: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train+evaluate across one ablation axis, emitting CSV and SVG.
    Ablate {
        /// components | kernel_size | kernel_variants | pool_variant | lambda
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Number of seeds (0..n) per setting.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Test episodes per evaluation.
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of the full training gradient.
    Gradcheck {
        /// Sampled trainable scalars (spans all parameter groups).
        #[arg(long, default_value_t = 50)]
        params: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump intermediate tensors for one episode.
    Dump {
        /// Write the three activation maps and the initial pseudo mask.
        #[arg(long)]
        sam: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint to use; fresh weights when omitted.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn load_config_near_ckpt(args: &ConfigArgs, ckpt: &Path) -> Result<Config> {
    if args.config.is_some() {
        return args.build();
    }
    // Fall back to the config the training run wrote next to the
    // checkpoint, if any.
    let sibling = ckpt.parent().map(|d| d.join("config.txt"));
    match sibling {
        Some(path) if path.exists() => {
            let text = fs::read_to_string(&path)?;
            let mut cfg = Config::parse(&text)?;
            if let Some(s) = args.shots {
                cfg.shots = s;
            }
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            Ok(cfg)
        }
        _ => args.build(),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { out, classes, seed, per_class } => {
            let lib = ClassLibrary::build(classes, seed);
            fs::create_dir_all(&out)?;
            let mut manifest = String::new();
            for class in &lib.classes {
                for i in 0..per_class {
                    let (image, mask) =
                        dpcn_core::synth::render(class, seed.wrapping_add(i as u64))?;
                    let img_path = out.join(format!("class{:02}_{i}.dpcnt", class.id));
                    let mask_path = out.join(format!("class{:02}_{i}.pgm", class.id));
                    save_dpcnt(&img_path, &image, Dtype::F64)?;
                    write_mask_pgm(&mask, &mask_path)?;
                    manifest.push_str(&format!(
                        "{} {} {} {}\n",
                        class.id,
                        class.family.name(),
                        img_path.display(),
                        mask_path.display()
                    ));
                }
            }
            fs::write(out.join("manifest.txt"), manifest)?;
            println!("wrote {} items to {}", classes * per_class, out.display());
        }
        Command::Train { fold, out, cfg } => {
            let cfg = cfg.build()?;
            let lib = benchmark_library();
            let split = fold_split(lib.classes.len(), fold);
            let outcome = train(&lib, &split, &cfg, Some(&out))?;
            let last = outcome.log.last().expect("at least one step");
            println!(
                "trained fold {fold}: final loss {:.4}, final val mIoU {:.4}, artifacts in {}",
                last.loss_total,
                outcome.val.last().map(|(_, m)| *m).unwrap_or(0.0),
                out.display()
            );
        }
        Command::Eval { ckpt, fold, episodes, dump_masks, cfg } => {
            let cfg = load_config_near_ckpt(&cfg, &ckpt)?;
            let params = ModelParams::load_checkpoint(&ckpt)?;
            let lib = benchmark_library();
            let split = fold_split(lib.classes.len(), fold);
            if let Some(dir) = &dump_masks {
                fs::create_dir_all(dir)?;
            }
            let report = evaluate_with(
                &lib,
                &split,
                &params,
                &cfg,
                Phase::Test,
                episodes,
                cfg.shots,
                cfg.seed,
                |i, _ep, pred| {
                    if let Some(dir) = &dump_masks {
                        let _ = write_mask_pgm(pred, &dir.join(format!("pred_{i:04}.pgm")));
                    }
                },
            )?;
            println!("fingerprint: {}", report.fingerprint);
            for (class, (iou, count)) in &report.per_class {
                println!("class {class:2}: IoU {iou:.4} over {count} episodes");
            }
            println!("mIoU:   {:.4}", report.miou);
            println!("FB-IoU: {:.4}", report.fb_iou);
        }
        Command::Ablate { axis, out, fold, seeds, episodes, cfg } => {
            let axis = AblationAxis::parse(&axis)
                .with_context(|| format!("unknown ablation axis '{axis}'"))?;
            let base = cfg.build()?;
            let lib = benchmark_library();
            let opts =
                AblateOptions { fold, seeds: (0..seeds.max(1) as u64).collect(), episodes };
            let rows = run_ablation(&lib, axis, &base, &opts, Some(&out))?;
            println!("{} rows written to {}", rows.len(), out.display());
            for row in &rows {
                println!(
                    "{:<12} fold {} seed {}: mIoU {:.4}, FB-IoU {:.4}",
                    row.setting, row.fold, row.seed, row.miou, row.fb_iou
                );
            }
        }
        Command::Gradcheck { params, seed } => {
            let mut cfg = Config::default();
            cfg.seed = seed;
            let report = gradcheck_pipeline(&cfg, params)?;
            println!("checked {} parameters", report.checked);
            for (group, count, err) in &report.per_group {
                println!("  {group:<8} {count:3} scalars, worst rel err {err:.3e}");
            }
            println!("max rel err: {:.3e}", report.max_rel_err);
            if report.max_rel_err >= 1e-3 {
                bail!("gradient check failed");
            }
        }
        Command::Dump { sam, out, fold, seed, ckpt, cfg } => {
            let cfg = cfg.build()?;
            let lib = benchmark_library();
            let split = fold_split(lib.classes.len(), fold);
            let ep = lib.sample_episode(&split, Phase::Test, cfg.shots, seed)?;
            let params = match ckpt {
                Some(path) => ModelParams::load_checkpoint(&path)?,
                None => ModelParams::init(&cfg, cfg.seed),
            };
            fs::create_dir_all(&out)?;
            if sam {
                let mut tape = GradTape::new();
                let frozen = Trainability {
                    encoder_stage: [false; 3],
                    ffm: false,
                    kgen: false,
                    decoder: false,
                };
                let bound = bind_model(&mut tape, &params, &frozen);
                let s_img = tape.constant(ep.support[0].0.clone());
                let q_img = tape.constant(ep.query_image.clone());
                let (_, s_high) = dpcn_core::encoder::encode(&mut tape, &bound.enc, s_img)?;
                let (_, q_high) = dpcn_core::encoder::encode(&mut tape, &bound.enc, q_img)?;
                let act =
                    run_sam(tape.value(s_high), &ep.support[0].1, tape.value(q_high))?;
                for (i, map) in act.maps.iter().enumerate() {
                    save_dpcnt(&out.join(format!("m_act_{}.dpcnt", i + 1)), map, Dtype::F64)?;
                }
                save_dpcnt(&out.join("m_pse0.dpcnt"), &act.m_pse0, Dtype::F64)?;
                println!("wrote SAM maps to {}", out.display());
            } else {
                let mut tape = GradTape::new();
                let frozen = Trainability {
                    encoder_stage: [false; 3],
                    ffm: false,
                    kgen: false,
                    decoder: false,
                };
                let bound = bind_model(&mut tape, &params, &frozen);
                let mut pins = PinSession::off();
                let (branch, _, _) = forward_episode(&mut tape, &bound, &cfg, &ep, &mut pins)?;
                save_dpcnt(
                    &out.join("pred_full.dpcnt"),
                    tape.value(branch.pred_full),
                    Dtype::F64,
                )?;
                save_dpcnt(&out.join("x_out.dpcnt"), tape.value(branch.x_out), Dtype::F64)?;
                println!("wrote episode tensors to {}", out.display());
            }
        }
    }
    Ok(())
}

//! Command-line driver: data generation, the three training stages,
//! inference, extrapolation, evaluation and standalone blending.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use portraitfill::blend::{poisson_blend, BlendProblem};
use portraitfill::checkpoint::{load_checkpoint, save_checkpoint};
use portraitfill::completion::{build_extractor, train_completion, ParsingSource};
use portraitfill::data::{
    generate_synthetic_figures, load_dataset, load_image_png, load_mask_png, save_dataset,
    save_image_png, DatasetConfig,
};
use portraitfill::face::train_face;
use portraitfill::metrics::{frechet_distance, l1_error, psnr, ssim, EvalReport};
use portraitfill::parsing::train_parsing;
use portraitfill::pipeline::{
    extrapolate, load_run_config, run_inference, ExtrapDirection, PipelineCheckpoints, RunConfig,
    StageEvent,
};
use portraitfill::{Error, Result};

#[derive(Parser)]
#[command(
    name = "portraitfill",
    version,
    about = "Structure-guided portrait completion"
)]
struct Cli {
    /// Run configuration (TOML); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic articulated-figure dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train the parsing network.
    TrainParse {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the completion network and its critics.
    TrainComplete {
        #[arg(long)]
        data: PathBuf,
        /// Output directory for generator + discriminator checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Frozen parsing checkpoint; ground-truth labels are used if omitted.
        #[arg(long)]
        parse_ckpt: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the face refinement network against a frozen generator.
    TrainFace {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        gen_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Complete a masked image.
    Infer {
        #[arg(long)]
        image: PathBuf,
        /// 8-bit mask PNG, nonzero = unknown.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        parse_ckpt: PathBuf,
        #[arg(long)]
        gen_ckpt: PathBuf,
        #[arg(long)]
        face_ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extend the canvas beyond the original border.
    Extrapolate {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum)]
        direction: Direction,
        #[arg(long)]
        parse_ckpt: PathBuf,
        #[arg(long)]
        gen_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare result images against ground truth.
    Eval {
        /// Directory of completed PNGs.
        #[arg(long)]
        results: PathBuf,
        /// Directory of ground-truth PNGs with matching file names.
        #[arg(long)]
        truth: PathBuf,
        /// Optional directory of hole-mask PNGs with matching names.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Standalone Poisson blend.
    Blend {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    Down,
    Up,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version are successful exits; anything else is usage
            let benign = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if benign {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    match cli.command {
        Command::GenData { out, count, size } => {
            let samples =
                generate_synthetic_figures(count, cfg.seed, (size, size), cfg.dataset.num_classes)?;
            save_dataset(&out, &samples)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::TrainParse { data, out, epochs } => {
            let dataset = load_dataset(&DatasetConfig {
                root: data,
                ..cfg.dataset.clone()
            })?;
            let epochs = epochs.unwrap_or(cfg.epochs);
            let ckpt = train_parsing(
                &dataset,
                &cfg.parsing,
                cfg.lr_parse,
                cfg.momentum,
                epochs,
                cfg.seed,
            )?;
            save_checkpoint(&ckpt, &out)?;
            println!(
                "trained parsing net: {} epochs, final loss {:.6}",
                epochs,
                ckpt.loss_trace.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::TrainComplete {
            data,
            out,
            parse_ckpt,
            epochs,
        } => {
            let dataset = load_dataset(&DatasetConfig {
                root: data,
                ..cfg.dataset.clone()
            })?;
            let epochs = epochs.unwrap_or(cfg.epochs);
            let parse = parse_ckpt.map(|p| load_checkpoint(&p)).transpose()?;
            let source = match &parse {
                Some(c) => ParsingSource::Frozen(c),
                None => ParsingSource::GroundTruth,
            };
            let trained = train_completion(
                &dataset,
                source,
                &cfg.generator,
                &cfg.perception,
                &cfg.loss,
                cfg.lr_complete,
                epochs,
                cfg.seed,
            )?;
            std::fs::create_dir_all(&out)?;
            save_checkpoint(&trained.generator, &out.join("generator.ckpt"))?;
            save_checkpoint(&trained.disc_global, &out.join("disc_global.ckpt"))?;
            if let Some(dl) = &trained.disc_local {
                save_checkpoint(dl, &out.join("disc_local.ckpt"))?;
            }
            println!(
                "trained completion net: {} epochs, final loss {:.6}, local critic updates {}",
                epochs,
                trained
                    .generator
                    .loss_trace
                    .last()
                    .copied()
                    .unwrap_or(f64::NAN),
                trained.local_updates
            );
        }
        Command::TrainFace {
            data,
            gen_ckpt,
            out,
            epochs,
        } => {
            let dataset = load_dataset(&DatasetConfig {
                root: data,
                ..cfg.dataset.clone()
            })?;
            let frozen_g = load_checkpoint(&gen_ckpt)?;
            let epochs = epochs.unwrap_or(cfg.epochs);
            let trained = train_face(
                &dataset,
                &frozen_g,
                &cfg.face,
                &cfg.perception,
                cfg.lr_face,
                epochs,
                cfg.seed,
            )?;
            save_checkpoint(&trained.face, &out)?;
            println!(
                "trained face net: {} epochs, final loss {:.6}",
                epochs,
                trained.face.loss_trace.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Infer {
            image,
            mask,
            parse_ckpt,
            gen_ckpt,
            face_ckpt,
            out,
        } => {
            let img = load_image_png(&image)?;
            let m = load_mask_png(&mask)?;
            let ckpts = load_pipeline(&parse_ckpt, &gen_ckpt, face_ckpt.as_deref())?;
            let outcome = run_inference(&img, &m, &ckpts, cfg.dataset.mean_pixel)?;
            for stage in &outcome.stages {
                if let StageEvent::FaceSkipped { reason } = stage {
                    eprintln!("notice: face refinement skipped ({reason})");
                }
            }
            save_image_png(&out, &outcome.image)?;
            println!("wrote {}", out.display());
        }
        Command::Extrapolate {
            image,
            direction,
            parse_ckpt,
            gen_ckpt,
            out,
        } => {
            let img = load_image_png(&image)?;
            let ckpts = load_pipeline(&parse_ckpt, &gen_ckpt, None)?;
            let dir = match direction {
                Direction::Down => ExtrapDirection::Down,
                Direction::Up => ExtrapDirection::Up,
            };
            let outcome = extrapolate(&img, dir, &ckpts, cfg.dataset.mean_pixel, cfg.seed)?;
            save_image_png(&out, &outcome.image)?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            results,
            truth,
            masks,
            out,
        } => {
            let report = evaluate(&results, &truth, masks.as_deref(), &cfg)?;
            std::fs::write(&out, report.to_text())?;
            println!("wrote {}", out.display());
        }
        Command::Blend {
            source,
            target,
            mask,
            out,
        } => {
            let src = load_image_png(&source)?;
            let tgt = load_image_png(&target)?;
            let m = load_mask_png(&mask)?;
            let problem = BlendProblem::new(src, tgt, m.mask);
            let blended = poisson_blend(&problem)?;
            save_image_png(&out, &blended)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn load_pipeline(
    parse_ckpt: &std::path::Path,
    gen_ckpt: &std::path::Path,
    face_ckpt: Option<&std::path::Path>,
) -> Result<PipelineCheckpoints> {
    Ok(PipelineCheckpoints {
        parsing: load_checkpoint(parse_ckpt)?,
        generator: load_checkpoint(gen_ckpt)?,
        face: face_ckpt.map(load_checkpoint).transpose()?,
    })
}

fn evaluate(
    results: &std::path::Path,
    truth: &std::path::Path,
    masks: Option<&std::path::Path>,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let mut names: Vec<String> = std::fs::read_dir(results)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Validation(format!(
            "no result PNGs in {}",
            results.display()
        )));
    }
    let extractor = build_extractor(&cfg.perception)?;
    let mut report = EvalReport::default();
    let mut feats_a: Vec<Vec<f64>> = Vec::new();
    let mut feats_b: Vec<Vec<f64>> = Vec::new();
    for name in &names {
        let a = load_image_png(&results.join(name))?;
        let b = load_image_png(&truth.join(name))?;
        let hole = masks
            .map(|dir| load_mask_png(&dir.join(name)))
            .transpose()?;
        report.l1_entire.push(l1_error(&a, &b, None)?);
        report.psnr_entire.push(psnr(&a, &b, None)?);
        report.ssim_entire.push(ssim(&a, &b)?);
        if let Some(h) = &hole {
            report.l1_hole.push(l1_error(&a, &b, Some(&h.mask))?);
            report.psnr_hole.push(psnr(&a, &b, Some(&h.mask))?);
        }
        feats_a.push(pooled_features(&extractor, &a));
        feats_b.push(pooled_features(&extractor, &b));
    }
    report.sample_count = names.len();
    if names.len() >= 2 {
        let d = feats_a[0].len();
        let fa = Array2::from_shape_vec((feats_a.len(), d), feats_a.concat()).unwrap();
        let fb = Array2::from_shape_vec((feats_b.len(), d), feats_b.concat()).unwrap();
        report.fid = Some(frechet_distance(&fa, &fb)?);
    }
    Ok(report)
}

/// Per-channel spatial means of every extractor tap, concatenated.
fn pooled_features(
    extractor: &portraitfill::completion::Extractor,
    image: &ndarray::Array3<f64>,
) -> Vec<f64> {
    let mut out = Vec::new();
    for tap in extractor.features(image) {
        let c = tap.shape()[0];
        let n = (tap.len() / c) as f64;
        for plane in tap.axis_iter(ndarray::Axis(0)) {
            out.push(plane.sum() / n);
        }
    }
    out
}

//! `coftad`: few-shot anomaly detection runs from a TOML config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use coftad::config::{validate_config, RunConfig};
use coftad::data::{synth_dataset, DefectFamily, FewShotSplit, ShapeFamily, SynthSpec, SPLIT_FILE};
use coftad::density::{score_images, DensityModel, ScorerKind};
use coftad::encoder::checkpoint;
use coftad::eval::{check_compatible, evaluate};
use coftad::image::Image;
use coftad::pipeline::{
    density_stage, eval_options, prepare_split, run_pipeline, train_stage, CONFIG_ECHO_FILE, DENSITY_FILE,
    TRAIN_DIR,
};
use coftad::{Error, Result};

#[derive(Parser)]
#[command(name = "coftad", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split, train, fit the density and evaluate in one go.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw the split and fine-tune; writes `split.json` and `train/`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the Gaussian density on augmented few-shot embeddings.
    FitDensity {
        #[arg(long)]
        config: PathBuf,
        /// Split whose training images are the few-shot set.
        #[arg(long)]
        split: PathBuf,
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print `id,score` for each image.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        density: PathBuf,
        #[arg(long, value_enum, default_value_t = Scorer::Gaussian)]
        scorer: Scorer,
        #[arg(long, default_value_t = 5)]
        k_nn: usize,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Evaluate a trained run. With `--run`, every input is read from that
    /// run directory and the report reproduces the original.
    Eval {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, required_unless_present = "run")]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "run")]
        split: Option<PathBuf>,
        #[arg(long, required_unless_present = "run")]
        checkpoint: Option<PathBuf>,
        #[arg(long, required_unless_present = "run")]
        density: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the synthetic benchmark.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 105)]
        n_normal: usize,
        #[arg(long, default_value_t = 100)]
        n_abnormal: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, value_enum, default_value_t = Shape::Circle)]
        shape: Shape,
        #[arg(long, value_enum, default_value_t = Defect::Paste)]
        defect: Defect,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List config problems; exits 2 if there are any.
    Validate {
        #[arg(long)]
        config: PathBuf,
        /// Print diagnostics as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scorer {
    Gaussian,
    Knn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, ValueEnum)]
enum Defect {
    Paste,
    Scar,
    Blur,
    Mixed,
}

fn load_density(path: &Path) -> Result<DensityModel> {
    DensityModel::load(&if path.is_dir() { path.join(DENSITY_FILE) } else { path.to_path_buf() })
}

fn split_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(SPLIT_FILE)
    } else {
        path.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let report = run_pipeline(&cfg, &out)?;
            println!("auroc {:.4}", report.auroc);
        }
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            cfg.validate()?;
            let split = prepare_split(&cfg, &out)?;
            train_stage(&cfg, &split.load_train()?, &out.join(TRAIN_DIR))?;
        }
        Command::FitDensity {
            config,
            split,
            checkpoint: ckpt,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            cfg.validate()?;
            let split = FewShotSplit::load(&split_path(&split))?;
            let (net, _) = checkpoint::load(&ckpt)?;
            let model = density_stage(&cfg, &net, &split.load_train()?)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            model.save(&out.join(DENSITY_FILE))?;
        }
        Command::Score {
            checkpoint: ckpt,
            density,
            scorer,
            k_nn,
            images,
        } => {
            let (net, _) = checkpoint::load(&ckpt)?;
            let model = load_density(&density)?;
            check_compatible(&net, &model)?;
            let imgs = images.iter().map(|p| Image::load(p)).collect::<Result<Vec<_>>>()?;
            let ids: Vec<String> = images.iter().map(|p| p.display().to_string()).collect();
            let scorer = match scorer {
                Scorer::Gaussian => ScorerKind::Gaussian,
                Scorer::Knn => ScorerKind::Knn,
            };
            println!("id,score");
            for r in score_images(&model, &net, &imgs, &ids, scorer, k_nn)? {
                println!("{},{}", r.sample_id, r.raw_score);
            }
        }
        Command::Eval {
            run,
            config,
            split,
            checkpoint: ckpt,
            density,
            out,
        } => {
            let pick = |given: Option<PathBuf>, default: &str| -> PathBuf {
                given.unwrap_or_else(|| run.as_ref().expect("clap enforces --run").join(default))
            };
            let config = pick(config, CONFIG_ECHO_FILE);
            let cfg = if run.is_some() {
                // the echoed config is already resolved and seeded
                let text = std::fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
                RunConfig::from_toml(&text)?
            } else {
                RunConfig::load(&config)?
            };
            let split = FewShotSplit::load(&split_path(&pick(split, SPLIT_FILE)))?;
            let (net, _) = checkpoint::load(&pick(ckpt, TRAIN_DIR))?;
            let model = load_density(&pick(density, DENSITY_FILE))?;
            let report = evaluate(&net, &model, &split, &eval_options(&cfg)?, &out)?;
            println!("auroc {:.4}", report.auroc);
        }
        Command::Synth {
            out,
            n_normal,
            n_abnormal,
            image_size,
            shape,
            defect,
            seed,
        } => {
            let spec = SynthSpec {
                n_normal,
                n_abnormal,
                image_size,
                shape: match shape {
                    Shape::Circle => ShapeFamily::Circle,
                    Shape::Square => ShapeFamily::Square,
                    Shape::Triangle => ShapeFamily::Triangle,
                },
                defect: match defect {
                    Defect::Paste => DefectFamily::Paste,
                    Defect::Scar => DefectFamily::Scar,
                    Defect::Blur => DefectFamily::Blur,
                    Defect::Mixed => DefectFamily::Mixed,
                },
                seed,
            };
            let (manifest, _) = synth_dataset(&spec, &out)?;
            println!("wrote {} images to {}", manifest.entries.len(), out.display());
        }
        Command::Validate { config, json } => {
            let diags = validate_config(&config)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&diags).map_err(Error::from)?);
            } else {
                for d in &diags {
                    println!("{}: {d}", config.display());
                }
            }
            if !diags.is_empty() {
                return Ok(ExitCode::from(2));
            }
            if !json {
                println!("{}: ok", config.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stylize_atlas::embedding::build_backend;
use stylize_atlas::pipeline::{cmd_decompose, cmd_eval, cmd_render, cmd_stylize, write_video, Outcome, Overrides, ProjectConfig};
use stylize_atlas::synthetic::MovingSquare;
use stylize_atlas::{Error, LossTerm};

/// Text-driven stylization of the foreground object of a video.
#[derive(Parser)]
#[command(name = "stylize-atlas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the layered atlas decomposition of a video.
    Decompose(RunArgs),
    /// Fine-tune the editing atlas toward the target texts.
    Stylize(RunArgs),
    /// Render the stylized video into `<out>/render`.
    Render(RunArgs),
    /// Score the rendered video and write `<out>/eval_report.json`.
    Eval(RunArgs),
    /// Print the default configuration as TOML.
    Config,
    /// Write a synthetic moving-square video with its masks.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Project configuration (TOML); defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Directory of `frame_NNNNN.png` files.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Directory of `mask_NNNNN.png` files (defaults to the frames directory).
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated loss terms to switch off: local, global, temporal, sparsity.
    #[arg(long, value_delimiter = ',', value_parser = parse_term)]
    disable: Option<Vec<LossTerm>>,
    #[arg(long)]
    n_prefixes_global: Option<usize>,
    #[arg(long)]
    n_prefixes_local: Option<usize>,
    /// Seed for pretraining, fine-tuning and view sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Recompute outputs that already exist.
    #[arg(long)]
    overwrite: bool,
    #[arg(long)]
    global_text: Option<String>,
    #[arg(long)]
    local_text: Option<String>,
    /// Fine-tuning iterations.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    num_frames: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 96)]
    width: usize,
}

fn parse_term(name: &str) -> Result<LossTerm, String> {
    name.trim().parse::<LossTerm>().map_err(|e| e.to_string())
}

impl RunArgs {
    fn load(&self) -> Result<ProjectConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ProjectConfig::load(path)?,
            None => ProjectConfig::default(),
        };
        cfg.apply(&Overrides {
            disable: self.disable.clone(),
            n_prefixes_global: self.n_prefixes_global,
            n_prefixes_local: self.n_prefixes_local,
            seed: self.seed,
            frames_dir: self.frames.clone(),
            masks_dir: self.masks.clone(),
            output_dir: self.out.clone(),
            overwrite: self.overwrite.then_some(true),
        });
        if let Some(t) = &self.global_text {
            cfg.text.global = t.clone();
        }
        if let Some(t) = &self.local_text {
            cfg.text.local = t.clone();
        }
        if let Some(n) = self.iterations {
            cfg.train.iterations = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn skipped<T>(outcome: &Outcome<T>) -> bool {
    if let Outcome::Skipped(path) = outcome {
        println!("{} exists; skipping (pass --overwrite to recompute)", path.display());
        return true;
    }
    false
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Decompose(args) => {
            let cfg = args.load()?;
            let outcome = cmd_decompose(&cfg)?;
            if let Outcome::Done(r) = &outcome {
                println!(
                    "reconstruction PSNR {:.2} dB after {} iterations; wrote {}",
                    r.psnr,
                    r.iterations,
                    cfg.pretrained_checkpoint().display()
                );
            }
            skipped(&outcome);
        }
        Command::Stylize(args) => {
            let cfg = args.load()?;
            let backend = build_backend(&cfg.embedding)?;
            let outcome = cmd_stylize(&cfg, backend.as_ref())?;
            if let Outcome::Done(s) = &outcome {
                if let Some(r) = &s.last_record {
                    println!("iteration {}: total loss {:.5}", r.iteration, r.total);
                }
                println!("wrote {}", cfg.stylized_checkpoint().display());
            }
            skipped(&outcome);
        }
        Command::Render(args) => {
            let cfg = args.load()?;
            let outcome = cmd_render(&cfg)?;
            if let Outcome::Done(n) = &outcome {
                println!("rendered {n} frames into {}", cfg.render_dir().display());
            }
            skipped(&outcome);
        }
        Command::Eval(args) => {
            let cfg = args.load()?;
            let backend = build_backend(&cfg.embedding)?;
            let report = cmd_eval(&cfg, backend.as_ref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Config => print!("{}", ProjectConfig::default().to_toml_string()?),
        Command::Synth(args) => {
            // the default square and path, scaled to the requested frame size
            let base = MovingSquare::default();
            let (sy, sx) = (args.height as f64 / base.height as f64, args.width as f64 / base.width as f64);
            let video = MovingSquare {
                num_frames: args.num_frames,
                height: args.height,
                width: args.width,
                square_size: base.square_size * sy.min(sx),
                travel: (base.travel.0 * sx, base.travel.1 * sy),
            };
            write_video(&args.out, &video.generate()?, true)?;
            println!("wrote {} frames and masks to {}", args.num_frames, args.out.display());
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidInput(_) => 2,
        Error::Ingestion { .. } | Error::Image { .. } | Error::Io { .. } | Error::Missing { .. } => 3,
        Error::Checkpoint { .. } => 4,
        Error::Backend(_) => 5,
        Error::NotConverged { .. } | Error::Divergence { .. } | Error::NoObject(_) => 6,
        Error::Json(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

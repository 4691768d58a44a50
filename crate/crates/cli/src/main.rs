//! `lesion`: corpus generation, VAE and denoiser training, inpainting,
//! metrics and the segmentation benchmark.
//!
//! Exit codes: 0 success, 1 oracle drift or internal failure, 2 config or
//! usage error, 3 I/O error, 4 missing prerequisite artifact, 5 every
//! benchmark cell failed.

mod commands;
mod config;
mod oracle;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::CliError;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "lesion", version, about = "Mask-conditioned latent diffusion inpainting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Config file (`[section]` headers, `key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set sample.steps=20`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Root seed (`general.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Vae,
    Diffusion,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural corpus with a train/test manifest.
    Synth {
        #[arg(long)]
        style: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the VAE or the inpainting denoiser.
    Train {
        stage: Stage,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Frozen VAE checkpoint (diffusion stage).
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Inpaint lesion content into a benign image.
    Inpaint {
        #[arg(long)]
        benign: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        diffusion: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        composite: bool,
        #[arg(long)]
        sampler: Option<String>,
        /// Output PNG; the mask is copied beside it as `<stem>_mask.png`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// FID and KID between two image directories.
    Eval {
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long = "gen")]
        generated: Option<PathBuf>,
        /// CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Segmentation benchmark over augmentation strategies.
    Bench {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        diffusion: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        real_counts: Option<String>,
        #[arg(long)]
        strategies: Option<String>,
        #[arg(long)]
        seeds: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// List every config key with its default.
    Defaults,
    #[command(hide = true)]
    Oracle {
        #[arg(long, default_value = "fixtures")]
        dir: PathBuf,
        /// Regenerate the golden files instead of checking them.
        #[arg(long)]
        write: bool,
    },
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &common.config {
        cfg.merge_file(p)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects SECTION.KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = common.seed {
        cfg.set("general.seed", &s.to_string())?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn setup(common: &Common) -> Result<(), CliError> {
    let level = if common.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot set thread count: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            style,
            n,
            size,
            out,
            common,
        } => {
            setup(&common)?;
            let cfg = resolve(
                &common,
                &[
                    ("synth.style", style),
                    ("synth.n", n.map(|v| v.to_string())),
                    ("general.image_size", size.map(|v| v.to_string())),
                    ("paths.out", path_str(&out)),
                ],
            )?;
            commands::synth(&cfg)
        }
        Command::Train {
            stage,
            corpus,
            vae,
            out,
            steps,
            resume,
            common,
        } => {
            setup(&common)?;
            let steps_key = match stage {
                Stage::Vae => "vae.steps",
                Stage::Diffusion => "diffusion.steps",
            };
            let cfg = resolve(
                &common,
                &[
                    ("paths.corpus", path_str(&corpus)),
                    ("paths.vae", path_str(&vae)),
                    ("paths.out", path_str(&out)),
                    (steps_key, steps.map(|v| v.to_string())),
                ],
            )?;
            match stage {
                Stage::Vae => commands::train_vae(&cfg, resume),
                Stage::Diffusion => commands::train_diffusion(&cfg, resume),
            }
        }
        Command::Inpaint {
            benign,
            reference,
            mask,
            vae,
            diffusion,
            steps,
            guidance,
            composite,
            sampler,
            out,
            common,
        } => {
            setup(&common)?;
            let cfg = resolve(
                &common,
                &[
                    ("inpaint.benign", path_str(&benign)),
                    ("inpaint.reference", path_str(&reference)),
                    ("inpaint.mask", path_str(&mask)),
                    ("paths.vae", path_str(&vae)),
                    ("paths.diffusion", path_str(&diffusion)),
                    ("sample.steps", steps.map(|v| v.to_string())),
                    ("sample.guidance", guidance.map(|v| v.to_string())),
                    ("sample.composite", composite.then(|| "true".to_string())),
                    ("sample.sampler", sampler),
                    ("sample.seed", common.seed.map(|v| v.to_string())),
                    ("paths.out", path_str(&out)),
                ],
            )?;
            commands::inpaint(&cfg)
        }
        Command::Eval {
            real,
            generated,
            out,
            common,
        } => {
            setup(&common)?;
            let cfg = resolve(
                &common,
                &[
                    ("eval.real", path_str(&real)),
                    ("eval.generated", path_str(&generated)),
                    ("paths.out", path_str(&out)),
                ],
            )?;
            commands::eval(&cfg)
        }
        Command::Bench {
            corpus,
            vae,
            diffusion,
            out,
            real_counts,
            strategies,
            seeds,
            common,
        } => {
            setup(&common)?;
            let cfg = resolve(
                &common,
                &[
                    ("paths.corpus", path_str(&corpus)),
                    ("paths.vae", path_str(&vae)),
                    ("paths.diffusion", path_str(&diffusion)),
                    ("paths.out", path_str(&out)),
                    ("bench.real_counts", real_counts),
                    ("bench.strategies", strategies),
                    ("bench.seeds", seeds),
                ],
            )?;
            commands::bench(&cfg)
        }
        Command::Defaults => {
            print!("{}", RunConfig::describe());
            Ok(())
        }
        Command::Oracle { dir, write } => oracle::run(&dir, write),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

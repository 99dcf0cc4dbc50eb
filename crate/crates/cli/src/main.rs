//! `refdiff` — reference-guided toy diffusion pipeline driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error, 3 numerical
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use refdiff_cli::commands::{self, CmdError, GenMode, ReproduceArgs, TrainArgs, TrainTarget};
use refdiff_cli::config::RunConfig;
use refdiff_core::aligner::LossMode;

#[derive(Parser)]
#[command(name = "refdiff", version, about = "Dual text+image conditioning for a toy latent diffusion model", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (`key = value` lines); flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set alpha=0.5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow::anyhow!("--set wants KEY=VALUE, got {kv:?}"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic image-caption dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Dataset seed (overrides config).
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset size (overrides config).
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a pipeline component.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Component: encoders, denoiser, or aligner.
        component: String,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Encoder checkpoint (needed for denoiser/aligner).
        #[arg(long)]
        encoders: Option<PathBuf>,
        /// Output checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Aligner objective: both, infonce, or attn.
        #[arg(long, default_value = "both")]
        loss: String,
        /// Epoch count (overrides config for the chosen component).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate one image from a prompt, optionally guided by a reference.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        prompt: String,
        /// Reference image (P6 pixmap); required for fusion modes and
        /// test-time refinement.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Conditioning mode: text, naive, concat, or xattn.
        #[arg(long, default_value = "concat")]
        mode: String,
        /// Fusion strength override.
        #[arg(long)]
        alpha: Option<f64>,
        /// Enable test-time prompt/noise refinement.
        #[arg(long)]
        pno: bool,
        /// Refinement step count override.
        #[arg(long)]
        pno_steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        encoders: PathBuf,
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        aligner: Option<PathBuf>,
    },
    /// Compute metrics over a run directory of generations.
    Evaluate {
        /// Run directory with generated images and manifests.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        encoders: PathBuf,
        /// Report output file.
        #[arg(long)]
        out: PathBuf,
        /// Evaluate even if the run mixes config hashes.
        #[arg(long)]
        force: bool,
    },
    /// Run the gradient-check and invariant battery.
    Selfcheck,
    /// Full chain: data, training, the four-mode grid, evaluation.
    Reproduce {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// (prompt, reference) pairs drawn from the test split.
        #[arg(long, default_value_t = 50)]
        pairs: usize,
        /// Initial-noise seeds per pair.
        #[arg(long, default_value_t = 3)]
        gen_seeds: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints its own message; help/version are success
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn build_cfg(args: &ConfigArgs) -> Result<RunConfig, CmdError> {
    args.build().map_err(CmdError::Validation)
}

fn run(cli: Cli) -> Result<(), CmdError> {
    match cli.command {
        Command::GenData { cfg, out, seed, size } => {
            let mut cfg = build_cfg(&cfg)?;
            if let Some(s) = seed {
                cfg.dataset_seed = s;
            }
            if let Some(n) = size {
                cfg.dataset_size = n;
            }
            commands::gen_data(&cfg, &out)
        }
        Command::Train {
            cfg,
            component,
            data,
            encoders,
            out,
            loss,
            epochs,
        } => {
            let mut cfg = build_cfg(&cfg)?;
            let target = match component.as_str() {
                "encoders" => TrainTarget::Encoders,
                "denoiser" => TrainTarget::Denoiser,
                "aligner" => TrainTarget::Aligner,
                other => {
                    return Err(CmdError::Usage(anyhow::anyhow!(
                        "unknown component {other:?}; expected encoders, denoiser, or aligner"
                    )))
                }
            };
            if let Some(n) = epochs {
                match target {
                    TrainTarget::Encoders => cfg.enc_epochs = n,
                    TrainTarget::Denoiser => cfg.den_epochs = n,
                    TrainTarget::Aligner => cfg.align_epochs = n,
                }
            }
            let loss = LossMode::parse(&loss).map_err(|e| CmdError::Usage(e.into()))?;
            commands::train(
                &cfg,
                &TrainArgs {
                    target,
                    data_dir: &data,
                    encoders_dir: encoders.as_deref(),
                    out: &out,
                    loss,
                },
            )
        }
        Command::Generate {
            cfg,
            prompt,
            reference,
            mode,
            alpha,
            pno,
            pno_steps,
            seed,
            out,
            encoders,
            denoiser,
            aligner,
        } => {
            let mut cfg = build_cfg(&cfg)?;
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            if let Some(n) = pno_steps {
                cfg.pno_steps = n;
            }
            let mode = GenMode::parse(&mode).map_err(CmdError::Usage)?;
            commands::generate_cmd(
                &cfg,
                &prompt,
                reference.as_deref(),
                mode,
                pno,
                seed,
                &out,
                &encoders,
                &denoiser,
                aligner.as_deref(),
            )
        }
        Command::Evaluate {
            run,
            encoders,
            out,
            force,
        } => commands::evaluate_cmd(&run, &encoders, &out, force),
        Command::Selfcheck => commands::selfcheck_cmd(),
        Command::Reproduce {
            cfg,
            out,
            pairs,
            gen_seeds,
        } => {
            let cfg = build_cfg(&cfg)?;
            commands::reproduce_cmd(&cfg, &ReproduceArgs {
                out,
                pairs,
                gen_seeds,
            })
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use ltcf_cli::commands::{self, EnhanceArgs};
use ltcf_cli::config::{self, Overrides, RunConfig};
use ltcf_cli::report;
use ltcf_core::model::Branches;
use ltcf_core::LtcfNet;

#[derive(Parser, Debug)]
#[command(
    name = "ltcf",
    version,
    about = "Low-light image enhancement with LTCF-Net"
)]
struct Cli {
    /// More log output (repeat for debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and write checkpoints, history and metrics
    Train {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Enhance one image or every image in a directory
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image file or directory
        input: PathBuf,
        /// Output directory [default: $LTCF_OUT/enhanced]
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        tile: usize,
        #[arg(long, default_value_t = 32)]
        overlap: usize,
        /// Also write low | enhanced [| reference] grids under preview/
        #[arg(long)]
        preview: bool,
        /// Ground-truth directory with matching file names for previews
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Report PSNR and SSIM per image and on average
    Eval {
        /// Model to evaluate
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        /// Score the low-light inputs as they are
        #[arg(long, conflicts_with = "checkpoint")]
        baseline: bool,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Print parameter and FLOP counts per module
    Inspect {
        /// Read the architecture from a checkpoint instead of the flags
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Also write the table as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        run: RunFlags,
    },
}

#[derive(Args, Debug, Default)]
struct RunFlags {
    /// TOML run configuration; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// lab, yuv or both
    #[arg(long)]
    branches: Option<Branches>,
    #[arg(long)]
    no_fbp: bool,
    #[arg(long)]
    no_msef: bool,
    /// One denoiser shared by all chroma planes
    #[arg(long)]
    share_cd: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    /// Use N generated pairs instead of a dataset directory
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    /// Dataset root holding low/ and high/
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    /// Loss weights a1,a2,a3,a4,a5
    #[arg(long, value_parser = config::parse_alphas)]
    alphas: Option<[f64; 5]>,
    /// Output directory [default: $LTCF_OUT or ./ltcf-out]
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunFlags {
    fn resolve(&self) -> Result<RunConfig> {
        let o = Overrides {
            seed: self.seed,
            branches: self.branches,
            no_fbp: self.no_fbp,
            no_msef: self.no_msef,
            share_cd: self.share_cd,
            epochs: self.epochs,
            batch: self.batch,
            patch: self.patch,
            synthetic: self.synthetic,
            data: self.data.clone(),
            lr: self.lr,
            alphas: self.alphas,
            out: self.out.clone(),
        };
        RunConfig::resolve(self.config.as_deref(), &o)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run } => {
            let cfg = run.resolve()?;
            let outcome = commands::train(&cfg)?;
            print!("{}", outcome.eval.table());
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        Command::Enhance {
            checkpoint,
            input,
            out,
            tile,
            overlap,
            preview,
            reference,
        } => {
            let args = EnhanceArgs {
                checkpoint,
                input,
                out_dir: out.unwrap_or_else(|| config::default_out_root().join("enhanced")),
                tile,
                overlap,
                preview: preview || reference.is_some(),
                reference,
            };
            let summary = commands::enhance(&args)?;
            for p in &summary.written {
                println!("{}", p.display());
            }
            if !summary.failed.is_empty() {
                let issues = summary
                    .failed
                    .into_iter()
                    .map(|(path, reason)| ltcf_core::FileIssue { path, reason })
                    .collect();
                bail!(ltcf_core::Error::Dataset(issues));
            }
        }
        Command::Eval {
            checkpoint,
            baseline,
            run,
        } => {
            let cfg = run.resolve()?;
            let net = match (&checkpoint, baseline) {
                (Some(p), _) => Some(LtcfNet::load_checkpoint(p)?),
                _ => None,
            };
            let ds = commands::build_dataset(&cfg)?;
            let report = commands::evaluate(net.as_ref(), &ds, &cfg)?;
            print!("{}", report.table());
            if run.out.is_some() {
                std::fs::create_dir_all(&cfg.output.dir)?;
                let path = cfg.output.dir.join("eval.csv");
                report.write_csv(&path)?;
                println!("report {}", path.display());
            }
        }
        Command::Inspect {
            checkpoint,
            size,
            csv,
            run,
        } => {
            let net = match &checkpoint {
                Some(p) => LtcfNet::load_checkpoint(p)?,
                None => LtcfNet::build(&run.resolve()?.model)?,
            };
            print!("{}", commands::inspect(&net, size, size));
            if let Some(path) = csv {
                report::write_module_csv(&net.module_stats(size, size), &path)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use arnet_cli::commands::{cmd_eval, cmd_gen, cmd_gradcheck, cmd_heatmap, cmd_train, BASELINE_ROW, MODEL_ROW};
use arnet_cli::{CliError, CliResult, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "arnet", version, about = "Adaptive rectangular convolution pansharpening")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted override such as training.epochs=60 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> CliResult<RunConfig> {
        RunConfig::load(self.config.as_deref(), self.seed, &self.overrides)
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Gen(Common),
    /// Train ARNet and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint and the EXP baseline on the held-out split.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Export per-layer height/width heatmaps.
    Heatmap {
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck(Common),
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen(c) => {
            let cfg = c.load()?;
            let out = c.out_or("data");
            let s = cmd_gen(&cfg, &out)?;
            println!("wrote {} samples to {} ({} values clamped)", s.count, out.display(), s.clamped);
        }
        Command::Train { common, resume } => {
            let cfg = common.load()?;
            let out = common.out_or("run");
            let s = cmd_train(&cfg, &out, resume, |r| {
                let frozen = r.frozen.as_ref().map(|f| format!(" frozen {}", f.join(","))).unwrap_or_default();
                println!("epoch {:>3} {:?} lr {:.2e} loss {:.6}{frozen}", r.epoch + 1, r.phase, r.lr, r.loss);
            })?;
            if let Some(e) = s.resumed_from {
                println!("resumed after epoch {e}");
            }
            println!("checkpoint {} ({} parameters)", s.checkpoint.display(), s.parameters);
        }
        Command::Eval { checkpoint, common } => {
            let cfg = common.load()?;
            let report = cmd_eval(&cfg, &checkpoint, &common.out_or("eval"))?;
            print!("{}", report.table());
            let (m, b) = (report.method(MODEL_ROW), report.method(BASELINE_ROW));
            if let (Some(m), Some(b)) = (m, b) {
                println!("SAM {:.4} vs {:.4}, ERGAS {:.4} vs {:.4}", m.mean.sam, b.mean.sam, m.mean.ergas, b.mean.ergas);
            }
        }
        Command::Heatmap { checkpoint, common } => {
            let cfg = common.load()?;
            let out = common.out_or("heatmaps");
            let report = cmd_heatmap(&cfg, &checkpoint, &out)?;
            println!("wrote {} images for sample {} to {}", report.images.len(), report.sample, out.display());
            if let Some(s) = &report.study {
                println!(
                    "scale study: large object mean h >= small object in {} of {} layers",
                    s.layers_large_ge_small,
                    s.large_h.len()
                );
            }
        }
        Command::Gradcheck(c) => {
            let cfg = c.load()?;
            let report = cmd_gradcheck(&cfg, c.out.as_deref())?;
            print!("{}", report.table());
            if !report.passed() {
                return Err(CliError::Check(format!("gradient mismatch in {}", report.failures().join(", "))));
            }
            println!("all {} ops within {:e}", report.ops.len(), report.tolerance);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("arnet: {e}");
            e.exit_code()
        }
    }
}

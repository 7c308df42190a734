use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvdistill_cli::{cmd_eval, cmd_refine, cmd_restore, cmd_synth, CliError, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "mvdistill", version, about = "Multi-view noise-resampled score distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the fixture: target and initial scenes, oracle means, reference.
    Synth(Common),
    /// Pretrain and fine-tune the geometry transform; writes restored.scne.
    Restore(Common),
    /// Run multi-view refinement.
    Refine(Common),
    /// Summarise a refinement run directory into summary.csv.
    Eval {
        run_dir: PathBuf,
        /// Also write scores.png.
        #[arg(long)]
        plot: bool,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Directory written by `synth` (defaults to the output directory).
    #[arg(long)]
    fixture: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    w_ex: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    no_anchor_init: bool,
    #[arg(long)]
    no_retention: bool,
    #[arg(long)]
    freeze_noise: bool,
    /// Also run the baseline, no-retention and frozen-noise variants.
    #[arg(long)]
    compare: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let overrides = Overrides {
            output: self.output.clone(),
            fixture: self.fixture.clone(),
            seed: self.seed,
            steps: self.steps,
            views: self.views,
            sigma: self.sigma,
            w_ex: self.w_ex,
            tau: self.tau,
            step_size: self.step_size,
            no_anchor_init: self.no_anchor_init,
            no_retention: self.no_retention,
            freeze_noise: self.freeze_noise,
            compare: self.compare,
        };
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(c) => {
            let r = cmd_synth(&c.load()?)?;
            println!("wrote fixture with {} views to {}", r.views, r.dir.display());
        }
        Command::Restore(c) => {
            let r = cmd_restore(&c.load()?)?;
            println!(
                "pretrain loss {:.3e} -> {:.3e}, fine-tune loss {:.3e} -> {:.3e}",
                r.pretrain_loss_before, r.pretrain_loss_after, r.finetune_loss_before, r.finetune_loss_after
            );
        }
        Command::Refine(c) => {
            for r in cmd_refine(&c.load()?)? {
                println!(
                    "{}: mean score {:.4}, anchor updates {}",
                    r.run_dir.display(),
                    r.mean_score,
                    r.anchor_updates
                );
            }
        }
        Command::Eval { run_dir, plot } => {
            print!("{}", cmd_eval(&run_dir, plot)?.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

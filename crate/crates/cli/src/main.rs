use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dgst_core::harness::{self, ExperimentConfig, Overrides, Task};
use dgst_core::sparsify::StrategyKind;
use dgst_core::Error;

#[derive(Parser)]
#[command(name = "dgst", version, about = "Few-shot segmentation fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the foundation model on the source domain.
    Pretrain(Common),
    /// Fine-tune one strategy at one shot setting over every seed.
    Finetune(Common),
    /// Every strategy at every shot setting, plus the all-shot reference.
    Matrix(Common),
    /// DGST at several gamma values plus the Full reference.
    SweepGamma(Common),
    /// The seven sparsification strategies with iteration durations.
    Ablation(Common),
    /// Summarize every result under the output root as markdown.
    Report(Common),
    /// Print the effective configuration as TOML.
    ShowConfig(Common),
}

fn list<T: std::str::FromStr>(flag: &str, s: Option<String>) -> Result<Option<Vec<T>>, Error>
where
    T::Err: std::fmt::Display,
{
    s.map(|s| {
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse::<T>()
                    .map_err(|e| Error::Config(format!("--{flag}: `{p}`: {e}")))
            })
            .collect()
    })
    .transpose()
}

#[derive(Args)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    strategy: Option<StrategyKind>,
    #[arg(long)]
    gamma: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    /// Comma-separated shot settings for the matrix.
    #[arg(long)]
    shot_grid: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Single seed; shorthand for --seeds N.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated gamma values for the sweep.
    #[arg(long)]
    gammas: Option<String>,
    /// Fine-tuning epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Fine-tuning initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Output root (default: $DGST_OUTPUT_ROOT, then ./runs).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Foundation checkpoint (default: <output>/foundation/foundation.ckpt).
    #[arg(long)]
    foundation: Option<PathBuf>,
    /// Cells run concurrently.
    #[arg(long)]
    jobs: Option<usize>,
    /// Run cells one at a time so timings are not disturbed.
    #[arg(long)]
    timing_exclusive: bool,
    /// Skip per-run checkpoints.
    #[arg(long)]
    no_checkpoints: bool,
}

impl Common {
    fn resolve(self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        Overrides {
            task: self.task,
            strategy: self.strategy,
            gamma: self.gamma,
            shots: self.shots,
            shot_grid: list("shot-grid", self.shot_grid)?,
            seeds: list("seeds", self.seeds)?.or(self.seed.map(|s| vec![s])),
            gammas: list("gammas", self.gammas)?,
            epochs: self.epochs,
            lr: self.lr,
            pretrain_epochs: self.pretrain_epochs,
            image_size: self.image_size,
            output: self.output,
            foundation: self.foundation,
            jobs: self.jobs,
            timing_exclusive: self.timing_exclusive,
            no_checkpoints: self.no_checkpoints,
        }
        .apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Pretrain(c) => {
            let cfg = c.resolve()?;
            let (_, s) = harness::cmd_pretrain(&cfg)?;
            println!("foundation written to {}", s.checkpoint.display());
            println!(
                "source test DSC {} ± {} (loss {:.4} -> {:.4})",
                pct(s.source_test.dsc_mean),
                pct(s.source_test.dsc_std),
                s.first_loss,
                s.final_loss
            );
            for (task, m) in &s.zero_shot {
                println!("zero-shot {task} DSC {}", pct(m.dsc_mean));
            }
        }
        Command::Finetune(c) => {
            let cfg = c.resolve()?;
            let s = harness::cmd_finetune(&cfg)?;
            let p = s.cell.pooled.as_ref().expect("successful cell");
            println!(
                "{} {} {}-shot over {} seeds: DSC {} ± {}, NSD {} ± {}, {:.4} s/iteration",
                s.cell.task,
                s.cell.label(),
                s.cell.shots,
                s.cell.seeds.len(),
                pct(p.dsc_mean),
                pct(p.dsc_std),
                pct(p.nsd_mean),
                pct(p.nsd_std),
                s.cell.mean_iteration_seconds
            );
        }
        Command::Matrix(c) => {
            let cfg = c.resolve()?;
            let m = harness::cmd_matrix(&cfg)?;
            println!("{} runs, {} failed cells", m.manifest.len(), m.failed);
            print!("{}", harness::render_report(&cfg.output_root())?);
        }
        Command::SweepGamma(c) => {
            let cfg = c.resolve()?;
            let s = harness::cmd_sweep_gamma(&cfg)?;
            for p in &s.points {
                println!("{:>10}  DSC {} ± {}", p.series, pct(p.dsc_mean), pct(p.dsc_std));
            }
            println!("largest gamma approaches full: {}", s.approaches_full);
        }
        Command::Ablation(c) => {
            let cfg = c.resolve()?;
            let a = harness::cmd_ablation(&cfg)?;
            for r in &a.rows {
                println!(
                    "{:>13}  DSC {} ± {}  {:.4} s/iteration",
                    r.strategy,
                    pct(r.dsc_mean),
                    pct(r.dsc_std),
                    r.iter_duration_mean_s
                );
            }
            println!("dgst/full duration ratio {:.3}", a.dgst_full_duration_ratio);
        }
        Command::Report(c) => print!("{}", harness::cmd_report(&c.resolve()?)?),
        Command::ShowConfig(c) => print!("{}", c.resolve()?.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

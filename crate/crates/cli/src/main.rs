use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mulse_core::experiment::{
    calibrate_model, prepare, read_rows, run_experiment, simulate, summarize, write_rows,
    write_summary, ScenarioConfig, SnrSetting,
};
use mulse_core::perceiver::{load_checkpoint, save_checkpoint};
use mulse_core::protocol::{run_sample, Simulation};
use mulse_core::synth::{generate_task, SyntheticTaskSpec};
use mulse_core::{Approach, Combiner};

#[derive(Parser)]
#[command(name = "mulse", version, about = "Multimodal edge inference simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the configured synthetic task and save a checkpoint.
    Train {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate conformal quantiles and the routing threshold for a checkpoint.
    Calibrate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the test split once per approach and rate for a single seed.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// CSV rows; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Transmission log of the first test sample under the first approach.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run every seed, approach and rate in the config.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean and spread over seeds of a sweep's rows.
    Report {
        /// Rows written by `simulate` or `sweep`.
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CombinerArg {
    Ewc,
    Sssc,
}

/// Scenario file plus command-line overrides.
#[derive(Args)]
struct ScenarioArgs {
    /// TOML scenario; the built-in imbalanced two-modality task when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list with this one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Approaches to run (A1..A5), comma separated.
    #[arg(long, value_delimiter = ',')]
    approach: Vec<Approach>,
    #[arg(long, value_enum)]
    combiner: Option<CombinerArg>,
    /// SSSC exponent; implies `--combiner sssc`.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    alpha2: Option<f64>,
    /// Data rates in bit/s, comma separated.
    #[arg(long, value_delimiter = ',')]
    rate: Vec<f64>,
    /// Uplink SNR in dB: `20`, `inf` or `default=30;m1=10`.
    #[arg(long)]
    snr: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    calibration: Option<PathBuf>,
}

impl ScenarioArgs {
    fn resolve(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                ScenarioConfig::load(path).with_context(|| format!("loading {}", path.display()))?
            }
            None => ScenarioConfig::new(SyntheticTaskSpec::imbalanced(0)),
        };
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if !self.approach.is_empty() {
            cfg.approaches = self.approach.clone();
        }
        let beta = self.beta.or(cfg.combiner.beta()).unwrap_or(1.0);
        match (self.combiner, self.beta) {
            (Some(CombinerArg::Ewc), Some(_)) => bail!("--beta only applies to the sssc combiner"),
            (Some(CombinerArg::Ewc), None) => cfg.combiner = Combiner::Ewc,
            (Some(CombinerArg::Sssc), _) | (None, Some(_)) => {
                cfg.combiner = Combiner::Sssc { beta }
            }
            (None, None) => {}
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(a) = self.alpha2 {
            cfg.alpha2 = a;
        }
        if !self.rate.is_empty() {
            cfg.rates_bps = self.rate.clone();
        }
        if let Some(s) = &self.snr {
            cfg.snr = s.parse::<SnrSetting>()?;
        }
        if let Some(p) = &self.checkpoint {
            cfg.checkpoint = Some(p.clone());
        }
        if let Some(p) = &self.calibration {
            cfg.calibration = Some(p.clone());
        }
        for (what, path) in [
            ("checkpoint", &cfg.checkpoint),
            ("calibration", &cfg.calibration),
        ] {
            if let Some(p) = path.as_ref().filter(|p| !p.exists()) {
                bail!("{what} {} not found", p.display());
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn single_seed(cfg: &ScenarioConfig) -> Result<u64> {
    match cfg.seeds.as_slice() {
        [seed] => Ok(*seed),
        _ => bail!("this command runs one seed; pass --seed or use `sweep`"),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { scenario, out } => {
            let mut cfg = scenario.resolve()?;
            if cfg.checkpoint.is_some() {
                bail!("train builds a new model; drop --checkpoint");
            }
            cfg.calibration = None;
            let seed = single_seed(&cfg)?;
            let prepared = prepare(&cfg, seed)?;
            save_checkpoint(&prepared.model, &out)?;
            eprintln!(
                "trained {} parameters on {} samples, saved to {}",
                prepared.model.params.scalar_count(),
                prepared.dataset.train.len(),
                out.display()
            );
        }
        Command::Calibrate { scenario, out } => {
            let cfg = scenario.resolve()?;
            let seed = single_seed(&cfg)?;
            let Some(path) = &cfg.checkpoint else {
                bail!("calibrate needs --checkpoint or a checkpoint in the config");
            };
            let model =
                load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            let data = generate_task(&SyntheticTaskSpec {
                seed,
                ..cfg.task.clone()
            })?;
            let calibration =
                calibrate_model(&model, &data.cal, cfg.alpha, cfg.alpha2, &[cfg.combiner])?;
            calibration.save(&out)?;
            for t in &calibration.thresholds {
                eprintln!("task {} {}: q_e = {:.4}", t.task, t.combiner.name(), t.q_e);
            }
        }
        Command::Simulate {
            scenario,
            out,
            trace,
        } => {
            let cfg = scenario.resolve()?;
            let seed = single_seed(&cfg)?;
            let prepared = prepare(&cfg, seed)?;
            let rows = simulate(&cfg, &prepared, seed)?;
            write_rows(&rows, output(out.as_deref())?)?;
            if let Some(path) = trace {
                let sim_cfg = cfg.sim_config(&prepared.model.registry, cfg.rates_bps[0], seed)?;
                let sim = Simulation {
                    model: &prepared.model,
                    calibration: Some(&prepared.calibration),
                    config: &sim_cfg,
                };
                let sample = prepared.dataset.test.first().context("empty test split")?;
                let run = run_sample(cfg.approaches[0], sample, &sim)?;
                std::fs::write(&path, run.trace.export())
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Sweep { scenario, out } => {
            let cfg = scenario.resolve()?;
            write_rows(&run_experiment(&cfg)?, output(out.as_deref())?)?;
        }
        Command::Report { input, out } => {
            let file =
                File::open(&input).with_context(|| format!("opening {}", input.display()))?;
            write_summary(&summarize(&read_rows(file)?), output(out.as_deref())?)?;
        }
    }
    Ok(())
}

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use envelope_sae::ensemble::FusionMode;
use envelope_sae::experiment::{
    emit_report, parse_width_list, run, run_saving_models, summary_table, sweep, ExperimentConfig, ExperimentError,
};

#[derive(Parser)]
#[command(name = "envelope-sae", version, about = "Envelope-sample stacked autoencoder experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over repeated stratified splits.
    Run(RunArgs),
    /// Run once per hidden-width tuple and pick the best by validation accuracy.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Width tuples, e.g. "27,18,9;12,8,4" or "[27,18,9],[12,8,4]".
        #[arg(long)]
        widths: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Wf,
    WfScore,
    Mv,
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    cluster_ratio: Option<f64>,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    #[arg(long)]
    no_spc: bool,
    #[arg(long)]
    no_icm: bool,
    #[arg(long)]
    no_embed: bool,
    #[arg(long)]
    no_sparsity: bool,
    #[arg(long)]
    no_ensemble: bool,
    /// Also evaluate the plain stacked autoencoder on the same splits.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    retained_variance: Option<f64>,
    /// Directory for report.json and timings.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Save every trained layer model under <out>/models.
    #[arg(long, requires = "out")]
    save_models: bool,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
                ExperimentConfig::from_toml(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.data {
            cfg.data = v.clone();
        }
        if let Some(v) = &self.label {
            cfg.label = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.repeats {
            cfg.repeats = v;
        }
        if let Some(v) = self.cluster_ratio {
            cfg.envelope.cluster_ratio = v;
        }
        if let Some(v) = self.retained_variance {
            cfg.retained_variance = v;
        }
        if let Some(f) = self.fusion {
            cfg.fusion = Some(match f {
                FusionArg::Wf => FusionMode::WfLiteral,
                FusionArg::WfScore => FusionMode::WfScore,
                FusionArg::Mv => FusionMode::Mv,
            });
        }
        let a = &mut cfg.ablation;
        a.no_spc |= self.no_spc;
        a.no_icm |= self.no_icm;
        a.no_embed |= self.no_embed;
        a.no_sparsity |= self.no_sparsity;
        a.no_ensemble |= self.no_ensemble;
        cfg.baseline |= self.baseline;
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.config()?;
            let report = match (&args.out, args.save_models) {
                (Some(out), true) => run_saving_models(&cfg, &out.join("models"))?,
                _ => run(&cfg)?,
            };
            if let Some(out) = &args.out {
                emit_report(&report, out)?;
            }
            print!("{}", summary_table(&report));
            if report.failed_repeats == report.repeats.len() {
                return Err(ExperimentError::Config("every repeat failed".into()));
            }
        }
        Command::Sweep { run: args, widths } => {
            let cfg = args.config()?;
            let widths = parse_width_list(&widths)?;
            let report = sweep(&cfg, &widths)?;
            for (i, c) in report.candidates.iter().enumerate() {
                let mark = if report.best == Some(i) { "*" } else { " " };
                let fmt = |s: Option<envelope_sae::experiment::Stat>| {
                    s.map_or("-".to_string(), |s| format!("{:.4}±{:.4}", s.mean, s.std))
                };
                println!(
                    "{mark} {:<20} validation {:>16} test {:>16}",
                    format!("{:?}", c.widths),
                    fmt(c.validation),
                    fmt(c.fused)
                );
            }
            if let Some(out) = &args.out {
                fs::create_dir_all(out).map_err(|e| ExperimentError::Io(e.to_string()))?;
                let json = serde_json::to_string_pretty(&report).expect("plain data");
                fs::write(out.join("sweep.json"), json + "\n").map_err(|e| ExperimentError::Io(e.to_string()))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

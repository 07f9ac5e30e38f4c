//! Command-line front end.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::pipeline::{self, OutputFormat, PipelineError, PolicyChoice, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "pkan", version, about = "Probabilistic KAN / MLP traffic forecasting and PRB allocation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, clap::Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for generation, initialisation and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<FormatArg>,
    /// Input CSV (`beam_id,timestamp,prb`); defaults to synthetic data.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    Static,
    P99,
    Point,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-beam dataset to `<out>/data.csv`.
    Generate {
        #[arg(long)]
        beams: Option<usize>,
        #[arg(long)]
        hours: Option<usize>,
    },
    /// Train every configured model variant on every beam.
    Train,
    /// Score trained models on the test span.
    Evaluate,
    /// Apply thresholding policies to trained models' forecasts.
    Allocate {
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        #[arg(long)]
        quantile: Option<f64>,
    },
    /// Print trainable parameter counts for the configured variants.
    CountParams,
}

fn build_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let c = &cli.common;
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &c.out {
        cfg.output.dir = out.clone();
    }
    if let Some(f) = c.format {
        cfg.output.format = match f {
            FormatArg::Csv => OutputFormat::Csv,
            FormatArg::Json => OutputFormat::Json,
        };
    }
    if let Some(d) = &c.data {
        cfg.data.input = Some(d.clone());
    }
    if let Some(e) = c.epochs {
        cfg.train.epochs = e;
    }
    match &cli.command {
        Command::Generate { beams, hours } => {
            if let Some(b) = beams {
                cfg.data.beams = *b;
            }
            if let Some(h) = hours {
                cfg.synthetic.length = *h;
            }
        }
        Command::Allocate { policy, quantile } => {
            if let Some(p) = policy {
                cfg.allocate.policy = match p {
                    PolicyArg::Static => PolicyChoice::Static,
                    PolicyArg::P99 => PolicyChoice::P99,
                    PolicyArg::Point => PolicyChoice::Point,
                };
            }
            if let Some(q) = quantile {
                cfg.allocate.quantile = *q;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

/// Runs one parsed command, writing human-readable progress to `log`.
pub fn execute(cli: &Cli, mut log: impl Write) -> Result<(), PipelineError> {
    let cfg = build_config(cli)?;
    let out = cfg.output.dir.clone();
    let note = |log: &mut dyn Write, msg: String| {
        let _ = writeln!(log, "{msg}");
    };
    match &cli.command {
        Command::Generate { .. } => {
            let series = pipeline::synthesize(&cfg)?;
            let path = pipeline::write_dataset(&out, &series)?;
            note(&mut log, format!("wrote {} beams to {}", series.len(), path.display()));
        }
        Command::Train => {
            cfg.validate()?;
            let beams = pipeline::prepare(pipeline::load_series(&cfg)?, cfg.split)?;
            let models = pipeline::train_all(&cfg, &beams)?;
            pipeline::save_models(&out, &models)?;
            for m in &models {
                let loss = m.log.as_ref().and_then(|l| l.final_loss()).unwrap_or(f64::NAN);
                note(&mut log, format!("{} {} final loss {loss:.6}", m.beam_id, m.variant));
            }
        }
        Command::Evaluate => {
            cfg.validate()?;
            let beams = pipeline::prepare(pipeline::load_series(&cfg)?, cfg.split)?;
            let models = pipeline::load_models(&out, &cfg, &beams)?;
            let (by_beam, pooled) = pipeline::evaluate_all(&cfg, &beams, &models)?;
            pipeline::write_metrics(&out, cfg.output.format, &by_beam, &pooled)?;
            for r in &pooled {
                note(&mut log, format!("{} rmse {:.4} mae {:.4}", r.model, r.report.rmse, r.report.mae));
            }
        }
        Command::Allocate { .. } => {
            cfg.validate()?;
            let beams = pipeline::prepare(pipeline::load_series(&cfg)?, cfg.split)?;
            let models = pipeline::load_models(&out, &cfg, &beams)?;
            let result = pipeline::allocate_all(&cfg, &beams, &models)?;
            pipeline::write_allocation(&out, cfg.output.format, &result)?;
            for p in &result.pareto {
                note(
                    &mut log,
                    format!(
                        "{} savings {:.4} underprov rate {:.4}{}",
                        p.label,
                        p.savings_frac,
                        p.underprov_event_rate,
                        if p.dominated { " (dominated)" } else { "" }
                    ),
                );
            }
        }
        Command::CountParams => {
            let rows = pipeline::count_params(&cfg);
            match cfg.output.format {
                OutputFormat::Csv => {
                    note(&mut log, "model,params".into());
                    for r in rows {
                        note(&mut log, format!("{},{}", r.model, r.params));
                    }
                }
                OutputFormat::Json => note(&mut log, serde_json::to_string_pretty(&rows)?),
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, mut stdout: impl Write, mut stderr: impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(stdout, "{text}") } else { write!(stderr, "{text}") };
            return code;
        }
    };
    match execute(&cli, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

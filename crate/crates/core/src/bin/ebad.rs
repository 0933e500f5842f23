use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ebad::pipeline::{self, Mode, Overrides, PipelineConfig};

#[derive(Parser)]
#[command(name = "ebad", version, about = "Energy-based video anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model bundle from normal footage.
    Train(Common),
    /// Score frames with a trained bundle.
    Detect(Common),
    /// Score frames while updating region models; writes an updated bundle.
    Stream(Common),
    /// Evaluate detections against ground-truth masks.
    Eval(Common),
    /// Render the region map of every scale as an indexed PNG.
    ClusterMap(Common),
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<usize>,
    /// Comma-separated scale ratios, e.g. `1,0.5,0.25`.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: ebad::Error| e.to_string())
}

impl Common {
    fn config(&self) -> ebad::Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            beta: self.beta,
            gamma: self.gamma,
            scales: self.scales.clone(),
            mode: self.mode,
            seed: self.seed,
            out: self.out.clone(),
        })?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> ebad::Result<String> {
    let (common, cmd): (&Common, fn(&PipelineConfig) -> ebad::Result<String>) = match &cli.command {
        Command::Train(c) => (c, pipeline::cmd_train),
        Command::Detect(c) => (c, pipeline::cmd_detect),
        Command::Stream(c) => (c, pipeline::cmd_stream),
        Command::Eval(c) => (c, pipeline::cmd_eval),
        Command::ClusterMap(c) => (c, pipeline::cmd_cluster_map),
    };
    cmd(&common.config()?)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

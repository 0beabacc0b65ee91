mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "rram-tc", version, about = "RRAM vacancy-network, temperature-coefficient and crossbar experiments")]
pub struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Random-grid ensemble: ensemble.csv and thermal_stats.json.
    Ensemble(EnsembleArgs),
    /// ISPP SET runs: set_summary.csv, set_traces.csv, current_density.csv.
    SetSim(SetArgs),
    /// Perturb programmed cells: perturb.csv.
    Perturb(PerturbArgs),
    /// Fit alpha_semi (and the metal/semi ratio) to a low-range mean: calibrated_model.json.
    Calibrate(CalibrateArgs),
    /// Train the MLP: mlp.json and train_report.json.
    Train(DataArgs),
    /// Quantize and map weights to conductance pairs: crossbar.json, conductances.csv.
    Map(MapArgs),
    /// Accuracy of one chip at one temperature: infer.json.
    Infer(InferArgs),
    /// Accuracy vs temperature over many chips: sweep.csv, sweep_summary.csv.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Default)]
pub struct EnsembleArgs {
    /// Vacancy concentrations, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub cv: Option<Vec<f64>>,
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct SetArgs {
    #[arg(long)]
    pub runs: Option<usize>,
    /// Initial vacancy concentration.
    #[arg(long)]
    pub cv: Option<f64>,
    /// Target conductance in microsiemens.
    #[arg(long)]
    pub target_us: Option<f64>,
    #[arg(long)]
    pub vacancies_per_pulse: Option<usize>,
    #[arg(long)]
    pub hops: Option<usize>,
    #[arg(long)]
    pub exponent: Option<f64>,
    #[arg(long)]
    pub max_pulses: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub set: SetArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub p_far: Option<f64>,
    #[arg(long)]
    pub r_far: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct CalibrateArgs {
    /// Target low-range mean temperature coefficient (1/K).
    #[arg(long, allow_hyphen_values = true)]
    pub target: Option<f64>,
    /// Trials per concentration in the scoring ensemble.
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub train_images: Option<PathBuf>,
    #[arg(long)]
    pub train_labels: Option<PathBuf>,
    #[arg(long)]
    pub test_images: Option<PathBuf>,
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct MapArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Network checkpoint from `train`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// full, low, middle or high.
    #[arg(long)]
    pub range: Option<String>,
    #[arg(long)]
    pub levels: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct InferArgs {
    #[command(flatten)]
    pub map: MapArgs,
    /// Thermal statistics JSON from `ensemble` or `calibrate`.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    pub parametric: bool,
    #[arg(long)]
    pub temp: Option<f64>,
    #[arg(long)]
    pub chip: Option<usize>,
    #[arg(long)]
    pub compensate: bool,
}

#[derive(Args, Debug, Default)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    pub parametric: bool,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub temps: Option<Vec<f64>>,
    #[arg(long)]
    pub chips: Option<usize>,
    /// Mapping ranges, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub range: Option<Vec<String>>,
    /// Also evaluate with compensation (both columns are written).
    #[arg(long)]
    pub compensate: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = commands::command_name(&cli.command);
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({
                "status": "error",
                "command": name,
                "error": e.to_string(),
                "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{body}");
            ExitCode::from(1)
        }
    }
}

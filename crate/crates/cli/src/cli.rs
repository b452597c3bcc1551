use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use log::LevelFilter;

use spadkit::calib_tdc::DEFAULT_MIN_COUNTS;
use spadkit::coincidence::{default_bin_width_ps, DEFAULT_WINDOW_PS};
use spadkit::crosstalk::{DEFAULT_D_MAX, DEFAULT_N_HOT};
use spadkit::rates::DEFAULT_HOT_THRESHOLD_CPS;

#[derive(Debug, Parser)]
#[command(name = "spadkit", version, about = "Cross-talk, coincidence and timing-offset analysis for linear SPAD arrays")]
pub struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// One of off, error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "warn", value_name = "LEVEL")]
    pub log_level: LevelFilter,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a stream with known ground truth.
    Simulate(SimulateArgs),
    /// Build a per-pixel TDC look-up table from a raw-code stream.
    Lut(LutArgs),
    /// Dark-count rates, hot pixels and optional time subsets.
    Dcr(DcrArgs),
    /// Time-difference histogram of one pixel pair.
    Coincidence(CoincidenceArgs),
    /// Fit one or two Gaussian peaks to a histogram.
    Fit(FitArgs),
    /// Cross-talk probability versus pixel distance.
    CtScan(CtScanArgs),
    /// Per-pixel delays from adjacent-pair cross-talk peaks.
    Calibrate(CalibrateArgs),
    /// Histogram, two-peak fit and figure for one pair.
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Lut(_) => "lut",
            Command::Dcr(_) => "dcr",
            Command::Coincidence(_) => "coincidence",
            Command::Fit(_) => "fit",
            Command::CtScan(_) => "ct-scan",
            Command::Calibrate(_) => "calibrate",
            Command::Report(_) => "report",
        }
    }
}

/// Stream input shared by the analysis commands. Files ending in `.csv` are
/// read as `cycle_index,pixel,time_ps` rows.
#[derive(Debug, Clone, Args)]
pub struct StreamInput {
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,

    /// Sensor description (JSON) for CSV input; defaults to the standard 256-pixel sensor.
    #[arg(long, value_name = "FILE")]
    pub sensor: Option<PathBuf>,

    /// TDC look-up table applied to raw codes before analysis.
    #[arg(long, value_name = "FILE")]
    pub lut: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BinningArgs {
    /// Half width of the time-difference window in ps.
    #[arg(long, default_value_t = DEFAULT_WINDOW_PS)]
    pub window: f64,

    /// Bin width in ps.
    #[arg(long, default_value_t = default_bin_width_ps())]
    pub bin: f64,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,

    /// Overrides the seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Overrides the duration in the configuration, in seconds.
    #[arg(long)]
    pub duration: Option<f64>,

    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,

    /// Ground-truth sidecar.
    #[arg(long, value_name = "FILE")]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct LutArgs {
    #[command(flatten)]
    pub input: StreamInput,

    /// Pixels with fewer counts are flagged unusable.
    #[arg(long, default_value_t = DEFAULT_MIN_COUNTS)]
    pub min_counts: u64,

    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DcrArgs {
    #[command(flatten)]
    pub input: StreamInput,

    /// Split the run into this many equal time subsets.
    #[arg(long, default_value_t = 1)]
    pub subsets: usize,

    #[arg(long, default_value_t = DEFAULT_HOT_THRESHOLD_CPS)]
    pub hot_threshold: f64,

    /// Wall-clock duration in seconds, when it differs from the acquired cycles.
    #[arg(long)]
    pub duration: Option<f64>,

    /// JSON report, or a per-pixel table when the name ends in `.csv`.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CoincidenceArgs {
    #[command(flatten)]
    pub input: StreamInput,

    /// Pixel pair `a,b`; time differences are `t_b - t_a`.
    #[arg(long, value_parser = parse_pair)]
    pub pair: (u16, u16),

    #[command(flatten)]
    pub binning: BinningArgs,

    #[arg(long, value_name = "FILE")]
    pub delays: Option<PathBuf>,

    /// JSON histogram, or a bin table when the name ends in `.csv`.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,

    #[arg(long, value_name = "FILE")]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Histogram JSON written by `coincidence`.
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,

    /// Fit a cross-talk peak and a second peak near `--hint`.
    #[arg(long, requires = "hint")]
    pub two_peaks: bool,

    /// Expected separation of the second peak in ps.
    #[arg(long)]
    pub hint: Option<f64>,

    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,

    /// Data and model overlay.
    #[arg(long, value_name = "FILE")]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CtScanArgs {
    #[command(flatten)]
    pub input: StreamInput,

    #[arg(long, default_value_t = DEFAULT_D_MAX)]
    pub dmax: usize,

    #[arg(long, default_value_t = DEFAULT_N_HOT)]
    pub nhot: usize,

    #[arg(long, default_value_t = DEFAULT_HOT_THRESHOLD_CPS)]
    pub hot_threshold: f64,

    #[command(flatten)]
    pub binning: BinningArgs,

    #[arg(long, value_name = "FILE")]
    pub delays: Option<PathBuf>,

    /// JSON curve, or a distance table when the name ends in `.csv`.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,

    /// Probability versus distance on a log scale.
    #[arg(long, value_name = "FILE")]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub input: StreamInput,

    #[command(flatten)]
    pub binning: BinningArgs,

    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub input: StreamInput,

    #[arg(long, value_parser = parse_pair)]
    pub pair: (u16, u16),

    #[arg(long, value_name = "FILE")]
    pub delays: Option<PathBuf>,

    /// Expected separation of the second peak in ps.
    #[arg(long, default_value_t = 5_000.0)]
    pub hint: f64,

    #[command(flatten)]
    pub binning: BinningArgs,

    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

fn parse_pair(s: &str) -> Result<(u16, u16), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `a,b`, got {s:?}"))?;
    let pixel = |v: &str| v.trim().parse::<u16>().map_err(|e| format!("bad pixel {v:?}: {e}"));
    Ok((pixel(a)?, pixel(b)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn pairs() {
        assert_eq!(parse_pair("70,73"), Ok((70, 73)));
        assert_eq!(parse_pair(" 1 , 2"), Ok((1, 2)));
        assert!(parse_pair("70").is_err());
        assert!(parse_pair("70,x").is_err());
    }
}

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

/// Hierarchical visual localization: map building, query localization and evaluation.
#[derive(Debug, Parser)]
#[command(name = "hfloc", version, propagate_version = true)]
pub struct Cli {
    /// Worker threads for queries and pairs [default: available parallelism]
    #[arg(long, global = true, env = "HFLOC_THREADS", value_parser = clap::value_parser!(u32).range(1..=4096))]
    pub threads: Option<u32>,

    /// TOML file with one table of flag defaults per subcommand; flags given on the command line win
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene: feature files, camera and pose lists, ground-truth observations
    Synth(SynthArgs),
    /// Triangulate a sparse map from features and known database poses
    BuildMap(BuildMapArgs),
    /// Print the four summary statistics of a map
    MapStats(MapStatsArgs),
    /// Localize query images against a map
    Localize(LocalizeArgs),
    /// Evaluate local features on image pairs with ground-truth geometry
    EvalLocal(EvalLocalArgs),
    /// Score localization results against ground-truth poses
    EvalLoc(EvalLocArgs),
    /// Check the multi-task loss gradients against finite differences
    DistillCheck(DistillCheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene specification (JSON); omitted fields take their defaults
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Overrides the seed in the spec
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BuildMapArgs {
    /// Directory of feature files
    #[arg(long, value_name = "DIR")]
    pub features: PathBuf,
    /// Database pose list; its images enter the map in file order
    #[arg(long, value_name = "FILE")]
    pub poses: PathBuf,
    /// Camera list
    #[arg(long, value_name = "FILE")]
    pub cameras: PathBuf,
    /// Output map file
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Pair list, one `image_a image_b` per line [default: all pairs]
    #[arg(long, value_name = "FILE", conflicts_with = "pair_knn")]
    pub pairs: Option<PathBuf>,
    /// Pair each image with its K most similar images by global descriptor
    #[arg(long, value_name = "K", value_parser = clap::value_parser!(u32).range(1..))]
    pub pair_knn: Option<u32>,
    /// Ratio-test threshold for pairwise matching
    #[arg(long, default_value_t = hfloc_core::matching::DEFAULT_RATIO, value_parser = unit_interval)]
    pub ratio: f64,
    /// Epipolar and reprojection tolerance, pixels
    #[arg(long, default_value_t = 4.0, value_parser = positive)]
    pub epipolar_px: f64,
    /// Minimum triangulation angle, degrees
    #[arg(long, default_value_t = hfloc_core::geometry::DEFAULT_MIN_TRIANGULATION_ANGLE_DEG, value_parser = non_negative)]
    pub min_angle_deg: f64,
    /// PCA output dimension for the global index (clipped to the available rank); 0 disables
    #[arg(long, default_value_t = hfloc_core::retrieval::DEFAULT_PCA_DIM)]
    pub pca_dim: usize,
}

#[derive(Debug, Args)]
pub struct MapStatsArgs {
    /// Map file
    #[arg(long, value_name = "FILE")]
    pub map: PathBuf,
    /// Print JSON instead of text
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MatchModeArg {
    AllObservations,
    PointMean,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    /// Map file
    #[arg(long, value_name = "FILE")]
    pub map: PathBuf,
    /// Directory of query feature files
    #[arg(long, value_name = "DIR")]
    pub features: PathBuf,
    /// Camera list covering every query
    #[arg(long, value_name = "FILE")]
    pub cameras: PathBuf,
    /// Query image ids, one per line
    #[arg(long, value_name = "FILE")]
    pub queries: PathBuf,
    /// Output JSON-lines file
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Prior frames retrieved per query
    #[arg(long, default_value_t = hfloc_core::retrieval::DEFAULT_KNN, value_parser = count::<1>)]
    pub knn: usize,
    /// Modified ratio-test threshold
    #[arg(long, default_value_t = hfloc_core::matching::DEFAULT_RATIO, value_parser = unit_interval)]
    pub ratio: f64,
    /// RANSAC inlier threshold, pixels
    #[arg(long, default_value_t = 10.0, value_parser = positive)]
    pub reproj_px: f64,
    /// Inliers required for a valid pose
    #[arg(long, default_value_t = 12, value_parser = count::<4>)]
    pub min_inliers: usize,
    /// RANSAC iteration cap
    #[arg(long, default_value_t = 5000, value_parser = count::<1>)]
    pub max_iters: usize,
    /// RANSAC confidence for the adaptive iteration bound
    #[arg(long, default_value_t = 0.999, value_parser = open_unit_interval)]
    pub confidence: f64,
    /// Keypoints kept per query after non-maximum suppression
    #[arg(long, default_value_t = 2000, value_parser = count::<1>)]
    pub max_kpts: usize,
    /// Non-maximum suppression radius, pixels
    #[arg(long, default_value_t = hfloc_core::features::DEFAULT_NMS_RADIUS, value_parser = non_negative)]
    pub nms_radius: f64,
    /// Descriptors matched against per place
    #[arg(long, value_enum, default_value_t = MatchModeArg::AllObservations)]
    pub match_mode: MatchModeArg,
    /// RANSAC seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Homography,
    Sfm,
}

#[derive(Debug, Args)]
pub struct EvalLocalArgs {
    /// Pair file (JSON lines); depth-map paths are relative to it
    #[arg(long, value_name = "FILE")]
    pub pairs: PathBuf,
    /// Directory of feature files
    #[arg(long, value_name = "DIR")]
    pub features: PathBuf,
    /// Ground-truth kind every pair must carry
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    /// Output report (JSON)
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Keypoint correctness threshold, pixels [default: 3]
    #[arg(long, value_parser = positive)]
    pub eps_keypoint: Option<f64>,
    /// Descriptor match correctness threshold, pixels [default: 3 homography, 5 sfm]
    #[arg(long, value_parser = positive)]
    pub eps_descriptor: Option<f64>,
    /// Mean corner error for a correct homography, pixels
    #[arg(long, default_value_t = 3.0, value_parser = positive)]
    pub corner_px: f64,
    /// Base RANSAC seed; pair i uses seed + i
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalLocArgs {
    /// Localization results (JSON lines, as written by `localize`)
    #[arg(long, value_name = "FILE")]
    pub results: PathBuf,
    /// Ground-truth pose list
    #[arg(long, value_name = "FILE")]
    pub gt: PathBuf,
    /// Three increasing `meters:degrees` tiers
    #[arg(long, default_value = "0.25:2,0.5:5,5:10", value_parser = parse_tiers)]
    pub tiers: hfloc_core::evalbench::ThresholdTriple,
    /// Write the cumulative position-error curve as CSV
    #[arg(long, value_name = "FILE")]
    pub curve_out: Option<PathBuf>,
    /// Largest threshold on the curve, meters
    #[arg(long, default_value_t = 10.0, value_parser = positive)]
    pub curve_max: f64,
    /// Curve samples after zero
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u32).range(1..))]
    pub curve_steps: u32,
}

#[derive(Debug, Args)]
pub struct DistillCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random batches to check
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
    pub trials: u32,
    /// Largest acceptable relative error
    #[arg(long, default_value_t = 1e-5, value_parser = positive)]
    pub tolerance: f64,
}

fn parse_tiers(s: &str) -> Result<hfloc_core::evalbench::ThresholdTriple, String> {
    s.parse().map_err(|e: hfloc_core::evalbench::EvalError| e.to_string())
}

fn parse_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if !v.is_finite() {
        return Err(format!("'{s}' is not finite"));
    }
    Ok(v)
}

fn positive(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} must be positive"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} must not be negative"))
    }
}

fn open_unit_interval(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} must lie in (0, 1)"))
    }
}

fn count<const MIN: usize>(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|_| format!("'{s}' is not a non-negative integer"))?;
    if v >= MIN {
        Ok(v)
    } else {
        Err(format!("{v} must be at least {MIN}"))
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} must lie in (0, 1]"))
    }
}

/// Parses argv, splicing in config-file defaults for the chosen subcommand.
fn parse(args: Vec<OsString>) -> Result<Cli, clap::Error> {
    let cmd = Cli::command();
    let first = cmd.clone().try_get_matches_from(&args)?;
    let cli = Cli::from_arg_matches(&first)?;
    let Some(path) = &cli.config else {
        return Ok(cli);
    };
    let (name, sub) = first.subcommand().expect("subcommand is required");
    match config::config_args(path, &cmd, name, sub) {
        Ok(extra) if extra.is_empty() => Ok(cli),
        Ok(extra) => {
            let mut all = args;
            all.extend(extra);
            let m = cmd.try_get_matches_from(all)?;
            Cli::from_arg_matches(&m)
        }
        Err(e) => Err(Cli::command().error(clap::error::ErrorKind::InvalidValue, e.to_string())),
    }
}

fn broken_pipe(e: &anyhow::Error) -> bool {
    e.downcast_ref::<std::io::Error>()
        .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    let cli = match parse(std::env::args_os().collect()) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

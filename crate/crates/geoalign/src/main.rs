use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use geoalign::commands::{self, MaskOptions, View};
use geoalign::error::{CliError, EXIT_OK, EXIT_USAGE};
use geoalign_core::gradcheck::{DEFAULT_EPS, DEFAULT_TOL};
use geoalign_core::mgsf::{GateParams, MgsfConfig};
use geoalign_core::retrieval::{Ablation, FEATURE_SIZE};
use geoalign_core::scene::CityProfile;

const LAYOUT: &str = "\
FILE FORMATS
  Depth and mask rasters (RasterFileV1, *.geod):
    bytes 0..n   ASCII header \"GEOD 1 <H> <W>\\n\" (single spaces, decimal)
    then         H*W IEEE-754 f64 values, little-endian, row-major
    The payload must be exactly 8*H*W bytes.
  Label rasters (*.geol):
    header \"GEOL 1 <H> <W>\\n\", then H*W bytes, row-major:
    0 ground, 1 roof, 2 facade, 3 edge
  Mask images (*.pgm): binary PGM P5, maxval 255, value = round(255*m).
  Scene specs: one keyword per line, '#' starts a comment.
    ground D | slope SX SY | noise SIGMA | seed N | raster H W | box X Y W H HEIGHT
    ground is required; every keyword but box appears at most once.

EXIT CODES
  0 success, 1 usage or format error, 2 a check failed or was not evaluable";

#[derive(Parser, Debug)]
#[command(name = "geoalign", version, about = "Geometry-aware depth masks and a desk-scale retrieval benchmark", after_long_help = LAYOUT)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ViewArg {
    Ortho,
    Oblique,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ArmArg {
    Base,
    Mgsa,
    Mgsf,
    Full,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ProfileArg {
    Standard,
    FacadeHeavy,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a scene spec to a depth raster, a label raster and a copy of the spec.
    #[command(after_long_help = LAYOUT)]
    Synth {
        /// Scene spec file
        spec: PathBuf,
        /// Output directory, created if missing
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "oblique")]
        view: ViewArg,
    },
    /// Compute the geometric attention mask of a depth raster.
    ///
    /// Writes <PREFIX>.mask.geod, <PREFIX>.mask.pgm and <PREFIX>.stats.csv.
    #[command(after_long_help = LAYOUT)]
    Mask {
        /// Depth raster (RasterFileV1)
        depth: PathBuf,
        /// Output path prefix
        prefix: PathBuf,
        /// Gate scale
        #[arg(long, default_value_t = GateParams::default().alpha, allow_negative_numbers = true)]
        alpha: f64,
        /// Gate bias
        #[arg(long, default_value_t = GateParams::default().beta, allow_negative_numbers = true)]
        beta: f64,
        /// Sobel dilation
        #[arg(long, default_value_t = MgsfConfig::default().dilation)]
        dilation: usize,
        /// Gradient-magnitude quantile above which pixels are edges, in [0, 1)
        #[arg(long = "tau-q", default_value_t = MgsfConfig::default().tau_grad_quantile)]
        tau_q: f64,
        /// Number of k-means clusters
        #[arg(long, default_value_t = MgsfConfig::default().kmeans_k)]
        k: usize,
        /// k-means seeding seed
        #[arg(long, default_value_t = MgsfConfig::default().kmeans_seed)]
        seed: u64,
        /// Side of the square grid the depth is pooled to; 0 keeps the raster size
        #[arg(long, default_value_t = FEATURE_SIZE)]
        size: usize,
    },
    /// Score a mask against scene labels; prints one CSV row.
    #[command(after_long_help = LAYOUT)]
    Eval {
        /// Mask raster (RasterFileV1)
        mask: PathBuf,
        /// Label raster (*.geol)
        labels: PathBuf,
        /// Exit with code 2 when balanced accuracy is below this
        #[arg(long)]
        min_accuracy: Option<f64>,
        /// Also write the CSV here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// First seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Finite-difference step
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        /// Maximum allowed relative error
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        /// Also write the table here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the retrieval ablation on synthetic scenes and print a CSV report.
    Bench {
        #[arg(long, default_value_t = 50)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Arm to run; repeat for several, omit for all four
        #[arg(long, value_enum)]
        ablation: Vec<ArmArg>,
        #[arg(long, value_enum, default_value = "facade-heavy")]
        profile: ProfileArg,
        /// Also write the CSV here
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cmd: Command) -> Result<commands::Output, CliError> {
    match cmd {
        Command::Synth { spec, out_dir, view } => {
            let view = match view {
                ViewArg::Ortho => View::Ortho,
                ViewArg::Oblique => View::Oblique,
            };
            commands::synth(&spec, &out_dir, view)
        }
        Command::Mask {
            depth,
            prefix,
            alpha,
            beta,
            dilation,
            tau_q,
            k,
            seed,
            size,
        } => {
            let opts = MaskOptions {
                gate: GateParams { alpha, beta },
                config: MgsfConfig {
                    dilation,
                    tau_grad_quantile: tau_q,
                    kmeans_k: k,
                    kmeans_seed: seed,
                    ..MgsfConfig::default()
                },
                size: (size > 0).then_some(size),
            };
            commands::mask(&depth, &prefix, &opts)
        }
        Command::Eval {
            mask,
            labels,
            min_accuracy,
            out,
        } => commands::eval(&mask, &labels, min_accuracy, out.as_deref()),
        Command::Gradcheck {
            seed,
            seeds,
            eps,
            tol,
            out,
        } => commands::gradcheck(seed, seeds, eps, tol, out.as_deref()),
        Command::Bench {
            scenes,
            seed,
            ablation,
            profile,
            out,
        } => {
            let arms: Vec<Ablation> = ablation
                .iter()
                .map(|a| match a {
                    ArmArg::Base => Ablation::BASE,
                    ArmArg::Mgsa => Ablation::MGSA,
                    ArmArg::Mgsf => Ablation::MGSF,
                    ArmArg::Full => Ablation::FULL,
                })
                .collect();
            let profile = match profile {
                ProfileArg::Standard => CityProfile::standard(),
                ProfileArg::FacadeHeavy => CityProfile::facade_heavy(),
            };
            commands::bench(scenes, seed, &arms, &profile, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    match run(cli.cmd) {
        Ok(out) => {
            print!("{}", out.stdout);
            match out.failure {
                Some(f) => {
                    eprintln!("geoalign: {f}");
                    ExitCode::from(f.exit_code())
                }
                None => ExitCode::from(EXIT_OK),
            }
        }
        Err(e) => {
            eprintln!("geoalign: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

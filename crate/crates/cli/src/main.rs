use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(name = "birdview", version, about = "Reconstruct bird's-eye trajectories from ego-centric pedestrian views")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic crowd scene.
    Simulate(SimulateArgs),
    /// Mount a camera on one walker and write its ego-view observations.
    Project(ProjectArgs),
    /// Train a model on every scene file in a directory.
    Train(TrainArgs),
    /// Reconstruct trajectories from an observation sequence.
    Birdify(BirdifyArgs),
    /// Score a reconstruction against ground truth.
    Evaluate(EvaluateArgs),
    /// Benchmark several methods on the test split of a dataset.
    Compare(CompareArgs),
    /// Draw a reconstruction (and optionally its ground truth) as SVG.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MotionArg {
    Cv,
    Sf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Intra,
    Cross,
}

#[derive(Args, Clone)]
struct CameraArgs {
    /// Horizontal field of view in degrees.
    #[arg(long, default_value_t = 120.0)]
    fov: f64,
    /// Focal length in normalized image units.
    #[arg(long, default_value_t = 2.46)]
    focal: f64,
    /// Camera height above the ground in metres.
    #[arg(long, default_value_t = 1.6)]
    camera_height: f64,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "cv")]
    model: MotionArg,
    /// Number of walkers.
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Headings lie within this many radians of a common direction.
    #[arg(long, default_value_t = std::f64::consts::PI)]
    heading_spread: f64,
    /// Half side of the square start area in metres.
    #[arg(long, default_value_t = 5.0)]
    area: f64,
    /// Minimum distance between walkers in metres.
    #[arg(long, default_value_t = 0.0)]
    min_separation: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    observer: u64,
    #[command(flatten)]
    camera: CameraArgs,
    /// Standard deviation of the noise added to box centres.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth sidecar; defaults to `<out stem>.sidecar.jsonl`.
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of scene files (`.jsonl` scenes or ETH/UCY `.txt`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "intra")]
    split: SplitArg,
    /// Held-out scene (file stem) for the cross-scene split.
    #[arg(long)]
    test_scene: Option<String>,
    #[arg(long, default_value_t = 400)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    curriculum_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Frames per optimizer step.
    #[arg(long, default_value_t = 8)]
    window: usize,
    /// Train on the model's own rollout instead of ground-truth queries.
    #[arg(long)]
    no_teacher_forcing: bool,
    /// Switch from teacher forcing to own rollout at this epoch.
    #[arg(long)]
    rollout_after: Option<usize>,
    /// Final learning rate as a fraction of `--lr` (cosine decay).
    #[arg(long, default_value_t = 1.0)]
    lr_final_fraction: f64,
    /// Train the motion-only baseline.
    #[arg(long)]
    motion_only: bool,
    /// Ablation: feed world coordinates instead of camera-relative ones.
    #[arg(long)]
    no_reltransform: bool,
    /// Overwrite the checkpoint every this many epochs (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Loss curve CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[command(flatten)]
    camera: CameraArgs,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

#[derive(Args)]
struct BirdifyArgs {
    #[arg(long)]
    obs: PathBuf,
    /// Ground-truth sidecar of the observations (needed for the gauge).
    #[arg(long)]
    sidecar: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    /// Refine each ego-motion estimate against the reprojection residual.
    #[arg(long)]
    refine: bool,
    /// Require a checkpoint trained without the relative transform.
    #[arg(long)]
    no_reltransform: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    result: PathBuf,
    /// Scene file with the ground-truth tracks.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma separated: vbf, vbf+refine, vbf-noreltransform, transmotion, geovb-cv, geovb-sf.
    #[arg(long, value_delimiter = ',', default_value = "vbf,vbf+refine,transmotion,geovb-cv,geovb-sf")]
    methods: Vec<String>,
    /// Checkpoint for vbf and vbf+refine.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    transmotion_ckpt: Option<PathBuf>,
    #[arg(long)]
    noreltransform_ckpt: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "intra")]
    split: SplitArg,
    #[arg(long)]
    test_scene: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    camera: CameraArgs,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Leave out wall-clock timing so reports are reproducible bit for bit.
    #[arg(long)]
    no_timing: bool,
    #[arg(long, default_value_t = 10)]
    geovb_samples: usize,
    #[arg(long, default_value_t = 5)]
    geovb_iterations: usize,
    /// CSV table; the JSON report goes next to it with a `.json` extension.
    #[arg(long)]
    out: PathBuf,
    /// Per-frame error dump (JSONL).
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    result: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Project(a) => commands::project(a),
        Command::Train(a) => commands::train(a),
        Command::Birdify(a) => commands::birdify(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Compare(a) => commands::compare(a),
        Command::Plot(a) => commands::plot(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! `f2c`: register depth sequences, generate synthetic scenes, and score
//! trajectories against point-correspondence benchmarks.
//!
//! Exit codes: 0 success, 1 input or I/O error, 2 preprocessing abort,
//! 3 solver abort. Failures print one `f2c: error kind=<kind> reason=<text>`
//! line on stderr.

mod mesh;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fine2coarse::bench::{
    ablation_csv, histogram_svg, load_benchmark, offset_histogram, run_ablations, write_benchmark, BenchError,
    BenchmarkReport, LoadedBenchmark,
};
use fine2coarse::geom::relative;
use fine2coarse::ingest::synth::{corridor_scene, single_room_scene, two_room_scene};
use fine2coarse::ingest::{
    load_sequence, perturb_trajectory, plant_benchmark, save_depth, synth_scene, write_manifest, DepthFrame, DepthMode,
    IngestError, Intrinsics, SyntheticScene,
};
use fine2coarse::pairwise::{odometry_matches, MatchStore};
use fine2coarse::pipeline::{
    content_hash, load_trajectory, save_trajectory, PipelineConfig, PipelineError, Registration, StructuralModel,
    Trajectory, TrajectoryFormat, TrajectoryMeta,
};

/// Environment variable naming the default config file.
const CONFIG_ENV: &str = "F2C_CONFIG";
/// Point matches synthesized per consecutive pair from an odometry file.
const ODOMETRY_MATCHES: usize = 200;

#[derive(Parser)]
#[command(name = "f2c", version, about = "Fine-to-coarse global registration of RGB-D scans")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a depth sequence.
    Register(RegisterArgs),
    /// Render a synthetic scene with ground truth and a planted benchmark.
    Synth(SynthArgs),
    /// Print the benchmark RMSE and its lower bound for a trajectory.
    Eval(EvalArgs),
    /// Write the error-by-frame-offset histogram as CSV and SVG.
    Histogram(HistogramArgs),
    /// Run the four structure / fine-to-coarse ablation variants.
    Ablate(AblateArgs),
    /// Fuse registered frames into a binary PLY point cloud.
    ExportMesh(ExportMeshArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Frame list: one depth PNG per line, in capture order.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    intrinsics: PathBuf,
    /// Raw depth encoding: millimeters or sun3d_shift.
    #[arg(long = "depth-mode", default_value = "millimeters")]
    depth_mode: DepthMode,
}

#[derive(Args)]
struct ConfigArgs {
    /// Key = value config file; flags given here override it.
    #[arg(long, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    l0: Option<usize>,
    /// Relation angle tolerance in degrees.
    #[arg(long = "sigma-theta")]
    sigma_theta: Option<f64>,
    #[arg(long = "weights.w_S", value_name = "W")]
    w_s: Option<f64>,
    #[arg(long = "weights.w_P", value_name = "W")]
    w_p: Option<f64>,
    #[arg(long = "weights.w_H", value_name = "W")]
    w_h: Option<f64>,
    #[arg(long = "weights.w_G", value_name = "W")]
    w_g: Option<f64>,
    #[arg(long = "weights.w_C", value_name = "W")]
    w_c: Option<f64>,
    #[arg(long = "weights.w_L", value_name = "W")]
    w_l: Option<f64>,
    #[arg(long = "weights.w_I", value_name = "W")]
    w_i: Option<f64>,
    /// Any other config key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct RegisterArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Pairwise odometry (frame k+1 into frame k) used instead of keypoint matching.
    #[arg(long)]
    odometry: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// `tum` also writes trajectory.tum next to the native file.
    #[arg(long, default_value = "native")]
    format: TrajectoryFormat,
    /// Checkpoint after every iteration into this directory.
    #[arg(long = "checkpoint-dir")]
    checkpoint_dir: Option<PathBuf>,
    /// Continue from the latest checkpoint in --checkpoint-dir.
    #[arg(long, requires = "checkpoint_dir")]
    resume: bool,
    /// Write every iteration's constraints to this file as JSON lines.
    #[arg(long = "dump-constraints")]
    dump_constraints: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    SingleRoom,
    TwoRoom,
    Corridor,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description (JSON).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Frame count for the single-room and corridor presets.
    #[arg(long)]
    frames: Option<usize>,
    /// Overrides the scene seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "depth-mode", default_value = "millimeters")]
    depth_mode: DepthMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchInput {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    benchmark: PathBuf,
    /// Benchmark is whitespace columns `frame_a u_a v_a frame_b u_b v_b`.
    #[arg(long)]
    columns: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    bench: BenchInput,
    #[arg(long)]
    trajectory: PathBuf,
    /// Also write the full report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HistogramArgs {
    #[command(flatten)]
    bench: BenchInput,
    #[arg(long)]
    trajectory: PathBuf,
    /// Bin edges in frames, comma separated. Defaults to powers of two.
    #[arg(long, value_delimiter = ',')]
    edges: Option<Vec<usize>>,
    /// Output directory for histogram.csv and histogram.svg.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    bench: BenchInput,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    odometry: Option<PathBuf>,
    /// CSV report path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportMeshArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    trajectory: PathBuf,
    /// Structural model dump; its parent proxies are added as quads.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Pixel stride of the subsampled points.
    #[arg(long, default_value_t = 4)]
    stride: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Input(String),
    Preprocess(String),
    Solver(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Preprocess(_) => 2,
            Failure::Solver(_) => 3,
        }
    }

    fn report(&self) {
        let (kind, reason) = match self {
            Failure::Input(r) => ("input", r),
            Failure::Preprocess(r) => ("preprocess", r),
            Failure::Solver(r) => ("solver", r),
        };
        let reason = reason.replace(['\n', '\r'], " ");
        eprintln!("f2c: error kind={kind} reason={reason}");
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Preprocess { .. } => Failure::Preprocess(e.to_string()),
            PipelineError::Solver { .. } => Failure::Solver(e.to_string()),
            other => Failure::Input(other.to_string()),
        }
    }
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<IngestError> for Failure {
    fn from(e: IngestError) -> Self {
        Failure::Input(e.to_string())
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Input(format!("{what} not found: {}", path.display())))
    }
}

fn load_frames(input: &InputArgs) -> Result<Vec<DepthFrame>> {
    require(&input.manifest, "manifest")?;
    require(&input.intrinsics, "intrinsics")?;
    let k = Intrinsics::load(&input.intrinsics)?;
    Ok(load_sequence(&input.manifest, &k, input.depth_mode)?)
}

fn build_config(args: &ConfigArgs) -> Result<PipelineConfig> {
    let mut config = match &args.config {
        Some(path) => {
            require(path, "config")?;
            let text = fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
            PipelineConfig::parse(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?
        }
        None => PipelineConfig::default(),
    };
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut flag = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            overrides.push((key.to_string(), v));
        }
    };
    flag("seed", args.seed.map(|v| v.to_string()));
    flag("l0", args.l0.map(|v| v.to_string()));
    flag("sigma_theta", args.sigma_theta.map(|v| v.to_string()));
    flag("weights.w_S", args.w_s.map(|v| v.to_string()));
    flag("weights.w_P", args.w_p.map(|v| v.to_string()));
    flag("weights.w_H", args.w_h.map(|v| v.to_string()));
    flag("weights.w_G", args.w_g.map(|v| v.to_string()));
    flag("weights.w_C", args.w_c.map(|v| v.to_string()));
    flag("weights.w_L", args.w_l.map(|v| v.to_string()));
    flag("weights.w_I", args.w_i.map(|v| v.to_string()));
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Input(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    for (k, v) in overrides {
        config.set(&k, &v).map_err(|e| Failure::Input(format!("override {k}: {e}")))?;
    }
    config.validate().map_err(|e| Failure::Input(e.to_string()))?;
    Ok(config)
}

/// Matches reproducing a pairwise odometry file, or `None` without one.
fn odometry_store(path: Option<&Path>, frames: &[DepthFrame], seed: u64) -> Result<Option<MatchStore>> {
    let Some(path) = path else { return Ok(None) };
    require(path, "odometry")?;
    let local = load_trajectory(path)?;
    if local.len() + 1 != frames.len() {
        return Err(Failure::Input(format!(
            "{}: {} transforms for {} frames, expected {}",
            path.display(),
            local.len(),
            frames.len(),
            frames.len().saturating_sub(1)
        )));
    }
    Ok(Some(odometry_matches(frames, &local.poses, ODOMETRY_MATCHES, seed)))
}

fn load_checked_trajectory(path: &Path, frames: usize) -> Result<Trajectory> {
    require(path, "trajectory")?;
    let t = load_trajectory(path)?;
    if t.len() != frames {
        return Err(Failure::Input(format!(
            "frame count mismatch: trajectory {} has {} poses, manifest has {} frames",
            path.display(),
            t.len(),
            frames
        )));
    }
    Ok(t)
}

fn load_bench(b: &BenchInput, frames: &[DepthFrame]) -> Result<LoadedBenchmark> {
    require(&b.benchmark, "benchmark")?;
    Ok(load_benchmark(&b.benchmark, frames, b.columns)?)
}

fn cmd_register(args: &RegisterArgs) -> Result<()> {
    let frames = load_frames(&args.input)?;
    let config = build_config(&args.config)?;
    let matches = odometry_store(args.odometry.as_deref(), &frames, config.seed)?;
    let mut run = match (&args.checkpoint_dir, args.resume) {
        (Some(dir), true) => Registration::resume(&frames, &config, matches.as_ref(), dir)?,
        _ => Registration::new(&frames, &config, matches.as_ref())?,
    };
    if let Some(path) = &args.dump_constraints {
        run.dump_constraints_to(path)?;
    }
    let out = run.run(args.checkpoint_dir.as_deref())?;
    create_dir(&args.out)?;
    save_trajectory(&out.trajectory, &args.out.join("trajectory.txt"), TrajectoryFormat::Native)?;
    if args.format == TrajectoryFormat::Tum {
        save_trajectory(&out.trajectory, &args.out.join("trajectory.tum"), TrajectoryFormat::Tum)?;
    }
    out.model.save(&args.out.join("model.json"))?;
    let hash = config.hash();
    let mut log = format!("# config_hash {hash}\n").into_bytes();
    out.write_energy_log(&mut log).expect("in-memory write");
    write_file(&args.out.join("energy.csv"), log)?;
    let energy = out.trajectory.meta.energy.map_or(f64::NAN, |e| e.total);
    println!(
        "registered {} frames in {} iterations ({} failed pairs), energy {energy:.6e}, config_hash {hash}",
        frames.len(),
        out.iterations.len(),
        out.failed_pairs
    );
    Ok(())
}

fn load_scene(args: &SynthArgs) -> Result<SyntheticScene> {
    let seed = args.seed.unwrap_or(1);
    let mut scene = match (&args.spec, args.preset) {
        (Some(path), _) => {
            require(path, "scene spec")?;
            let text = fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
            SyntheticScene::from_json(&text)?
        }
        (None, Some(Preset::SingleRoom)) => single_room_scene(args.frames.unwrap_or(100), seed),
        (None, Some(Preset::Corridor)) => corridor_scene(args.frames.unwrap_or(2000), seed),
        (None, Some(Preset::TwoRoom)) => {
            if args.frames.is_some() {
                return Err(Failure::Input("the two-room preset has a fixed frame count".into()));
            }
            two_room_scene(seed)
        }
        (None, None) => return Err(Failure::Input("give --spec or --preset".into())),
    };
    if let Some(s) = args.seed {
        scene.seed = s;
    }
    scene.validate()?;
    Ok(scene)
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let scene = load_scene(args)?;
    let seq = synth_scene(&scene, scene.seed)?;
    let hash = content_hash(&scene.to_json());
    let depth_dir = args.out.join("depth");
    create_dir(&depth_dir)?;
    let mut names = Vec::with_capacity(seq.frames.len());
    for f in &seq.frames {
        let name = format!("depth/{:06}.png", f.index);
        save_depth(f, &args.out.join(&name), args.depth_mode)?;
        names.push(name);
    }
    write_manifest(&args.out.join("manifest.txt"), &names)?;
    write_file(&args.out.join("intrinsics.txt"), scene.intrinsics.to_text())?;
    let meta = TrajectoryMeta { iteration: None, energy: None, config_hash: Some(hash.clone()) };
    let gt = Trajectory { poses: seq.ground_truth.clone(), meta: meta.clone() };
    save_trajectory(&gt, &args.out.join("ground_truth.txt"), TrajectoryFormat::Native)?;
    let local = match &scene.drift {
        Some(drift) => perturb_trajectory(&seq.ground_truth, drift, scene.seed),
        None => seq.ground_truth.windows(2).map(|w| relative(&w[1], &w[0])).collect(),
    };
    save_trajectory(&Trajectory { poses: local, meta }, &args.out.join("odometry.txt"), TrajectoryFormat::Native)?;
    let entries = match &scene.benchmark {
        Some(plan) => plant_benchmark(&scene, &seq.world_poses, plan, scene.seed),
        None => Vec::new(),
    };
    write_benchmark(&args.out.join("benchmark.json"), &entries)?;
    println!(
        "rendered {} frames, {} benchmark correspondences, scene hash {hash}",
        seq.frames.len(),
        entries.len()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let frames = load_frames(&args.bench.input)?;
    let traj = load_checked_trajectory(&args.trajectory, frames.len())?;
    let bench = load_bench(&args.bench, &frames)?;
    let report = BenchmarkReport::new(&traj.poses, &bench, true, traj.meta.config_hash.clone())?;
    println!("rmse {:.3}", report.rmse);
    println!("lower_bound {:.3}", report.lower_bound.unwrap_or(f64::NAN));
    println!("correspondences {} dropped {}", bench.correspondences.len(), bench.dropped);
    println!("config_hash {}", report.config_hash.as_deref().unwrap_or("none"));
    if let Some(out) = &args.out {
        write_file(out, report.to_json())?;
    }
    Ok(())
}

fn cmd_histogram(args: &HistogramArgs) -> Result<()> {
    let frames = load_frames(&args.bench.input)?;
    let traj = load_checked_trajectory(&args.trajectory, frames.len())?;
    let bench = load_bench(&args.bench, &frames)?;
    let hist = offset_histogram(&traj.poses, &bench.correspondences, args.edges.as_deref())?;
    let hash = traj.meta.config_hash.as_deref().unwrap_or("none");
    create_dir(&args.out)?;
    write_file(&args.out.join("histogram.csv"), format!("# config_hash {hash}\n{}", hist.to_csv()))?;
    let svg = histogram_svg(&hist, "mean error by frame offset");
    let svg = svg.replacen('\n', &format!("\n<!-- config_hash {hash} -->\n"), 1);
    write_file(&args.out.join("histogram.svg"), svg)?;
    let mut table = String::new();
    for b in &hist.bins {
        let _ = writeln!(table, "bin {:>5}-{:<5} count {:>6} mean_error {:.4}", b.lo, b.hi, b.count, b.mean_error);
    }
    print!("{table}");
    let n = bench.correspondences.len();
    let sum = hist.total() + hist.outside;
    println!("bins sum {} + outside {} = {sum} of {n} correspondences", hist.total(), hist.outside);
    if sum != n {
        return Err(Failure::Input(format!("histogram bins sum to {sum}, expected {n}")));
    }
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let frames = load_frames(&args.bench.input)?;
    let config = build_config(&args.config)?;
    let bench = load_bench(&args.bench, &frames)?;
    let matches = odometry_store(args.odometry.as_deref(), &frames, config.seed)?;
    let rows = run_ablations(&frames, &config, matches.as_ref(), &bench.correspondences)?;
    let csv = ablation_csv(&rows);
    write_file(&args.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_export_mesh(args: &ExportMeshArgs) -> Result<()> {
    let frames = load_frames(&args.input)?;
    let traj = load_checked_trajectory(&args.trajectory, frames.len())?;
    let model = match &args.model {
        Some(path) => {
            require(path, "model")?;
            Some(StructuralModel::load(path)?)
        }
        None => None,
    };
    if args.stride == 0 {
        return Err(Failure::Input("stride must be positive".into()));
    }
    let cloud = mesh::fuse(&frames, &traj.poses, args.stride);
    let quads = model.as_ref().map(mesh::proxy_quads).unwrap_or_default();
    let bytes = mesh::to_ply(&cloud, &quads, traj.meta.config_hash.as_deref());
    write_file(&args.out, bytes)?;
    println!("wrote {} points and {} proxy planes", cloud.len(), quads.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            Failure::Input(format!("thread pool: {e}")).report();
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Histogram(a) => cmd_histogram(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::ExportMesh(a) => cmd_export_mesh(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            f.report();
            ExitCode::from(f.code())
        }
    }
}

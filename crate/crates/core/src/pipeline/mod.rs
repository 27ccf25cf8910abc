//! Fine-to-coarse registration: preprocessing, then iterations of constraint
//! detection and solving over windows that double in length until one window
//! spans the whole sequence.

pub mod config;
pub mod trajectory;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{content_hash, PipelineConfig};
pub use trajectory::{load_trajectory, parse_trajectory, save_trajectory, Trajectory, TrajectoryFormat, TrajectoryMeta};

use crate::constraints::{detect_constraints, dump_constraints, make_windows, ConstraintSet, RelationKind, WindowHistory};
use crate::features::{extract_frame, extract_geometry, FrameFeatures};
use crate::geom::{Plane, RigidTransform};
use crate::ingest::DepthFrame;
use crate::pairwise::{align_matches, align_pair, concatenate, AlignmentStatus, LocalAlignment, MatchStore};
use crate::solver::{self, ParameterState, Problem, SolveReport, SolverError};

/// Version tag of checkpoint files.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config{}: {reason}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, reason: String },
    #[error("registration needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("preprocessing failed: {failed} of {pairs} consecutive frame pairs could not be aligned (first failure: frames {first} and {})", first + 1)]
    Preprocess { failed: usize, pairs: usize, first: usize },
    #[error("iteration {iteration}: {source}")]
    Solver {
        iteration: usize,
        #[source]
        source: SolverError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Format { path: PathBuf, line: usize, reason: String },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Per-frame features and the initial trajectory.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub features: Vec<FrameFeatures>,
    /// `local[k]` takes frame `k + 1` into frame `k`.
    pub local: Vec<LocalAlignment>,
    pub initial: Vec<RigidTransform>,
    pub failed_pairs: usize,
}

fn pair_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Extracts features and aligns consecutive frames, from `matches` when given
/// and from intensity keypoints otherwise.
pub fn preprocess(
    frames: &[DepthFrame],
    config: &PipelineConfig,
    matches: Option<&MatchStore>,
) -> Result<Preprocessed, PipelineError> {
    if frames.len() < 2 {
        return Err(PipelineError::TooFewFrames(frames.len()));
    }
    config.validate()?;
    let features: Vec<FrameFeatures> = frames
        .par_iter()
        .map(|f| match matches {
            Some(_) => extract_geometry(f, &config.features),
            None => extract_frame(f, &config.features, &config.keypoints),
        })
        .collect();
    let local: Vec<LocalAlignment> = (0..frames.len() - 1)
        .into_par_iter()
        .map(|k| {
            let seed = pair_seed(config.seed, k);
            match matches {
                Some(store) => store
                    .get(k, k + 1)
                    .map_or_else(LocalAlignment::fallback, |m| align_matches(m, &config.ransac, seed)),
                None => align_pair(&features[k].keypoints, &features[k + 1].keypoints, &config.ransac, seed),
            }
        })
        .collect();
    let failures: Vec<usize> =
        (0..local.len()).filter(|&k| local[k].status == AlignmentStatus::FallbackIdentity).collect();
    if failures.len() as f64 > config.max_failed_pairs * local.len() as f64 {
        return Err(PipelineError::Preprocess { failed: failures.len(), pairs: local.len(), first: failures[0] });
    }
    let initial = concatenate(&local);
    Ok(Preprocessed { features, local, initial, failed_pairs: failures.len() })
}

/// A parent proxy as written to the structural model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProxy {
    pub id: u32,
    pub normal: [f64; 3],
    pub point: [f64; 3],
    pub inlier_count: usize,
    pub window: usize,
    /// `[frame, patch]` of every child.
    pub children: Vec<[usize; 2]>,
    /// World-space centroid and RMS radius of every child patch.
    pub support: Vec<([f64; 3], f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRelation {
    pub kind: RelationKind,
    pub a: u32,
    pub b: u32,
    pub weight: f64,
}

/// Proxies, hierarchy, and relations of the last iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StructuralModel {
    pub config_hash: String,
    pub iteration: usize,
    pub proxies: Vec<ModelProxy>,
    pub relations: Vec<ModelRelation>,
    pub correspondences: usize,
}

impl StructuralModel {
    fn build(
        set: &ConstraintSet,
        planes: &[Plane],
        features: &[FrameFeatures],
        poses: &[RigidTransform],
        config_hash: &str,
    ) -> Self {
        let proxies = set
            .proxies
            .iter()
            .zip(planes)
            .map(|(p, plane)| {
                let support = p
                    .children
                    .iter()
                    .filter_map(|c| {
                        let patch = features.get(c.frame as usize)?.patches.get(c.patch as usize)?;
                        let m = &patch.moments;
                        let centre = poses[c.frame as usize].transform_point(&m.mean);
                        let radius = (m.scatter.trace() / m.count.max(1.0)).sqrt();
                        Some((centre.into(), radius))
                    })
                    .collect();
                ModelProxy {
                    id: p.id.0,
                    normal: plane.normal.into(),
                    point: plane.point.into(),
                    inlier_count: p.inlier_count,
                    window: p.window,
                    children: p.children.iter().map(|c| [c.frame as usize, c.patch as usize]).collect(),
                    support,
                }
            })
            .collect();
        let relations = set
            .relations
            .iter()
            .map(|r| ModelRelation { kind: r.kind, a: r.a.0, b: r.b.0, weight: r.weight })
            .collect();
        Self {
            config_hash: config_hash.to_string(),
            iteration: set.iteration,
            proxies,
            relations,
            correspondences: set.correspondences.len(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self).expect("model serializes");
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::Format { path: path.into(), line: e.line(), reason: e.to_string() })
    }
}

/// Summary of one completed iteration.
#[derive(Debug, Clone)]
pub struct IterationSummary {
    pub iteration: usize,
    pub window_length: usize,
    pub windows: usize,
    pub proxies: usize,
    pub coplanarity: usize,
    pub relations: usize,
    pub plane_samples: usize,
    pub raw_correspondences: usize,
    pub correspondences: usize,
    pub report: SolveReport,
    pub poses: Vec<RigidTransform>,
}

/// Everything carried from one iteration to the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationState {
    pub poses: Vec<RigidTransform>,
    pub history: WindowHistory,
    /// Iterations completed so far.
    pub completed: usize,
    pub model: Option<StructuralModel>,
    pub last_report: Option<SolveReport>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config_hash: String,
    state: RegistrationState,
}

fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    seed.wrapping_add((iteration as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// One iteration of the loop body on `state` with window length `length`.
pub fn run_iteration(
    pre: &Preprocessed,
    config: &PipelineConfig,
    state: &RegistrationState,
    length: usize,
) -> Result<(RegistrationState, IterationSummary), PipelineError> {
    iterate(pre, config, state, length, None)
}

fn iterate(
    pre: &Preprocessed,
    config: &PipelineConfig,
    state: &RegistrationState,
    length: usize,
    dump: Option<&mut ConstraintDump>,
) -> Result<(RegistrationState, IterationSummary), PipelineError> {
    let n = state.poses.len();
    let iteration = state.completed;
    let windows = make_windows(n, length, iteration);
    let mut history = state.history.clone();
    history.push(length);
    let params = config.constraint_params();
    let set = detect_constraints(&pre.features, &state.poses, &windows, &history, &params, iteration_seed(config.seed, iteration));
    let previous = ParameterState {
        poses: state.poses.clone(),
        proxy_planes: set.proxies.iter().map(|p| p.plane).collect(),
    };
    if let Some(d) = dump {
        dump_constraints(&set, &mut d.out).and_then(|_| d.out.flush()).map_err(io_err(&d.path))?;
    }
    let fail = |source| PipelineError::Solver { iteration, source };
    let problem = Problem::build(&pre.features, &set, &pre.initial, &previous, config.problem).map_err(fail)?;
    let (next, report) = solver::solve(&problem, &previous, &config.weights, &config.solver).map_err(fail)?;
    let model = StructuralModel::build(&set, &next.proxy_planes, &pre.features, &next.poses, &config.hash());
    let summary = IterationSummary {
        iteration,
        window_length: length,
        windows: windows.len(),
        proxies: set.proxies.len(),
        coplanarity: set.coplanarity.len(),
        relations: set.relations.len(),
        plane_samples: set.plane_samples.len(),
        raw_correspondences: set.raw_correspondences,
        correspondences: set.correspondences.len(),
        report: report.clone(),
        poses: next.poses.clone(),
    };
    let state = RegistrationState {
        poses: next.poses,
        history,
        completed: iteration + 1,
        model: Some(model),
        last_report: Some(report),
    };
    Ok((state, summary))
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct RegistrationOutput {
    pub trajectory: Trajectory,
    pub model: StructuralModel,
    pub initial: Vec<RigidTransform>,
    pub failed_pairs: usize,
    /// Iterations run by this call; resumed runs omit earlier ones.
    pub iterations: Vec<IterationSummary>,
}

impl RegistrationOutput {
    /// Solver log of every iteration as CSV.
    pub fn write_energy_log(&self, out: &mut impl Write) -> std::io::Result<()> {
        for (i, it) in self.iterations.iter().enumerate() {
            solver::write_energy_log(out, it.iteration, &it.report, i == 0)?;
        }
        Ok(())
    }
}

struct ConstraintDump {
    path: PathBuf,
    out: std::io::BufWriter<fs::File>,
}

/// A registration run that can be stepped, checkpointed, and resumed.
pub struct Registration {
    pub config: PipelineConfig,
    pub pre: Preprocessed,
    pub state: RegistrationState,
    lengths: Vec<usize>,
    hash: String,
    dump: Option<ConstraintDump>,
}

impl Registration {
    pub fn new(frames: &[DepthFrame], config: &PipelineConfig, matches: Option<&MatchStore>) -> Result<Self, PipelineError> {
        let pre = preprocess(frames, config, matches)?;
        let n = frames.len();
        let state = RegistrationState {
            poses: pre.initial.clone(),
            history: WindowHistory::new(n),
            completed: 0,
            model: None,
            last_report: None,
        };
        Ok(Self { config: config.clone(), pre, state, lengths: config.window_lengths(n), hash: config.hash(), dump: None })
    }

    /// Window length of every iteration.
    pub fn schedule(&self) -> &[usize] {
        &self.lengths
    }

    pub fn is_done(&self) -> bool {
        self.state.completed >= self.lengths.len()
    }

    /// Runs the next iteration; `None` once all have run.
    pub fn step(&mut self) -> Result<Option<IterationSummary>, PipelineError> {
        if self.is_done() {
            return Ok(None);
        }
        let length = self.lengths[self.state.completed];
        let (state, summary) = iterate(&self.pre, &self.config, &self.state, length, self.dump.as_mut())?;
        self.state = state;
        Ok(Some(summary))
    }

    /// Writes the constraints of every later iteration to `path` as JSON lines.
    pub fn dump_constraints_to(&mut self, path: &Path) -> Result<(), PipelineError> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        self.dump = Some(ConstraintDump { path: path.into(), out: std::io::BufWriter::new(file) });
        Ok(())
    }

    fn checkpoint_path(dir: &Path, completed: usize) -> PathBuf {
        dir.join(format!("state_{completed:03}.json"))
    }

    /// Writes the current state as `state_<completed>.json` in `dir`.
    pub fn checkpoint(&self, dir: &Path) -> Result<PathBuf, PipelineError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = Self::checkpoint_path(dir, self.state.completed);
        let ck = Checkpoint { version: CHECKPOINT_VERSION, config_hash: self.hash.clone(), state: self.state.clone() };
        fs::write(&path, serde_json::to_string(&ck).expect("checkpoint serializes")).map_err(io_err(&path))?;
        Ok(path)
    }

    /// Rebuilds the run and restores the latest checkpoint in `dir`.
    pub fn resume(
        frames: &[DepthFrame],
        config: &PipelineConfig,
        matches: Option<&MatchStore>,
        dir: &Path,
    ) -> Result<Self, PipelineError> {
        let mut latest: Option<(usize, PathBuf)> = None;
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            let Some(name) = path.file_name().and_then(|s| s.to_str()) else { continue };
            let Some(k) = name.strip_prefix("state_").and_then(|s| s.strip_suffix(".json")) else { continue };
            if let Ok(k) = k.parse::<usize>() {
                if latest.as_ref().is_none_or(|(best, _)| k > *best) {
                    latest = Some((k, path));
                }
            }
        }
        let (_, path) = latest.ok_or_else(|| PipelineError::Checkpoint {
            path: dir.into(),
            reason: "no state files".into(),
        })?;
        let reject = |reason: String| PipelineError::Checkpoint { path: path.clone(), reason };
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| reject(e.to_string()))?;
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(reject(format!("version {version:?}, expected {CHECKPOINT_VERSION}")));
        }
        let ck: Checkpoint = serde_json::from_value(value).map_err(|e| reject(e.to_string()))?;
        let mut run = Self::new(frames, config, matches)?;
        if ck.config_hash != run.hash {
            return Err(reject(format!("config hash {} does not match the current config {}", ck.config_hash, run.hash)));
        }
        if ck.state.poses.len() != frames.len() {
            return Err(reject(format!("{} poses for {} frames", ck.state.poses.len(), frames.len())));
        }
        run.state = ck.state;
        Ok(run)
    }

    /// Runs the remaining iterations, checkpointing after each when `dir` is given.
    pub fn run(mut self, checkpoint_dir: Option<&Path>) -> Result<RegistrationOutput, PipelineError> {
        let mut iterations = Vec::new();
        while let Some(summary) = self.step()? {
            if let Some(dir) = checkpoint_dir {
                self.checkpoint(dir)?;
            }
            iterations.push(summary);
        }
        Ok(self.finish(iterations))
    }

    fn finish(self, iterations: Vec<IterationSummary>) -> RegistrationOutput {
        let meta = TrajectoryMeta {
            iteration: self.state.completed.checked_sub(1),
            energy: self.state.last_report.as_ref().map(|r| r.final_energy),
            config_hash: Some(self.hash.clone()),
        };
        RegistrationOutput {
            trajectory: Trajectory { poses: self.state.poses, meta },
            model: self.state.model.unwrap_or_default(),
            initial: self.pre.initial,
            failed_pairs: self.pre.failed_pairs,
            iterations,
        }
    }
}

/// Registers `frames` end to end.
pub fn register(
    frames: &[DepthFrame],
    config: &PipelineConfig,
    matches: Option<&MatchStore>,
) -> Result<RegistrationOutput, PipelineError> {
    Registration::new(frames, config, matches)?.run(None)
}

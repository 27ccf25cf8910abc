//! Evaluation against ground-truth point correspondences: RMSE, the
//! correspondence-only lower bound, the frame-offset histogram, and ablations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::RigidTransform;
use crate::ingest::DepthFrame;
use crate::pairwise::{fit_rigid, MatchStore};
use crate::pipeline::{register, PipelineConfig, PipelineError};
use crate::solver::{self, EnergyWeights, ParameterState, PointPair, Problem, ProblemOptions, SolveOptions, SolverError};

/// One annotated pixel correspondence between two frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    pub frame_a: usize,
    pub u_a: f64,
    pub v_a: f64,
    pub frame_b: usize,
    pub u_b: f64,
    pub v_b: f64,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("benchmark{}: {reason}", index.map(|i| format!(" entry {i}")).unwrap_or_default())]
    Format { index: Option<usize>, reason: String },
    #[error("correspondence {index} references frame {frame}, which the trajectory does not cover")]
    MissingFrame { index: usize, frame: usize },
    #[error("no correspondences")]
    Empty,
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// A benchmark entry with both endpoints backprojected to camera space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthCorrespondence {
    pub frame_a: usize,
    pub frame_b: usize,
    pub pixel_a: (f64, f64),
    pub pixel_b: (f64, f64),
    pub xyz_a: Vector3<f64>,
    pub xyz_b: Vector3<f64>,
}

impl GroundTruthCorrespondence {
    pub fn offset(&self) -> usize {
        self.frame_b - self.frame_a
    }
}

/// Parses the JSON array form `[{frame_a, u_a, v_a, frame_b, u_b, v_b}, ...]`.
pub fn parse_benchmark(text: &str) -> Result<Vec<BenchmarkEntry>, BenchError> {
    let values: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| BenchError::Format { index: None, reason: e.to_string() })?;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            serde_json::from_value(v).map_err(|e| BenchError::Format { index: Some(i), reason: e.to_string() })
        })
        .collect()
}

/// Parses whitespace-separated columns `frame_a u_a v_a frame_b u_b v_b`, one
/// entry per line; `#` starts a comment.
pub fn parse_benchmark_columns(text: &str) -> Result<Vec<BenchmarkEntry>, BenchError> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let index = Some(out.len());
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 6 {
            return Err(BenchError::Format { index, reason: format!("expected 6 columns, found {}", t.len()) });
        }
        let frame = |s: &str| s.parse::<usize>().map_err(|_| BenchError::Format { index, reason: format!("bad frame {s:?}") });
        let px = |s: &str| s.parse::<f64>().map_err(|_| BenchError::Format { index, reason: format!("bad pixel {s:?}") });
        out.push(BenchmarkEntry {
            frame_a: frame(t[0])?,
            u_a: px(t[1])?,
            v_a: px(t[2])?,
            frame_b: frame(t[3])?,
            u_b: px(t[4])?,
            v_b: px(t[5])?,
        });
    }
    Ok(out)
}

pub fn read_benchmark(path: &Path, columns: bool) -> Result<Vec<BenchmarkEntry>, BenchError> {
    let text = fs::read_to_string(path).map_err(|source| BenchError::Io { path: path.into(), source })?;
    if columns {
        parse_benchmark_columns(&text)
    } else {
        parse_benchmark(&text)
    }
}

pub fn write_benchmark(path: &Path, entries: &[BenchmarkEntry]) -> Result<(), BenchError> {
    let text = serde_json::to_string_pretty(entries).expect("entries serialize");
    fs::write(path, text).map_err(|source| BenchError::Io { path: path.into(), source })
}

/// Correspondences plus the number of entries dropped for invalid depth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedBenchmark {
    pub correspondences: Vec<GroundTruthCorrespondence>,
    pub dropped: usize,
}

/// Backprojects entries through `frames`. Entries whose pixels lack valid depth
/// are dropped and counted; entries naming missing frames are errors.
pub fn resolve_benchmark(entries: &[BenchmarkEntry], frames: &[DepthFrame]) -> Result<LoadedBenchmark, BenchError> {
    let mut out = LoadedBenchmark::default();
    for (i, e) in entries.iter().enumerate() {
        let bad = |reason: String| BenchError::Format { index: Some(i), reason };
        for f in [e.frame_a, e.frame_b] {
            if f >= frames.len() {
                return Err(bad(format!("frame {f} out of range (have {})", frames.len())));
            }
        }
        if e.frame_a == e.frame_b {
            return Err(bad(format!("both endpoints in frame {}", e.frame_a)));
        }
        if ![e.u_a, e.v_a, e.u_b, e.v_b].iter().all(|v| v.is_finite()) {
            return Err(bad("non-finite pixel coordinate".into()));
        }
        let a = frames[e.frame_a].point_at_subpixel(e.u_a, e.v_a);
        let b = frames[e.frame_b].point_at_subpixel(e.u_b, e.v_b);
        let (Some(a), Some(b)) = (a, b) else {
            out.dropped += 1;
            continue;
        };
        let c = GroundTruthCorrespondence {
            frame_a: e.frame_a,
            frame_b: e.frame_b,
            pixel_a: (e.u_a, e.v_a),
            pixel_b: (e.u_b, e.v_b),
            xyz_a: a,
            xyz_b: b,
        };
        // Keep frame_a < frame_b.
        out.correspondences.push(if c.frame_a < c.frame_b {
            c
        } else {
            GroundTruthCorrespondence {
                frame_a: c.frame_b,
                frame_b: c.frame_a,
                pixel_a: c.pixel_b,
                pixel_b: c.pixel_a,
                xyz_a: c.xyz_b,
                xyz_b: c.xyz_a,
            }
        });
    }
    Ok(out)
}

pub fn load_benchmark(path: &Path, frames: &[DepthFrame], columns: bool) -> Result<LoadedBenchmark, BenchError> {
    resolve_benchmark(&read_benchmark(path, columns)?, frames)
}

/// World-space distance of every correspondence under `poses`.
pub fn correspondence_errors(poses: &[RigidTransform], corrs: &[GroundTruthCorrespondence]) -> Result<Vec<f64>, BenchError> {
    corrs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let pa = poses.get(c.frame_a).ok_or(BenchError::MissingFrame { index: i, frame: c.frame_a })?;
            let pb = poses.get(c.frame_b).ok_or(BenchError::MissingFrame { index: i, frame: c.frame_b })?;
            Ok((pa.transform_point(&c.xyz_a) - pb.transform_point(&c.xyz_b)).norm())
        })
        .collect()
}

fn root_mean_square(errors: &[f64]) -> f64 {
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

pub fn rmse(poses: &[RigidTransform], corrs: &[GroundTruthCorrespondence]) -> Result<f64, BenchError> {
    if corrs.is_empty() {
        return Err(BenchError::Empty);
    }
    Ok(root_mean_square(&correspondence_errors(poses, corrs)?))
}

/// Connected components of the correspondence graph over `n` frames, each
/// sorted, in order of their smallest frame. Frames without correspondences are
/// left out.
pub fn components(corrs: &[GroundTruthCorrespondence], n: usize) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut used = vec![false; n];
    for c in corrs {
        used[c.frame_a] = true;
        used[c.frame_b] = true;
        let (a, b) = (find(&mut parent, c.frame_a), find(&mut parent, c.frame_b));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for f in (0..n).filter(|&f| used[f]) {
        let r = find(&mut parent, f);
        groups.entry(r).or_default().push(f);
    }
    groups.into_values().collect()
}

/// Initial poses from a breadth-first spanning tree of pairwise rigid fits.
fn spanning_tree_poses(corrs: &[GroundTruthCorrespondence], n: usize, roots: &[usize]) -> Vec<RigidTransform> {
    let mut pairs: BTreeMap<(usize, usize), (Vec<Vector3<f64>>, Vec<Vector3<f64>>)> = BTreeMap::new();
    for c in corrs {
        let e = pairs.entry((c.frame_a, c.frame_b)).or_default();
        e.0.push(c.xyz_a);
        e.1.push(c.xyz_b);
    }
    // rel[(a, b)] maps frame b into frame a.
    let mut adj: Vec<Vec<(usize, RigidTransform)>> = vec![Vec::new(); n];
    for (&(a, b), (pa, pb)) in &pairs {
        let t = if pa.len() >= 3 { fit_rigid(pb, pa) } else { None }.unwrap_or_else(|| {
            let mean = |v: &[Vector3<f64>]| v.iter().sum::<Vector3<f64>>() / v.len() as f64;
            RigidTransform::new(Default::default(), mean(pa) - mean(pb))
        });
        adj[a].push((b, t));
        adj[b].push((a, t.inverse()));
    }
    let mut poses = vec![RigidTransform::identity(); n];
    let mut seen = vec![false; n];
    for &r in roots {
        seen[r] = true;
        let mut queue = std::collections::VecDeque::from([r]);
        while let Some(f) = queue.pop_front() {
            for &(g, t) in &adj[f] {
                if !seen[g] {
                    seen[g] = true;
                    poses[g] = crate::geom::compose(&poses[f], &t);
                    queue.push_back(g);
                }
            }
        }
    }
    poses
}

/// Weight of the pose inertia that keeps the lower-bound problem well posed.
const LOWER_BOUND_INERTIA: f64 = 1e-9;

/// Result of the correspondence-only alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerBound {
    pub rmse: f64,
    pub poses: Vec<RigidTransform>,
    pub components: usize,
}

/// Aligns `n` poses to the correspondences alone and reports the resulting RMSE.
/// The smallest frame of every connected component is held fixed.
pub fn lower_bound(corrs: &[GroundTruthCorrespondence], n: usize) -> Result<LowerBound, BenchError> {
    if corrs.is_empty() {
        return Err(BenchError::Empty);
    }
    if let Some((i, c)) = corrs.iter().enumerate().find(|(_, c)| c.frame_a.max(c.frame_b) >= n) {
        return Err(BenchError::MissingFrame { index: i, frame: c.frame_a.max(c.frame_b) });
    }
    let comps = components(corrs, n);
    let roots: Vec<usize> = comps.iter().map(|c| c[0]).collect();
    let initial = spanning_tree_poses(corrs, n, &roots);
    let mut problem = Problem::new(n, 0, ProblemOptions::default());
    let pairs: Vec<PointPair> = corrs
        .iter()
        .map(|c| PointPair { frame_a: c.frame_a, xyz_a: c.xyz_a, frame_b: c.frame_b, xyz_b: c.xyz_b })
        .collect();
    problem.add_point_pairs(&pairs)?;
    let state = ParameterState { poses: initial, proxy_planes: Vec::new() };
    problem.add_inertia(&state)?;
    let mut used = vec![false; n];
    for c in corrs {
        used[c.frame_a] = true;
        used[c.frame_b] = true;
    }
    problem.fix_poses(roots.iter().copied().chain((0..n).filter(|&f| !used[f])));
    let weights = EnergyWeights { w_s: 0.0, w_p: 0.0, w_h: 0.0, w_g: 0.0, w_c: 1.0, w_l: 0.0, w_i: LOWER_BOUND_INERTIA };
    let options = SolveOptions { max_inner_iterations: 50, min_relative_decrease: 1e-12, ..SolveOptions::default() };
    let (solved, _) = solver::solve(&problem, &state, &weights, &options)?;
    let rmse = rmse(&solved.poses, corrs)?;
    Ok(LowerBound { rmse, poses: solved.poses, components: comps.len() })
}

/// Bin edges `1, 2, 4, ...` up to the first power of two above `max_offset`.
pub fn default_edges(max_offset: usize) -> Vec<usize> {
    let mut edges = vec![1];
    while *edges.last().expect("non-empty") <= max_offset {
        let next = edges.last().expect("non-empty") * 2;
        edges.push(next);
    }
    edges
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    /// Offsets in `[lo, hi)`.
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub mean_error: f64,
    pub mean_squared_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<HistogramBin>,
    /// Correspondences whose offset falls outside every bin.
    pub outside: usize,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum::<usize>() + self.outside
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lo,hi,count,mean_error,mean_squared_error\n");
        for b in &self.bins {
            let _ = writeln!(s, "{},{},{},{},{}", b.lo, b.hi, b.count, b.mean_error, b.mean_squared_error);
        }
        s
    }
}

/// Mean error of correspondences grouped by frame offset into `[edges[i], edges[i+1])`.
/// Default edges are [`default_edges`] over the largest offset present.
pub fn offset_histogram(
    poses: &[RigidTransform],
    corrs: &[GroundTruthCorrespondence],
    edges: Option<&[usize]>,
) -> Result<Histogram, BenchError> {
    let errors = correspondence_errors(poses, corrs)?;
    let edges: Vec<usize> = match edges {
        Some(e) => e.to_vec(),
        None => default_edges(corrs.iter().map(|c| c.offset()).max().unwrap_or(1)),
    };
    let mut bins: Vec<HistogramBin> = edges
        .windows(2)
        .map(|w| HistogramBin { lo: w[0], hi: w[1], count: 0, mean_error: 0.0, mean_squared_error: 0.0 })
        .collect();
    let mut outside = 0;
    for (c, e) in corrs.iter().zip(&errors) {
        let off = c.offset();
        match bins.iter_mut().find(|b| b.lo <= off && off < b.hi) {
            Some(b) => {
                b.count += 1;
                b.mean_error += e;
                b.mean_squared_error += e * e;
            }
            None => outside += 1,
        }
    }
    for b in &mut bins {
        if b.count > 0 {
            b.mean_error /= b.count as f64;
            b.mean_squared_error /= b.count as f64;
        }
    }
    Ok(Histogram { bins, outside })
}

/// Bar chart of the per-bin mean error. Output bytes depend only on the input.
pub fn histogram_svg(hist: &Histogram, title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 48.0;
    let max = hist.bins.iter().map(|b| b.mean_error).fold(0.0, f64::max).max(1e-12);
    let slot = (W - 2.0 * PAD) / hist.bins.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, W / 2.0, xml_escape(title));
    let base = H - PAD;
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{base}" x2="{:.1}" y2="{base}" stroke="black"/>"#, W - PAD);
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{base}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{max:.4} m</text>"#, PAD - 4.0, PAD + 4.0);
    for (i, b) in hist.bins.iter().enumerate() {
        let h = (H - 2.0 * PAD) * b.mean_error / max;
        let x = PAD + slot * i as f64 + slot * 0.1;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="#4a7ab5"><title>{}-{}: {} pairs, mean {:.6} m</title></rect>"##,
            base - h,
            slot * 0.8,
            b.lo,
            b.hi - 1,
            b.count,
            b.mean_error
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
            x + slot * 0.4,
            base + 14.0,
            b.lo
        );
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">frame offset</text>"#, W / 2.0, H - 12.0);
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Evaluation of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rmse: f64,
    pub lower_bound: Option<f64>,
    pub dropped: usize,
    pub errors: Vec<f64>,
    pub histogram: Histogram,
    pub config_hash: Option<String>,
}

impl BenchmarkReport {
    pub fn new(
        poses: &[RigidTransform],
        bench: &LoadedBenchmark,
        with_lower_bound: bool,
        config_hash: Option<String>,
    ) -> Result<Self, BenchError> {
        let corrs = &bench.correspondences;
        let errors = correspondence_errors(poses, corrs)?;
        if errors.is_empty() {
            return Err(BenchError::Empty);
        }
        let lower_bound = if with_lower_bound { Some(lower_bound(corrs, poses.len())?.rmse) } else { None };
        Ok(Self {
            rmse: root_mean_square(&errors),
            lower_bound,
            dropped: bench.dropped,
            histogram: offset_histogram(poses, corrs, None)?,
            errors,
            config_hash,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per correspondence.
    pub fn to_csv(&self, corrs: &[GroundTruthCorrespondence]) -> String {
        let mut s = String::new();
        if let Some(h) = &self.config_hash {
            let _ = writeln!(s, "# config_hash {h}");
        }
        s.push_str("frame_a,frame_b,offset,error\n");
        for (c, e) in corrs.iter().zip(&self.errors) {
            let _ = writeln!(s, "{},{},{},{}", c.frame_a, c.frame_b, c.offset(), e);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoStructure,
    NoFineToCoarse,
    Neither,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoStructure, Variant::NoFineToCoarse, Variant::Neither];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoStructure => "no_structure",
            Variant::NoFineToCoarse => "no_fine_to_coarse",
            Variant::Neither => "neither",
        }
    }

    /// `base` with this variant's components switched off.
    pub fn apply(self, base: &PipelineConfig) -> PipelineConfig {
        let mut c = base.clone();
        if matches!(self, Variant::NoStructure | Variant::Neither) {
            c.weights.w_s = 0.0;
        }
        if matches!(self, Variant::NoFineToCoarse | Variant::Neither) {
            c.fine_to_coarse = false;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub rmse: f64,
    /// Coplanarity, plane-sample, and relation constraints summed over iterations.
    pub structural_constraints: usize,
    pub iterations: usize,
    pub config_hash: String,
    #[serde(skip)]
    pub poses: Vec<RigidTransform>,
}

/// Registers `frames` once per variant and scores each result.
pub fn run_ablations(
    frames: &[DepthFrame],
    config: &PipelineConfig,
    matches: Option<&MatchStore>,
    benchmark: &[GroundTruthCorrespondence],
) -> Result<Vec<AblationRow>, BenchError> {
    Variant::ALL
        .iter()
        .map(|&variant| {
            let cfg = variant.apply(config);
            let out = register(frames, &cfg, matches)?;
            let structural = out.iterations.iter().map(|i| i.coplanarity + i.plane_samples + i.relations).sum();
            Ok(AblationRow {
                variant,
                rmse: rmse(&out.trajectory.poses, benchmark)?,
                structural_constraints: structural,
                iterations: out.iterations.len(),
                config_hash: cfg.hash(),
                poses: out.trajectory.poses,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,rmse,structural_constraints,iterations,config_hash\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.variant.name(), r.rmse, r.structural_constraints, r.iterations, r.config_hash);
    }
    s
}

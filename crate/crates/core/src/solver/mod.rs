//! The optimization step: energy evaluation over poses and proxy planes, and
//! its minimization by sparse Levenberg-Marquardt.

use std::io::Write;

use nalgebra::{Matrix6, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Plane, RigidTransform};

mod linear;
mod terms;

pub use linear::CgReport;
pub use terms::{BlockLinearization, Origin, Param, PointPair, Problem, ProblemOptions};

use linear::{pcg, BlockSystem, Preconditioner};
use terms::PoseCache;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("{constraint} references proxy {id}, which does not exist")]
    DanglingProxy { id: usize, constraint: String },
    #[error("{constraint} references frame {frame}, which does not exist")]
    DanglingFrame { frame: usize, constraint: String },
    #[error("{constraint} references a feature or patch that does not exist")]
    MissingMeasurement { constraint: String },
    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("non-finite value in {constraint}")]
    NonFinite { constraint: String },
    #[error("invalid energy weights: {0}")]
    InvalidWeights(String),
}

/// Optimization unknowns. Pose 0 is the gauge and never changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    pub poses: Vec<RigidTransform>,
    pub proxy_planes: Vec<Plane>,
}

/// Term weights of the energy
/// `w_S (w_P E_P + w_H E_H + w_G E_G) + w_C E_C + w_L E_L + w_I E_I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyWeights {
    pub w_s: f64,
    pub w_p: f64,
    pub w_h: f64,
    pub w_g: f64,
    pub w_c: f64,
    pub w_l: f64,
    pub w_i: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        Self { w_s: 1.0, w_p: 1.0, w_h: 1.0, w_g: 0.5, w_c: 1.0, w_l: 2.0, w_i: 0.01 }
    }
}

impl EnergyWeights {
    pub fn validate(&self) -> Result<(), SolverError> {
        let all = [
            ("w_S", self.w_s),
            ("w_P", self.w_p),
            ("w_H", self.w_h),
            ("w_G", self.w_g),
            ("w_C", self.w_c),
            ("w_L", self.w_l),
            ("w_I", self.w_i),
        ];
        for (name, w) in all {
            if !(w.is_finite() && w >= 0.0) {
                return Err(SolverError::InvalidWeights(format!("{name} = {w} must be finite and nonnegative")));
            }
        }
        if self.w_i <= 0.0 {
            return Err(SolverError::InvalidWeights("w_I must be positive".into()));
        }
        Ok(())
    }

    /// Multiplier of a term's sum of squares in the total.
    pub fn factor(&self, class: TermClass) -> f64 {
        match class {
            TermClass::H => self.w_s * self.w_h,
            TermClass::G => self.w_s * self.w_g,
            TermClass::P => self.w_s * self.w_p,
            TermClass::C => self.w_c,
            TermClass::L => self.w_l,
            TermClass::I => self.w_i,
        }
    }
}

/// The energy terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TermClass {
    H,
    G,
    P,
    C,
    L,
    I,
}

impl TermClass {
    pub const ALL: [TermClass; 6] = [TermClass::H, TermClass::G, TermClass::P, TermClass::C, TermClass::L, TermClass::I];
}

/// Unweighted sums of squares per term, and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub e_h: f64,
    pub e_g: f64,
    pub e_p: f64,
    pub e_c: f64,
    pub e_l: f64,
    pub e_i: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn get(&self, class: TermClass) -> f64 {
        match class {
            TermClass::H => self.e_h,
            TermClass::G => self.e_g,
            TermClass::P => self.e_p,
            TermClass::C => self.e_c,
            TermClass::L => self.e_l,
            TermClass::I => self.e_i,
        }
    }

    fn slot(&mut self, class: TermClass) -> &mut f64 {
        match class {
            TermClass::H => &mut self.e_h,
            TermClass::G => &mut self.e_g,
            TermClass::P => &mut self.e_p,
            TermClass::C => &mut self.e_c,
            TermClass::L => &mut self.e_l,
            TermClass::I => &mut self.e_i,
        }
    }

    /// Recomputes `total` from the per-term values.
    pub fn weighted(mut self, w: &EnergyWeights) -> Self {
        self.total = TermClass::ALL.iter().map(|&c| w.factor(c) * self.get(c)).sum();
        self
    }
}

/// Evaluates every term of `problem` at `state`.
pub fn energy(problem: &Problem, state: &ParameterState, weights: &EnergyWeights) -> Result<EnergyBreakdown, SolverError> {
    problem.check_dimensions(state)?;
    let cache = PoseCache::new(&state.poses, false);
    let (lr, ln) = (problem.options.lambda_r, problem.options.lambda_n);
    // Per-term squared norms are summed sequentially so the result does not
    // depend on how the evaluation was split across threads.
    let squares: Vec<(TermClass, f64, bool)> = problem
        .terms
        .par_iter()
        .map(|(t, _)| {
            let l = t.linearize(state, &cache, lr, ln);
            let s = l.r.as_slice()[..l.rows].iter().map(|v| v * v).sum::<f64>();
            (t.class(), s, s.is_finite())
        })
        .collect();
    let mut e = EnergyBreakdown::default();
    for (k, (class, s, finite)) in squares.into_iter().enumerate() {
        if !finite {
            return Err(SolverError::NonFinite { constraint: problem.terms[k].1.to_string() });
        }
        *e.slot(class) += s;
    }
    Ok(e.weighted(weights))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub max_inner_iterations: usize,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    /// Stop once an accepted step lowers the energy by less than this fraction.
    pub min_relative_decrease: f64,
    pub cg_max_iterations: usize,
    pub cg_tolerance: f64,
    /// Pose-pose couplings within this many frames enter the preconditioner.
    pub preconditioner_band: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_inner_iterations: 10,
            initial_damping: 1e-4,
            damping_increase: 10.0,
            damping_decrease: 0.5,
            min_relative_decrease: 1e-6,
            cg_max_iterations: 400,
            cg_tolerance: 1e-8,
            preconditioner_band: 16,
        }
    }
}

/// One LM iteration, accepted or not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub energy: EnergyBreakdown,
    pub damping: f64,
    pub accepted: bool,
    pub cg_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ZeroEnergy,
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub initial: EnergyBreakdown,
    pub final_energy: EnergyBreakdown,
    pub iterations: usize,
    pub accepted: usize,
    pub damping: f64,
    pub stop: StopReason,
    pub log: Vec<LogRow>,
}

struct Layout {
    /// Column block of every pose, `None` when held fixed.
    pose: Vec<Option<usize>>,
    proxy_offset: usize,
    blocks: usize,
}

impl Layout {
    fn new(problem: &Problem) -> Self {
        let mut pose = Vec::with_capacity(problem.poses);
        let mut next = 0;
        for &f in &problem.fixed {
            pose.push(if f {
                None
            } else {
                next += 1;
                Some(next - 1)
            });
        }
        Self { pose, proxy_offset: next, blocks: next + problem.proxies }
    }

    fn column(&self, p: Param) -> Option<usize> {
        match p {
            Param::Pose(i) => self.pose[i],
            Param::Proxy(i) => Some(self.proxy_offset + i),
        }
    }
}

/// Builds `J^T J` and `-J^T r` of the weighted residuals at `state`.
fn assemble(
    problem: &Problem,
    layout: &Layout,
    state: &ParameterState,
    weights: &EnergyWeights,
) -> Result<BlockSystem, SolverError> {
    let cache = PoseCache::new(&state.poses, true);
    let (lr, ln) = (problem.options.lambda_r, problem.options.lambda_n);
    let mut sys = BlockSystem::new(layout.blocks);
    for (t, origin) in &problem.terms {
        let f = weights.factor(t.class());
        if f == 0.0 {
            continue;
        }
        let l = t.linearize(state, &cache, lr, ln);
        if !l.is_finite() {
            return Err(SolverError::NonFinite { constraint: origin.to_string() });
        }
        let rows = l.rows;
        let r = l.r.rows(0, rows);
        let cols = l.params.map(|p| p.and_then(|p| layout.column(p)));
        for ki in 0..2 {
            let Some(ci) = cols[ki] else { continue };
            let ji = l.jac[ki].rows(0, rows);
            sys.rhs[ci] -= f * (ji.transpose() * r);
            for kj in ki..2 {
                let Some(cj) = cols[kj] else { continue };
                let m: Matrix6<f64> = f * (ji.transpose() * l.jac[kj].rows(0, rows));
                if ki == kj {
                    sys.add(ci, ci, &m);
                } else if ci == cj {
                    sys.add(ci, ci, &(m + m.transpose()));
                } else {
                    sys.add(ci, cj, &m);
                }
            }
        }
    }
    Ok(sys)
}

fn apply_step(problem: &Problem, layout: &Layout, state: &ParameterState, step: &[Vector6<f64>]) -> ParameterState {
    let mut next = state.clone();
    for (i, pose) in next.poses.iter_mut().enumerate() {
        if let Some(c) = layout.pose[i] {
            let mut p = pose.to_params();
            for k in 0..6 {
                p[k] += step[c][k];
            }
            *pose = RigidTransform::from_params(&p);
        }
    }
    for (i, q) in next.proxy_planes.iter_mut().enumerate() {
        let d = &step[layout.proxy_offset + i];
        let n = q.normal + d.fixed_rows::<3>(0);
        let norm = n.norm();
        q.normal = if norm > 0.0 { n / norm } else { q.normal };
        q.point += d.fixed_rows::<3>(3);
    }
    debug_assert!(problem.poses == next.poses.len());
    next
}

/// Minimizes the energy of `problem` starting from `state` by Levenberg-Marquardt
/// with Marquardt diagonal scaling. Accepted steps never raise the energy.
pub fn solve(
    problem: &Problem,
    state: &ParameterState,
    weights: &EnergyWeights,
    options: &SolveOptions,
) -> Result<(ParameterState, SolveReport), SolverError> {
    weights.validate()?;
    problem.check_dimensions(state)?;
    let layout = Layout::new(problem);
    let mut current = state.clone();
    for q in &mut current.proxy_planes {
        q.normal = q.normal.normalize();
    }
    let initial = energy(problem, &current, weights)?;
    let mut e = initial;
    let mut lambda = options.initial_damping;
    let mut log = Vec::new();
    let mut accepted = 0;
    let mut iterations = 0;
    let mut stop = StopReason::MaxIterations;
    let mut sys: Option<BlockSystem> = None;

    if e.total == 0.0 {
        return Ok((
            current,
            SolveReport {
                initial,
                final_energy: e,
                iterations: 1,
                accepted: 0,
                damping: lambda,
                stop: StopReason::ZeroEnergy,
                log: vec![LogRow { iteration: 0, energy: e, damping: lambda, accepted: false, cg_iterations: 0 }],
            },
        ));
    }

    while iterations < options.max_inner_iterations {
        if sys.is_none() {
            sys = Some(assemble(problem, &layout, &current, weights)?);
        }
        let s = sys.as_ref().expect("assembled above");
        let damping: Vec<Vector6<f64>> = s.diag.iter().map(|d| d.diagonal().map(|v| lambda * v.max(1e-12))).collect();
        let pre = Preconditioner::new(s, &damping, layout.proxy_offset, options.preconditioner_band);
        let (step, cg) = pcg(s, &damping, &pre, options.cg_max_iterations, options.cg_tolerance);
        iterations += 1;
        if step.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(SolverError::NonFinite { constraint: "linear solve".into() });
        }
        let candidate = apply_step(problem, &layout, &current, &step);
        let ce = energy(problem, &candidate, weights)?;
        let ok = ce.total <= e.total;
        log.push(LogRow { iteration: iterations, energy: if ok { ce } else { e }, damping: lambda, accepted: ok, cg_iterations: cg.iterations });
        if ok {
            let decrease = (e.total - ce.total) / e.total;
            current = candidate;
            e = ce;
            accepted += 1;
            lambda *= options.damping_decrease;
            sys = None;
            if decrease < options.min_relative_decrease || e.total == 0.0 {
                stop = StopReason::Converged;
                break;
            }
        } else {
            lambda *= options.damping_increase;
        }
    }
    debug_assert!(e.total <= initial.total);
    Ok((current, SolveReport { initial, final_energy: e, iterations, accepted, damping: lambda, stop, log }))
}

/// Writes the LM log of one solve as CSV rows, prefixed by `outer` (the
/// pipeline iteration). Pass `header` for the first block of a file.
pub fn write_energy_log(out: &mut impl Write, outer: usize, report: &SolveReport, header: bool) -> std::io::Result<()> {
    if header {
        writeln!(out, "iteration,inner,E_H,E_G,E_P,E_C,E_L,E_I,total,lambda,accepted,cg_iterations")?;
    }
    for r in &report.log {
        let e = &r.energy;
        writeln!(
            out,
            "{outer},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{}",
            r.iteration, e.e_h, e.e_g, e.e_p, e.e_c, e.e_l, e.e_i, e.total, r.damping, r.accepted as u8, r.cg_iterations
        )?;
    }
    Ok(())
}

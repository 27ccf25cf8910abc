//! Residual blocks of the energy and their analytic Jacobians.
//!
//! Every block touches at most two parameter blocks. Pose parameters are
//! `[yaw, pitch, roll, tx, ty, tz]`; proxy parameters are `[normal, point]` with
//! the normal a free 3-vector.

use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};

use super::{ParameterState, SolverError, TermClass};
use crate::constraints::{ConstraintSet, CorrespondenceKind, RelationKind};
use crate::features::FrameFeatures;
use crate::geom::{wrap_angle, Plane, RigidTransform};

pub(crate) const MAX_ROWS: usize = 12;

pub(crate) type Residual = SVector<f64, MAX_ROWS>;
pub(crate) type Jacobian = SMatrix<f64, MAX_ROWS, 6>;

/// Which input constraint a residual block came from, for error reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Coplanarity(usize),
    PlaneSample(usize),
    Relation(usize),
    Correspondence(usize),
    PointMatch(usize),
    LocalAlignment { frame: usize, stride: usize },
    PoseInertia(usize),
    ProxyInertia(usize),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Coplanarity(i) => write!(f, "coplanarity constraint {i}"),
            Origin::PlaneSample(i) => write!(f, "plane sample {i}"),
            Origin::Relation(i) => write!(f, "relation constraint {i}"),
            Origin::Correspondence(i) => write!(f, "correspondence {i}"),
            Origin::PointMatch(i) => write!(f, "point match {i}"),
            Origin::LocalAlignment { frame, stride } => write!(f, "local alignment ({frame}, {})", frame + stride),
            Origin::PoseInertia(i) => write!(f, "inertia of pose {i}"),
            Origin::ProxyInertia(i) => write!(f, "inertia of proxy {i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Term {
    /// A parent proxy against a camera-space plane of `frame`; the sign flips
    /// the camera-space normal toward the proxy's.
    /// `sampled` marks plane samples (E_P) as opposed to hierarchy links (E_H).
    Coplanar { proxy: usize, frame: usize, plane: Plane, sign: f64, sampled: bool },
    Relation { kind: RelationKind, a: usize, b: usize, weight: f64 },
    PlaneMatch { fa: usize, xa: Vector3<f64>, ma: Vector3<f64>, fb: usize, xb: Vector3<f64> },
    EdgeMatch { fa: usize, xa: Vector3<f64>, da: Vector3<f64>, fb: usize, xb: Vector3<f64> },
    PointMatch { fa: usize, xa: Vector3<f64>, fb: usize, xb: Vector3<f64> },
    /// `inv(T[b]) * T[a]` against a reference relative transform.
    Local { a: usize, b: usize, rotation: Matrix3<f64>, translation: Vector3<f64> },
    PoseInertia { frame: usize, previous: [f64; 6] },
    ProxyInertia { proxy: usize, previous: [f64; 6] },
}

/// A parameter block a residual depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Pose(usize),
    Proxy(usize),
}

/// Residual and Jacobian of one block, before term weighting.
pub(crate) struct Linearized {
    pub rows: usize,
    pub r: Residual,
    pub params: [Option<Param>; 2],
    pub jac: [Jacobian; 2],
}

impl Linearized {
    fn new(rows: usize) -> Self {
        Self { rows, r: Residual::zeros(), params: [None, None], jac: [Jacobian::zeros(), Jacobian::zeros()] }
    }

    pub fn is_finite(&self) -> bool {
        self.r.iter().all(|v| v.is_finite()) && self.jac.iter().all(|j| j.iter().all(|v| v.is_finite()))
    }
}

/// Rotation matrices and their Euler derivatives for every pose of a state.
pub(crate) struct PoseCache {
    pub rotation: Vec<Matrix3<f64>>,
    pub derivative: Vec<[Matrix3<f64>; 3]>,
    pub translation: Vec<Vector3<f64>>,
}

impl PoseCache {
    pub fn new(poses: &[RigidTransform], derivatives: bool) -> Self {
        Self {
            rotation: poses.iter().map(|p| p.rotation_matrix()).collect(),
            derivative: if derivatives {
                poses.iter().map(|p| p.rotation.matrix_derivatives()).collect()
            } else {
                Vec::new()
            },
            translation: poses.iter().map(|p| p.translation).collect(),
        }
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

impl Term {
    pub fn class(&self) -> TermClass {
        match self {
            Term::Coplanar { sampled: false, .. } => TermClass::H,
            Term::Coplanar { sampled: true, .. } => TermClass::P,
            Term::Relation { .. } => TermClass::G,
            Term::PlaneMatch { .. } | Term::EdgeMatch { .. } | Term::PointMatch { .. } => TermClass::C,
            Term::Local { .. } => TermClass::L,
            Term::PoseInertia { .. } | Term::ProxyInertia { .. } => TermClass::I,
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            Term::Coplanar { .. } => 5,
            Term::Relation { kind: RelationKind::Orthogonal, .. } => 1,
            Term::Relation { .. } => 3,
            Term::PlaneMatch { .. } => 1,
            Term::EdgeMatch { .. } | Term::PointMatch { .. } => 3,
            Term::Local { .. } => 12,
            Term::PoseInertia { .. } | Term::ProxyInertia { .. } => 6,
        }
    }

    /// Evaluates the residual, and the Jacobian when `cache` holds derivatives.
    pub fn linearize(&self, state: &ParameterState, cache: &PoseCache, lambda_r: f64, lambda_n: f64) -> Linearized {
        let with_jac = !cache.derivative.is_empty();
        let mut out = Linearized::new(self.rows());
        match *self {
            Term::Coplanar { proxy, frame, ref plane, sign, .. } => {
                let q = &state.proxy_planes[proxy];
                let (nq, pq) = (q.normal, q.point);
                let r = &cache.rotation[frame];
                let nc = sign * (r * plane.normal);
                let pc = r * plane.point + cache.translation[frame];
                let sl = lambda_n.sqrt();
                let cross = sl * nq.cross(&nc);
                out.r[0] = (pc - pq).dot(&nq);
                out.r[1] = (pq - pc).dot(&nc);
                out.r.fixed_rows_mut::<3>(2).copy_from(&cross);
                out.params = [Some(Param::Proxy(proxy)), Some(Param::Pose(frame))];
                if with_jac {
                    let jq = &mut out.jac[0];
                    jq.fixed_view_mut::<1, 3>(0, 0).copy_from(&(pc - pq).transpose());
                    jq.fixed_view_mut::<1, 3>(0, 3).copy_from(&(-nq).transpose());
                    jq.fixed_view_mut::<1, 3>(1, 3).copy_from(&nc.transpose());
                    jq.fixed_view_mut::<3, 3>(2, 0).copy_from(&(-sl * skew(&nc)));
                    let jp = &mut out.jac[1];
                    for (k, dr) in cache.derivative[frame].iter().enumerate() {
                        let dp = dr * plane.point;
                        let dn = sign * (dr * plane.normal);
                        jp[(0, k)] = nq.dot(&dp);
                        jp[(1, k)] = -dp.dot(&nc) + (pq - pc).dot(&dn);
                        jp.fixed_view_mut::<3, 1>(2, k).copy_from(&(sl * nq.cross(&dn)));
                    }
                    jp.fixed_view_mut::<1, 3>(0, 3).copy_from(&nq.transpose());
                    jp.fixed_view_mut::<1, 3>(1, 3).copy_from(&(-nc).transpose());
                }
            }
            Term::Relation { kind, a, b, weight } => {
                let sw = weight.sqrt();
                let (na, nb) = (state.proxy_planes[a].normal, state.proxy_planes[b].normal);
                out.params = [Some(Param::Proxy(a)), Some(Param::Proxy(b))];
                match kind {
                    RelationKind::Parallel | RelationKind::Antiparallel => {
                        let s = if kind == RelationKind::Parallel { -1.0 } else { 1.0 };
                        out.r.fixed_rows_mut::<3>(0).copy_from(&(sw * (na + s * nb)));
                        if with_jac {
                            out.jac[0].fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * sw));
                            out.jac[1].fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * (s * sw)));
                        }
                    }
                    RelationKind::Orthogonal => {
                        out.r[0] = sw * na.dot(&nb);
                        if with_jac {
                            out.jac[0].fixed_view_mut::<1, 3>(0, 0).copy_from(&(sw * nb).transpose());
                            out.jac[1].fixed_view_mut::<1, 3>(0, 0).copy_from(&(sw * na).transpose());
                        }
                    }
                }
            }
            Term::PlaneMatch { fa, xa, ma, fb, xb } => {
                let (ra, rb) = (&cache.rotation[fa], &cache.rotation[fb]);
                let pa = ra * xa + cache.translation[fa];
                let na = ra * ma;
                let delta = rb * xb + cache.translation[fb] - pa;
                out.r[0] = delta.dot(&na);
                out.params = [Some(Param::Pose(fa)), Some(Param::Pose(fb))];
                if with_jac {
                    for k in 0..3 {
                        let (da, db) = (&cache.derivative[fa][k], &cache.derivative[fb][k]);
                        out.jac[0][(0, k)] = -(da * xa).dot(&na) + delta.dot(&(da * ma));
                        out.jac[1][(0, k)] = na.dot(&(db * xb));
                    }
                    out.jac[0].fixed_view_mut::<1, 3>(0, 3).copy_from(&(-na).transpose());
                    out.jac[1].fixed_view_mut::<1, 3>(0, 3).copy_from(&na.transpose());
                }
            }
            Term::EdgeMatch { fa, xa, da: ea, fb, xb } => {
                let (ra, rb) = (&cache.rotation[fa], &cache.rotation[fb]);
                let pa = ra * xa + cache.translation[fa];
                let da = ra * ea;
                let delta = rb * xb + cache.translation[fb] - pa;
                out.r.fixed_rows_mut::<3>(0).copy_from(&delta.cross(&da));
                out.params = [Some(Param::Pose(fa)), Some(Param::Pose(fb))];
                if with_jac {
                    for k in 0..3 {
                        let (dra, drb) = (&cache.derivative[fa][k], &cache.derivative[fb][k]);
                        let ja = (-(dra * xa)).cross(&da) + delta.cross(&(dra * ea));
                        out.jac[0].fixed_view_mut::<3, 1>(0, k).copy_from(&ja);
                        out.jac[1].fixed_view_mut::<3, 1>(0, k).copy_from(&(drb * xb).cross(&da));
                    }
                    out.jac[0].fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&da));
                    out.jac[1].fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&da)));
                }
            }
            Term::PointMatch { fa, xa, fb, xb } => {
                let pa = cache.rotation[fa] * xa + cache.translation[fa];
                let pb = cache.rotation[fb] * xb + cache.translation[fb];
                out.r.fixed_rows_mut::<3>(0).copy_from(&(pb - pa));
                out.params = [Some(Param::Pose(fa)), Some(Param::Pose(fb))];
                if with_jac {
                    for k in 0..3 {
                        out.jac[0].fixed_view_mut::<3, 1>(0, k).copy_from(&(-(cache.derivative[fa][k] * xa)));
                        out.jac[1].fixed_view_mut::<3, 1>(0, k).copy_from(&(cache.derivative[fb][k] * xb));
                    }
                    out.jac[0].fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
                    out.jac[1].fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
                }
            }
            Term::Local { a, b, ref rotation, ref translation } => {
                let (ra, rb) = (&cache.rotation[a], &cache.rotation[b]);
                let rbt = rb.transpose();
                let dt = cache.translation[a] - cache.translation[b];
                let sl = lambda_r.sqrt();
                out.r.fixed_rows_mut::<3>(0).copy_from(&(rbt * dt - translation));
                let dr = (rbt * ra - rotation) * sl;
                out.r.fixed_rows_mut::<9>(3).copy_from_slice(dr.as_slice());
                out.params = [Some(Param::Pose(a)), Some(Param::Pose(b))];
                if with_jac {
                    for k in 0..3 {
                        let (dra, drb) = (&cache.derivative[a][k], &cache.derivative[b][k]);
                        let ja = rbt * dra * sl;
                        out.jac[0].fixed_view_mut::<9, 1>(3, k).copy_from_slice(ja.as_slice());
                        let drbt = drb.transpose();
                        out.jac[1].fixed_view_mut::<3, 1>(0, k).copy_from(&(drbt * dt));
                        let jb = drbt * ra * sl;
                        out.jac[1].fixed_view_mut::<9, 1>(3, k).copy_from_slice(jb.as_slice());
                    }
                    out.jac[0].fixed_view_mut::<3, 3>(0, 3).copy_from(&rbt);
                    out.jac[1].fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rbt));
                }
            }
            Term::PoseInertia { frame, ref previous } => {
                let p = state.poses[frame].to_params();
                for i in 0..6 {
                    let d = p[i] - previous[i];
                    out.r[i] = if i < 3 { wrap_angle(d) } else { d };
                }
                out.params = [Some(Param::Pose(frame)), None];
                if with_jac {
                    out.jac[0].fixed_view_mut::<6, 6>(0, 0).fill_with_identity();
                }
            }
            Term::ProxyInertia { proxy, ref previous } => {
                let q = &state.proxy_planes[proxy];
                for i in 0..3 {
                    out.r[i] = q.normal[i] - previous[i];
                    out.r[i + 3] = q.point[i] - previous[i + 3];
                }
                out.params = [Some(Param::Proxy(proxy)), None];
                if with_jac {
                    out.jac[0].fixed_view_mut::<6, 6>(0, 0).fill_with_identity();
                }
            }
        }
        out
    }
}

/// Tunables of the residual definitions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProblemOptions {
    pub lambda_r: f64,
    pub lambda_n: f64,
    /// Local-alignment strides are `2^k` for `k <= k_max`.
    pub k_max: u32,
}

impl Default for ProblemOptions {
    fn default() -> Self {
        Self { lambda_r: crate::geom::DEFAULT_LAMBDA_R, lambda_n: crate::geom::DEFAULT_LAMBDA_N, k_max: 4 }
    }
}

/// A fixed set of residual blocks over a state of known dimensions.
#[derive(Debug, Clone)]
pub struct Problem {
    pub(crate) terms: Vec<(Term, Origin)>,
    pub(crate) poses: usize,
    pub(crate) proxies: usize,
    pub(crate) fixed: Vec<bool>,
    pub options: ProblemOptions,
}

/// Pairwise point matches in camera coordinates of their frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPair {
    pub frame_a: usize,
    pub xyz_a: Vector3<f64>,
    pub frame_b: usize,
    pub xyz_b: Vector3<f64>,
}

impl Problem {
    /// An empty problem over `poses` poses and `proxies` proxies with pose 0 fixed.
    pub fn new(poses: usize, proxies: usize, options: ProblemOptions) -> Self {
        let mut fixed = vec![false; poses];
        if let Some(f) = fixed.first_mut() {
            *f = true;
        }
        Self { terms: Vec::new(), poses, proxies, fixed, options }
    }

    /// Holds the given poses constant in addition to the existing ones.
    pub fn fix_poses(&mut self, poses: impl IntoIterator<Item = usize>) {
        for p in poses {
            self.fixed[p] = true;
        }
    }

    pub fn is_fixed(&self, pose: usize) -> bool {
        self.fixed[pose]
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    /// Number of residual rows of one class.
    pub fn row_count(&self, class: TermClass) -> usize {
        self.terms.iter().filter(|(t, _)| t.class() == class).map(|(t, _)| t.rows()).sum()
    }

    fn check_proxy(&self, id: usize, origin: Origin) -> Result<(), SolverError> {
        if id >= self.proxies {
            return Err(SolverError::DanglingProxy { id, constraint: origin.to_string() });
        }
        Ok(())
    }

    fn check_pose(&self, frame: usize, origin: Origin) -> Result<(), SolverError> {
        if frame >= self.poses {
            return Err(SolverError::DanglingFrame { frame, constraint: origin.to_string() });
        }
        Ok(())
    }

    /// Adds the structural terms (hierarchy, relations, plane samples) and the
    /// feature correspondences of one detected constraint set.
    pub fn add_constraints(&mut self, frames: &[FrameFeatures], set: &ConstraintSet) -> Result<(), SolverError> {
        for (i, c) in set.coplanarity.iter().enumerate() {
            let origin = Origin::Coplanarity(i);
            self.check_proxy(c.parent.0 as usize, origin)?;
            let frame = c.child.frame as usize;
            self.check_pose(frame, origin)?;
            let patch = frames
                .get(frame)
                .and_then(|f| f.patches.get(c.child.patch as usize))
                .ok_or_else(|| SolverError::MissingMeasurement { constraint: origin.to_string() })?;
            self.terms.push((
                Term::Coplanar {
                    proxy: c.parent.0 as usize,
                    frame,
                    plane: patch.plane,
                    sign: if c.flip { -1.0 } else { 1.0 },
                    sampled: false,
                },
                origin,
            ));
        }
        for (i, r) in set.relations.iter().enumerate() {
            let origin = Origin::Relation(i);
            self.check_proxy(r.a.0 as usize, origin)?;
            self.check_proxy(r.b.0 as usize, origin)?;
            self.terms
                .push((Term::Relation { kind: r.kind, a: r.a.0 as usize, b: r.b.0 as usize, weight: r.weight }, origin));
        }
        for (i, s) in set.plane_samples.iter().enumerate() {
            let origin = Origin::PlaneSample(i);
            self.check_proxy(s.proxy.0 as usize, origin)?;
            let frame = s.feature.frame as usize;
            self.check_pose(frame, origin)?;
            let f = frames
                .get(frame)
                .and_then(|f| f.features.get(s.feature.index as usize))
                .ok_or_else(|| SolverError::MissingMeasurement { constraint: origin.to_string() })?;
            self.terms.push((
                Term::Coplanar {
                    proxy: s.proxy.0 as usize,
                    frame,
                    plane: Plane { normal: f.direction, point: f.position },
                    sign: if s.flip { -1.0 } else { 1.0 },
                    sampled: true,
                },
                origin,
            ));
        }
        for (i, c) in set.correspondences.iter().enumerate() {
            let origin = Origin::Correspondence(i);
            let feature = |id: crate::constraints::FeatureId| {
                frames
                    .get(id.frame as usize)
                    .and_then(|f| f.features.get(id.index as usize))
                    .ok_or_else(|| SolverError::MissingMeasurement { constraint: origin.to_string() })
            };
            let (a, b) = (feature(c.a)?, feature(c.b)?);
            let (fa, fb) = (c.a.frame as usize, c.b.frame as usize);
            self.check_pose(fa, origin)?;
            self.check_pose(fb, origin)?;
            let term = match c.kind {
                CorrespondenceKind::Plane => {
                    Term::PlaneMatch { fa, xa: a.position, ma: a.direction, fb, xb: b.position }
                }
                CorrespondenceKind::Edge => Term::EdgeMatch { fa, xa: a.position, da: a.direction, fb, xb: b.position },
            };
            self.terms.push((term, origin));
        }
        Ok(())
    }

    /// Adds point-to-point residuals, counted in the correspondence term.
    pub fn add_point_pairs(&mut self, pairs: &[PointPair]) -> Result<(), SolverError> {
        for (i, p) in pairs.iter().enumerate() {
            let origin = Origin::PointMatch(i);
            self.check_pose(p.frame_a, origin)?;
            self.check_pose(p.frame_b, origin)?;
            self.terms
                .push((Term::PointMatch { fa: p.frame_a, xa: p.xyz_a, fb: p.frame_b, xb: p.xyz_b }, origin));
        }
        Ok(())
    }

    /// Adds local-alignment residuals against the relative transforms of
    /// `reference`, for strides `2^k`, `k <= k_max`.
    pub fn add_local_alignment(&mut self, reference: &[RigidTransform]) -> Result<(), SolverError> {
        if reference.len() != self.poses {
            return Err(SolverError::DimensionMismatch {
                what: "reference trajectory",
                expected: self.poses,
                found: reference.len(),
            });
        }
        let n = self.poses;
        for j in 0..n {
            for k in 0..=self.options.k_max {
                let s = 1usize << k;
                if j + s > n.saturating_sub(1) {
                    break;
                }
                // Same arithmetic as the residual, so the reference itself scores zero.
                let rbt = reference[j + s].rotation_matrix().transpose();
                let rotation = rbt * reference[j].rotation_matrix();
                let translation = rbt * (reference[j].translation - reference[j + s].translation);
                self.terms.push((
                    Term::Local { a: j, b: j + s, rotation, translation },
                    Origin::LocalAlignment { frame: j, stride: s },
                ));
            }
        }
        Ok(())
    }

    /// Adds inertia residuals pulling every pose and proxy toward `previous`.
    pub fn add_inertia(&mut self, previous: &ParameterState) -> Result<(), SolverError> {
        self.check_dimensions(previous)?;
        for (i, p) in previous.poses.iter().enumerate() {
            self.terms.push((Term::PoseInertia { frame: i, previous: p.to_params() }, Origin::PoseInertia(i)));
        }
        for (i, q) in previous.proxy_planes.iter().enumerate() {
            let previous = [q.normal.x, q.normal.y, q.normal.z, q.point.x, q.point.y, q.point.z];
            self.terms.push((Term::ProxyInertia { proxy: i, previous }, Origin::ProxyInertia(i)));
        }
        Ok(())
    }

    pub fn check_dimensions(&self, state: &ParameterState) -> Result<(), SolverError> {
        if state.poses.len() != self.poses {
            return Err(SolverError::DimensionMismatch { what: "poses", expected: self.poses, found: state.poses.len() });
        }
        if state.proxy_planes.len() != self.proxies {
            return Err(SolverError::DimensionMismatch {
                what: "proxies",
                expected: self.proxies,
                found: state.proxy_planes.len(),
            });
        }
        Ok(())
    }

    /// The full problem of one iteration: detected constraints, local alignment
    /// against `reference`, and inertia toward `previous`.
    pub fn build(
        frames: &[FrameFeatures],
        set: &ConstraintSet,
        reference: &[RigidTransform],
        previous: &ParameterState,
        options: ProblemOptions,
    ) -> Result<Self, SolverError> {
        let mut p = Self::new(previous.poses.len(), previous.proxy_planes.len(), options);
        p.add_constraints(frames, set)?;
        p.add_local_alignment(reference)?;
        p.add_inertia(previous)?;
        Ok(p)
    }

    /// Unweighted residuals of one class, in term order.
    pub fn residuals(&self, state: &ParameterState, class: TermClass) -> Result<Vec<f64>, SolverError> {
        self.check_dimensions(state)?;
        let cache = PoseCache::new(&state.poses, false);
        let mut out = Vec::new();
        for (t, _) in self.terms.iter().filter(|(t, _)| t.class() == class) {
            let l = t.linearize(state, &cache, self.options.lambda_r, self.options.lambda_n);
            out.extend_from_slice(&l.r.as_slice()[..l.rows]);
        }
        Ok(out)
    }
}

/// Unweighted residual of one block with its Jacobians, 6 columns per
/// parameter block in `[yaw, pitch, roll, tx, ty, tz]` or `[normal, point]` order.
#[derive(Debug, Clone)]
pub struct BlockLinearization {
    pub origin: Origin,
    pub class: TermClass,
    pub residual: DVector<f64>,
    pub jacobians: Vec<(Param, DMatrix<f64>)>,
}

impl Problem {
    /// Residuals and analytic Jacobians of every block, in term order.
    pub fn linearize_blocks(&self, state: &ParameterState) -> Result<Vec<BlockLinearization>, SolverError> {
        self.check_dimensions(state)?;
        let cache = PoseCache::new(&state.poses, true);
        Ok(self
            .terms
            .iter()
            .map(|(t, origin)| {
                let l = t.linearize(state, &cache, self.options.lambda_r, self.options.lambda_n);
                let jacobians = l
                    .params
                    .iter()
                    .zip(&l.jac)
                    .filter_map(|(p, j)| p.map(|p| (p, DMatrix::from_fn(l.rows, 6, |r, c| j[(r, c)]))))
                    .collect();
                BlockLinearization {
                    origin: *origin,
                    class: t.class(),
                    residual: DVector::from_column_slice(&l.r.as_slice()[..l.rows]),
                    jacobians,
                }
            })
            .collect())
    }
}

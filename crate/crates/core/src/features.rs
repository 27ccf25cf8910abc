//! Per-frame measurement primitives: planar patches (which double as leaf
//! proxies), planar and edge features, and keypoints for pairwise alignment.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{angle_between, Plane, PlaneMoments};
use crate::ingest::{point_grid, DepthFrame, PointGrid};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("frame {frame}: keypoints unavailable (no gray channel and no precomputed matches)")]
    KeypointsUnavailable { frame: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad feature cache: {reason}")]
    Cache { path: PathBuf, reason: String },
}

/// Thresholds of patch segmentation and feature extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    pub cell_size: usize,
    pub patch_max_angle_deg: f64,
    pub patch_max_rms: f64,
    pub min_patch_pixels: usize,
    pub planar_stride: usize,
    pub contour_jump: f64,
    pub crease_angle_deg: f64,
    pub max_features: usize,
    pub min_spacing_px: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            cell_size: 8,
            patch_max_angle_deg: 15.0,
            patch_max_rms: 0.02,
            min_patch_pixels: 500,
            planar_stride: 10,
            contour_jump: 0.1,
            crease_angle_deg: 30.0,
            max_features: 1000,
            min_spacing_px: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Planar,
    CreaseEdge,
    ContourEdge,
}

impl FeatureKind {
    pub fn is_edge(self) -> bool {
        !matches!(self, FeatureKind::Planar)
    }

    fn code(self) -> u8 {
        match self {
            FeatureKind::Planar => 0,
            FeatureKind::CreaseEdge => 1,
            FeatureKind::ContourEdge => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(FeatureKind::Planar),
            1 => Some(FeatureKind::CreaseEdge),
            2 => Some(FeatureKind::ContourEdge),
            _ => None,
        }
    }
}

/// A typed 3D measurement in camera space. `direction` is the surface normal for
/// planar features and the line direction for edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feature {
    pub kind: FeatureKind,
    pub position: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub frame: usize,
    pub pixel: (f32, f32),
    /// Index of the source patch within the frame, for planar features.
    pub patch: Option<u32>,
}

/// A planar region of one frame, in camera space.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarPatch {
    pub plane: Plane,
    pub inlier_count: usize,
    pub frame: usize,
    pub moments: PlaneMoments,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub position: Vector3<f64>,
    pub pixel: (f64, f64),
    pub descriptor: Vec<f32>,
}

pub const DESCRIPTOR_LEN: usize = 64;

/// Everything extracted from one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub frame: usize,
    pub patches: Vec<PlanarPatch>,
    pub features: Vec<Feature>,
    pub keypoints: Vec<Keypoint>,
}

/// Patches plus the per-pixel patch label map.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub patches: Vec<PlanarPatch>,
    pub labels: Vec<Option<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct MergeCandidate {
    mse: f64,
    a: usize,
    b: usize,
    version_a: u32,
    version_b: u32,
}

impl Eq for MergeCandidate {}

impl Ord for MergeCandidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on mse, ties broken by the lower index pair.
        other
            .mse
            .total_cmp(&self.mse)
            .then_with(|| (other.a, other.b).cmp(&(self.a, self.b)))
    }
}

impl PartialOrd for MergeCandidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct CellCluster {
    moments: PlaneMoments,
    normal: Vector3<f64>,
    cells: Vec<usize>,
    neighbours: BTreeSet<usize>,
    version: u32,
    alive: bool,
}

fn toward_camera(plane: Plane) -> Plane {
    if plane.normal.dot(&plane.point) > 0.0 {
        plane.flipped()
    } else {
        plane
    }
}

/// Refits a merged patch without the pixels that straddle a crease: points
/// farther than a few residual deviations from the current fit are dropped.
fn trimmed_fit(pixels: &[(usize, Vector3<f64>)]) -> PlaneMoments {
    const ROUNDS: usize = 3;
    const KEEP_SIGMAS: f64 = 2.5;
    let mut keep: Vec<&(usize, Vector3<f64>)> = pixels.iter().collect();
    for _ in 0..ROUNDS {
        let (plane, mse) = PlaneMoments::from_points(keep.iter().map(|(_, p)| p)).fit();
        let limit = KEEP_SIGMAS * mse.sqrt();
        let next: Vec<_> = keep.iter().copied().filter(|(_, p)| plane.signed_distance(p).abs() <= limit).collect();
        if next.len() < 3 || next.len() == keep.len() {
            break;
        }
        keep = next;
    }
    PlaneMoments::from_points(keep.iter().map(|(_, p)| p))
}

/// Bottom-up plane segmentation: plane fits on square cells, then greedy merging
/// of adjacent clusters in order of merged fit error.
pub fn segment_planes(frame: &DepthFrame, grid: &PointGrid, params: &FeatureParams) -> Segmentation {
    let (w, h) = (frame.width(), frame.height());
    let cs = params.cell_size.max(1);
    let (cw, ch) = (w.div_ceil(cs), h.div_ceil(cs));
    let max_angle = params.patch_max_angle_deg.to_radians();
    let max_mse = params.patch_max_rms * params.patch_max_rms;

    let mut cluster_of_cell = vec![usize::MAX; cw * ch];
    let mut clusters: Vec<CellCluster> = Vec::new();
    for cy in 0..ch {
        for cx in 0..cw {
            let pts: Vec<Vector3<f64>> = (cy * cs..((cy + 1) * cs).min(h))
                .flat_map(|v| (cx * cs..((cx + 1) * cs).min(w)).map(move |u| (u, v)))
                .filter_map(|(u, v)| grid.point(u, v))
                .collect();
            if pts.len() * 2 < cs * cs || pts.len() < 3 {
                continue;
            }
            let moments = PlaneMoments::from_points(&pts);
            let (plane, mse) = moments.fit();
            if mse >= max_mse {
                continue;
            }
            cluster_of_cell[cy * cw + cx] = clusters.len();
            clusters.push(CellCluster {
                moments,
                normal: toward_camera(plane).normal,
                cells: vec![cy * cw + cx],
                neighbours: BTreeSet::new(),
                version: 0,
                alive: true,
            });
        }
    }
    for cy in 0..ch {
        for cx in 0..cw {
            let a = cluster_of_cell[cy * cw + cx];
            if a == usize::MAX {
                continue;
            }
            for (nx, ny) in [(cx + 1, cy), (cx, cy + 1)] {
                if nx < cw && ny < ch {
                    let b = cluster_of_cell[ny * cw + nx];
                    if b != usize::MAX {
                        clusters[a].neighbours.insert(b);
                        clusters[b].neighbours.insert(a);
                    }
                }
            }
        }
    }

    let candidate = |clusters: &[CellCluster], a: usize, b: usize| -> Option<MergeCandidate> {
        let (ca, cb) = (&clusters[a], &clusters[b]);
        if angle_between(&ca.normal, &cb.normal) >= max_angle {
            return None;
        }
        let (_, mse) = ca.moments.merged(&cb.moments).fit();
        (mse < max_mse).then_some(MergeCandidate {
            mse,
            a: a.min(b),
            b: a.max(b),
            version_a: clusters[a.min(b)].version,
            version_b: clusters[a.max(b)].version,
        })
    };

    let mut heap = BinaryHeap::new();
    for a in 0..clusters.len() {
        for &b in clusters[a].neighbours.range(a + 1..) {
            if let Some(c) = candidate(&clusters, a, b) {
                heap.push(c);
            }
        }
    }
    while let Some(c) = heap.pop() {
        let (a, b) = (c.a, c.b);
        if !clusters[a].alive
            || !clusters[b].alive
            || clusters[a].version != c.version_a
            || clusters[b].version != c.version_b
        {
            continue;
        }
        let absorbed = std::mem::replace(
            &mut clusters[b],
            CellCluster {
                moments: PlaneMoments::empty(),
                normal: Vector3::zeros(),
                cells: Vec::new(),
                neighbours: BTreeSet::new(),
                version: 0,
                alive: false,
            },
        );
        for &nb in &absorbed.neighbours {
            if nb != a {
                clusters[nb].neighbours.remove(&b);
                clusters[nb].neighbours.insert(a);
            }
        }
        let target = &mut clusters[a];
        target.moments = target.moments.merged(&absorbed.moments);
        target.normal = toward_camera(target.moments.fit().0).normal;
        target.cells.extend(absorbed.cells);
        target.neighbours.extend(absorbed.neighbours);
        target.neighbours.remove(&a);
        target.neighbours.remove(&b);
        target.version += 1;
        let nbs: Vec<usize> = clusters[a].neighbours.iter().copied().collect();
        for nb in nbs {
            if let Some(c) = candidate(&clusters, a, nb) {
                heap.push(c);
            }
        }
    }

    let mut kept: Vec<&CellCluster> = clusters
        .iter()
        .filter(|c| c.alive && c.moments.count as usize >= params.min_patch_pixels)
        .collect();
    kept.sort_by_key(|c| c.cells.iter().min().copied());
    let mut labels = vec![None; w * h];
    let mut patches = Vec::with_capacity(kept.len());
    for c in kept {
        let pixels: Vec<(usize, Vector3<f64>)> = c
            .cells
            .iter()
            .flat_map(|&cell| {
                let (cx, cy) = (cell % cw, cell / cw);
                (cy * cs..((cy + 1) * cs).min(h)).flat_map(move |v| (cx * cs..((cx + 1) * cs).min(w)).map(move |u| (u, v)))
            })
            .filter_map(|(u, v)| grid.point(u, v).map(|p| (v * w + u, p)))
            .collect();
        let moments = trimmed_fit(&pixels);
        if (moments.count as usize) < params.min_patch_pixels {
            continue;
        }
        let plane = toward_camera(moments.fit().0);
        let pi = patches.len() as u32;
        for (i, p) in &pixels {
            if plane.signed_distance(p).abs() < params.patch_max_rms {
                labels[*i] = Some(pi);
            }
        }
        patches.push(PlanarPatch {
            plane,
            inlier_count: moments.count as usize,
            frame: frame.index,
            moments,
        });
    }
    Segmentation { patches, labels }
}

/// Planar patches of one frame.
pub fn extract_planar_patches(frame: &DepthFrame, params: &FeatureParams) -> Vec<PlanarPatch> {
    segment_planes(frame, &point_grid(frame), params).patches
}

/// Greedy farthest-point selection in image space. Starts from the first
/// candidate and stops at `max` picks or once no candidate is at least
/// `min_spacing` away from every pick.
pub fn farthest_point_subsample(pixels: &[(f64, f64)], max: usize, min_spacing: f64) -> Vec<usize> {
    if pixels.is_empty() || max == 0 {
        return Vec::new();
    }
    let mut dist = vec![f64::INFINITY; pixels.len()];
    let mut picked = Vec::new();
    let mut next = 0;
    let min_sq = min_spacing * min_spacing;
    loop {
        picked.push(next);
        let (pu, pv) = pixels[next];
        for (d, &(u, v)) in dist.iter_mut().zip(pixels) {
            *d = d.min((u - pu).powi(2) + (v - pv).powi(2));
        }
        if picked.len() == max {
            break;
        }
        let (best, &bd) = dist
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty");
        if bd < min_sq {
            break;
        }
        next = best;
    }
    picked.sort_unstable();
    picked
}

/// Principal direction of a point set when it is clearly elongated.
fn line_direction(points: &[Vector3<f64>]) -> Option<Vector3<f64>> {
    if points.len() < 4 {
        return None;
    }
    let m = PlaneMoments::from_points(points);
    let eig = ((m.scatter + m.scatter.transpose()) * 0.5).symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l0, l1) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l0 > 0.0) || l1 > 0.25 * l0 {
        return None;
    }
    let mut d = eig.eigenvectors.column(order[0]).into_owned();
    // Canonical sign so identical inputs always give identical output.
    let big = d.iamax();
    if d[big] < 0.0 {
        d = -d;
    }
    Some(d.normalize())
}

const CREASE_OFFSET: usize = 3;
const CREASE_SMOOTH: usize = 2;
const EDGE_DIRECTION_RADIUS: usize = 3;

/// Pixels at the near side of a depth discontinuity.
fn contour_mask(frame: &DepthFrame, jump: f64) -> Vec<bool> {
    let (w, h) = (frame.width(), frame.height());
    let mut mask = vec![false; w * h];
    for v in 0..h {
        for u in 0..w {
            let Some(za) = frame.depth_at(u, v) else { continue };
            for (nu, nv) in [(u + 1, v), (u, v + 1)] {
                if nu >= w || nv >= h {
                    continue;
                }
                if let Some(zb) = frame.depth_at(nu, nv) {
                    if (za - zb).abs() > jump {
                        if za < zb {
                            mask[v * w + u] = true;
                        } else {
                            mask[nv * w + nu] = true;
                        }
                    }
                }
            }
        }
    }
    mask
}

/// The two planes on either side of a crease candidate, as (normal, point).
type CreaseSides = [(Vector3<f64>, Vector3<f64>); 2];

#[derive(Debug, Clone, Copy)]
struct CreaseStrength {
    angle: f64,
    horizontal: bool,
    sides: Option<CreaseSides>,
}

/// Crease strength per pixel: the larger of the horizontal and vertical normal
/// angles across a fixed pixel offset, with the axis that produced it.
fn crease_strength(grid: &PointGrid, contour: &[bool]) -> Vec<CreaseStrength> {
    let (w, h) = (grid.width, grid.height);
    let r = CREASE_OFFSET;
    let mut out = vec![CreaseStrength { angle: 0.0, horizontal: false, sides: None }; w * h];
    let clean = |u0: usize, v0: usize, horizontal: bool| -> bool {
        (0..=2 * r).all(|o| {
            let (u, v) = if horizontal { (u0 + o, v0) } else { (u0, v0 + o) };
            grid.point(u, v).is_some() && !contour[v * w + u]
        })
    };
    // Normals averaged along the candidate edge line, to keep sensor noise
    // from reading as a crease.
    let mean_normal = |u0: usize, v0: usize, horizontal: bool| -> Option<Vector3<f64>> {
        let mut sum = Vector3::zeros();
        let mut count = 0;
        for o in -(CREASE_SMOOTH as isize)..=CREASE_SMOOTH as isize {
            let (u, v) = if horizontal { (u0 as isize + o, v0 as isize) } else { (u0 as isize, v0 as isize + o) };
            if u < 0 || v < 0 || u >= w as isize || v >= h as isize {
                continue;
            }
            if let Some(n) = grid.normal(u as usize, v as usize) {
                sum += n;
                count += 1;
            }
        }
        (count > CREASE_SMOOTH && sum.norm() > 1e-12).then(|| sum.normalize())
    };
    for v in 0..h {
        for u in 0..w {
            if grid.normal(u, v).is_none() || contour[v * w + u] {
                continue;
            }
            let side = |x: usize, y: usize, n: Vector3<f64>| (n, grid.point(x, y).expect("checked by clean"));
            let mut best = CreaseStrength { angle: 0.0, horizontal: false, sides: None };
            if u >= r && u + r < w && clean(u - r, v, true) {
                if let (Some(a), Some(b)) = (mean_normal(u - r, v, false), mean_normal(u + r, v, false)) {
                    best = CreaseStrength {
                        angle: angle_between(&a, &b),
                        horizontal: true,
                        sides: Some([side(u - r, v, a), side(u + r, v, b)]),
                    };
                }
            }
            if v >= r && v + r < h && clean(u, v - r, false) {
                if let (Some(a), Some(b)) = (mean_normal(u, v - r, true), mean_normal(u, v + r, true)) {
                    let angle = angle_between(&a, &b);
                    if angle > best.angle {
                        best = CreaseStrength { angle, horizontal: false, sides: Some([side(u, v - r, a), side(u, v + r, b)]) };
                    }
                }
            }
            out[v * w + u] = best;
        }
    }
    out
}

/// Projects `p` onto the intersection line of the two side planes. Returns the
/// line point and direction, or `None` when the planes are near parallel or the
/// projection moves the point implausibly far.
fn refine_crease(p: &Vector3<f64>, sides: &CreaseSides, max_shift: f64) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let [(a, pa), (b, pb)] = sides;
    let d = a.cross(b);
    if d.norm() < 0.1 {
        return None;
    }
    // Minimum-norm correction x = p + alpha a + beta b satisfying both planes.
    let ab = a.dot(b);
    let (ra, rb) = (a.dot(&(pa - p)), b.dot(&(pb - p)));
    let det = 1.0 - ab * ab;
    let alpha = (ra - ab * rb) / det;
    let beta = (rb - ab * ra) / det;
    let x = p + a * alpha + b * beta;
    if (x - p).norm() > max_shift {
        return None;
    }
    let mut d = d.normalize();
    let big = d.iamax();
    if d[big] < 0.0 {
        d = -d;
    }
    Some((x, d))
}

/// Side planes of a crease, preferring the fitted patch planes when both side
/// pixels carry distinct patch labels.
fn crease_sides(seg: &Segmentation, s: &CreaseStrength, u: usize, v: usize, w: usize) -> Option<CreaseSides> {
    let sides = s.sides?;
    let r = CREASE_OFFSET;
    let (a, b) = if s.horizontal { ((u - r, v), (u + r, v)) } else { ((u, v - r), (u, v + r)) };
    match (seg.labels[a.1 * w + a.0], seg.labels[b.1 * w + b.0]) {
        (Some(la), Some(lb)) if la != lb => {
            let (pa, pb) = (&seg.patches[la as usize].plane, &seg.patches[lb as usize].plane);
            Some([(pa.normal, pa.point), (pb.normal, pb.point)])
        }
        _ => Some(sides),
    }
}

fn crease_features(
    frame: &DepthFrame,
    grid: &PointGrid,
    seg: &Segmentation,
    strength: &[CreaseStrength],
    mask: &[bool],
    params: &FeatureParams,
) -> Vec<Feature> {
    let w = frame.width();
    let fx = frame.intrinsics.fx.max(frame.intrinsics.fy);
    let mut cand = Vec::new();
    for (i, s) in strength.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        let (u, v) = (i % w, i / w);
        let (Some(p), Some(sides)) = (grid.point(u, v), crease_sides(seg, s, u, v, w)) else { continue };
        if mask_line_direction(grid, mask, u, v).is_none() {
            continue;
        }
        // A crease pixel lies at most the sampling offset away from the line.
        let max_shift = 2.0 * CREASE_OFFSET as f64 * p.z / fx;
        if let Some((position, direction)) = refine_crease(&p, &sides, max_shift) {
            cand.push(Feature {
                kind: FeatureKind::CreaseEdge,
                position,
                direction,
                frame: frame.index,
                pixel: (u as f32, v as f32),
                patch: None,
            });
        }
    }
    subsample(cand, params)
}

/// Line direction of the masked points around `(u, v)`, if they form a line.
fn mask_line_direction(grid: &PointGrid, mask: &[bool], u: usize, v: usize) -> Option<Vector3<f64>> {
    let (w, h) = (grid.width, grid.height);
    let rr = EDGE_DIRECTION_RADIUS;
    let neighbourhood: Vec<Vector3<f64>> = (v.saturating_sub(rr)..(v + rr + 1).min(h))
        .flat_map(|y| (u.saturating_sub(rr)..(u + rr + 1).min(w)).map(move |x| (x, y)))
        .filter(|&(x, y)| mask[y * w + x])
        .filter_map(|(x, y)| grid.point(x, y))
        .collect();
    line_direction(&neighbourhood)
}

fn subsample(cand: Vec<Feature>, params: &FeatureParams) -> Vec<Feature> {
    let pixels: Vec<(f64, f64)> = cand.iter().map(|f| (f.pixel.0 as f64, f.pixel.1 as f64)).collect();
    farthest_point_subsample(&pixels, params.max_features, params.min_spacing_px)
        .into_iter()
        .map(|i| cand[i])
        .collect()
}

fn edge_features(
    frame: &DepthFrame,
    grid: &PointGrid,
    mask: &[bool],
    kind: FeatureKind,
    params: &FeatureParams,
) -> Vec<Feature> {
    let (w, h) = (frame.width(), frame.height());
    let mut cand = Vec::new();
    for v in 0..h {
        for u in 0..w {
            if !mask[v * w + u] {
                continue;
            }
            let Some(p) = grid.point(u, v) else { continue };
            if let Some(direction) = mask_line_direction(grid, mask, u, v) {
                cand.push(Feature {
                    kind,
                    position: p,
                    direction,
                    frame: frame.index,
                    pixel: (u as f32, v as f32),
                    patch: None,
                });
            }
        }
    }
    subsample(cand, params)
}

fn planar_features(frame: &DepthFrame, seg: &Segmentation, params: &FeatureParams) -> Vec<Feature> {
    let (w, h) = (frame.width(), frame.height());
    let stride = params.planar_stride.max(1);
    let mut out = Vec::new();
    for v in (stride / 2..h).step_by(stride) {
        for u in (stride / 2..w).step_by(stride) {
            let Some(pi) = seg.labels[v * w + u] else { continue };
            let plane = &seg.patches[pi as usize].plane;
            let ray = frame.intrinsics.ray(u as f64, v as f64);
            let denom = plane.normal.dot(&ray);
            if denom.abs() < 1e-9 {
                continue;
            }
            let t = plane.normal.dot(&plane.point) / denom;
            if t <= 0.0 {
                continue;
            }
            out.push(Feature {
                kind: FeatureKind::Planar,
                position: ray * t,
                direction: plane.normal,
                frame: frame.index,
                pixel: (u as f32, v as f32),
                patch: Some(pi),
            });
        }
    }
    out
}

fn non_max_creases(strength: &[CreaseStrength], w: usize, h: usize, threshold: f64) -> Vec<bool> {
    let mut mask = vec![false; w * h];
    for v in 0..h {
        for u in 0..w {
            let CreaseStrength { angle: s, horizontal, .. } = strength[v * w + u];
            if s <= threshold {
                continue;
            }
            let neighbours = if horizontal {
                [(u.wrapping_sub(1), v), (u + 1, v)]
            } else {
                [(u, v.wrapping_sub(1)), (u, v + 1)]
            };
            let is_max = neighbours
                .iter()
                .all(|&(x, y)| x >= w || y >= h || strength[y * w + x].angle <= s);
            mask[v * w + u] = is_max;
        }
    }
    mask
}

fn extract_from_grid(
    frame: &DepthFrame,
    grid: &PointGrid,
    seg: &Segmentation,
    params: &FeatureParams,
) -> Vec<Feature> {
    let (w, h) = (frame.width(), frame.height());
    let contour = contour_mask(frame, params.contour_jump);
    let strength = crease_strength(grid, &contour);
    let crease = non_max_creases(&strength, w, h, params.crease_angle_deg.to_radians());
    let mut all = planar_features(frame, seg, params);
    all.extend(crease_features(frame, grid, seg, &strength, &crease, params));
    all.extend(edge_features(frame, grid, &contour, FeatureKind::ContourEdge, params));
    if all.len() > params.max_features {
        let pixels: Vec<(f64, f64)> = all.iter().map(|f| (f.pixel.0 as f64, f.pixel.1 as f64)).collect();
        let keep = farthest_point_subsample(&pixels, params.max_features, 0.0);
        all = keep.into_iter().map(|i| all[i]).collect();
    }
    all
}

/// Planar, crease-edge, and contour-edge features of one frame.
pub fn extract_features(frame: &DepthFrame, params: &FeatureParams) -> Vec<Feature> {
    let grid = point_grid(frame);
    let seg = segment_planes(frame, &grid, params);
    extract_from_grid(frame, &grid, &seg, params)
}

/// Patches and features without keypoints.
pub fn extract_geometry(frame: &DepthFrame, params: &FeatureParams) -> FrameFeatures {
    let grid = point_grid(frame);
    let seg = segment_planes(frame, &grid, params);
    let features = extract_from_grid(frame, &grid, &seg, params);
    FrameFeatures { frame: frame.index, patches: seg.patches, features, keypoints: Vec::new() }
}

/// Patches, features, and (when the frame has intensity) keypoints.
pub fn extract_frame(frame: &DepthFrame, params: &FeatureParams, keypoints: &HarrisParams) -> FrameFeatures {
    let mut ff = extract_geometry(frame, params);
    ff.keypoints = detect_keypoints(frame, keypoints).unwrap_or_default();
    ff
}

/// Harris detector settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarrisParams {
    pub k: f64,
    pub nms_radius: usize,
    pub max_corners: usize,
    /// Responses below this fraction of the frame maximum are ignored.
    pub relative_threshold: f64,
}

impl Default for HarrisParams {
    fn default() -> Self {
        Self { k: 0.04, nms_radius: 8, max_corners: 500, relative_threshold: 0.01 }
    }
}

const ABSOLUTE_HARRIS_THRESHOLD: f64 = 1e-10;
const DESCRIPTOR_HALF: usize = 8;

fn smooth_binomial(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let clamp = |x: isize, n: usize| x.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            tmp[v * w + u] = (0..5).map(|i| K[i] * src[v * w + clamp(u as isize + i as isize - 2, w)]).sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            out[v * w + u] = (0..5).map(|i| K[i] * tmp[clamp(v as isize + i as isize - 2, h) * w + u]).sum();
        }
    }
    out
}

/// Harris corners on the intensity channel, backprojected through depth, with a
/// 64-bin gradient-orientation descriptor (4x4 cells, 4 orientations).
pub fn detect_keypoints(frame: &DepthFrame, params: &HarrisParams) -> Result<Vec<Keypoint>, FeatureError> {
    let gray = frame.gray.as_ref().ok_or(FeatureError::KeypointsUnavailable { frame: frame.index })?;
    let (w, h) = (frame.width(), frame.height());
    if w < 3 || h < 3 {
        return Ok(Vec::new());
    }
    let g = |u: usize, v: usize| gray[v * w + u] as f64;
    let mut ix = vec![0.0; w * h];
    let mut iy = vec![0.0; w * h];
    for v in 1..h - 1 {
        for u in 1..w - 1 {
            ix[v * w + u] = (g(u + 1, v - 1) + 2.0 * g(u + 1, v) + g(u + 1, v + 1)
                - g(u - 1, v - 1)
                - 2.0 * g(u - 1, v)
                - g(u - 1, v + 1))
                / 8.0;
            iy[v * w + u] = (g(u - 1, v + 1) + 2.0 * g(u, v + 1) + g(u + 1, v + 1)
                - g(u - 1, v - 1)
                - 2.0 * g(u, v - 1)
                - g(u + 1, v - 1))
                / 8.0;
        }
    }
    let xx: Vec<f64> = ix.iter().map(|a| a * a).collect();
    let yy: Vec<f64> = iy.iter().map(|a| a * a).collect();
    let xy: Vec<f64> = ix.iter().zip(&iy).map(|(a, b)| a * b).collect();
    let (a, b, c) = (smooth_binomial(&xx, w, h), smooth_binomial(&yy, w, h), smooth_binomial(&xy, w, h));
    let response: Vec<f64> = (0..w * h)
        .map(|i| a[i] * b[i] - c[i] * c[i] - params.k * (a[i] + b[i]).powi(2))
        .collect();
    let max_r = response.iter().copied().fold(0.0, f64::max);
    let threshold = (params.relative_threshold * max_r).max(ABSOLUTE_HARRIS_THRESHOLD);
    let m = DESCRIPTOR_HALF.max(1);
    let r = params.nms_radius as isize;
    let mut corners = Vec::new();
    for v in m..h.saturating_sub(m) {
        for u in m..w.saturating_sub(m) {
            let s = response[v * w + u];
            if s <= threshold {
                continue;
            }
            let idx = (v * w + u) as isize;
            let mut is_max = true;
            'nms: for dv in -r..=r {
                for du in -r..=r {
                    let (x, y) = (u as isize + du, v as isize + dv);
                    if (du, dv) == (0, 0) || x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                        continue;
                    }
                    let j = y * w as isize + x;
                    let o = response[j as usize];
                    if o > s || (o == s && j < idx) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                corners.push((s, u, v));
            }
        }
    }
    corners.sort_by(|p, q| q.0.total_cmp(&p.0).then((p.2, p.1).cmp(&(q.2, q.1))));
    corners.truncate(params.max_corners);

    let mut out = Vec::new();
    for (_, u, v) in corners {
        let parabola = |l: f64, c: f64, r: f64| {
            let d = l - 2.0 * c + r;
            if d.abs() > 1e-18 {
                (0.5 * (l - r) / d).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        };
        let du = parabola(response[v * w + u - 1], response[v * w + u], response[v * w + u + 1]);
        let dv = parabola(response[(v - 1) * w + u], response[v * w + u], response[(v + 1) * w + u]);
        let (su, sv) = (u as f64 + du, v as f64 + dv);
        let Some(position) = frame.point_at_subpixel(su, sv).or_else(|| frame.point_at(u, v)) else {
            continue;
        };
        let mut desc = vec![0.0f32; DESCRIPTOR_LEN];
        for y in 0..2 * m {
            for x in 0..2 * m {
                let (pu, pv) = (u + x - m, v + y - m);
                let (gx, gy) = (ix[pv * w + pu], iy[pv * w + pu]);
                let mag = (gx * gx + gy * gy).sqrt();
                if mag == 0.0 {
                    continue;
                }
                let ang = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
                let bin = ((ang / std::f64::consts::FRAC_PI_2) as usize).min(3);
                let cell = (y * 4 / (2 * m)) * 4 + x * 4 / (2 * m);
                desc[cell * 4 + bin] += mag as f32;
            }
        }
        let norm = desc.iter().map(|d| d * d).sum::<f32>().sqrt();
        if norm > 0.0 {
            desc.iter_mut().for_each(|d| *d /= norm);
        }
        out.push(Keypoint { position, pixel: (su, sv), descriptor: desc });
    }
    Ok(out)
}

const CACHE_MAGIC: &[u8; 8] = b"F2CFEAT\0";
const CACHE_VERSION: u32 = 1;

struct CacheWriter(Vec<u8>);

impl CacheWriter {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn vec3(&mut self, v: &Vector3<f64>) {
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct CacheReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl CacheReader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()))
    }
    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
    fn vec3(&mut self) -> Option<Vector3<f64>> {
        Some(Vector3::new(self.f64()?, self.f64()?, self.f64()?))
    }
}

/// Serializes one frame's extraction results to the binary cache format.
pub fn encode_cache(ff: &FrameFeatures) -> Vec<u8> {
    let mut w = CacheWriter(CACHE_MAGIC.to_vec());
    w.u32(CACHE_VERSION);
    w.u64(ff.frame as u64);
    w.u64(ff.patches.len() as u64);
    for p in &ff.patches {
        w.vec3(&p.plane.normal);
        w.vec3(&p.plane.point);
        w.u64(p.inlier_count as u64);
        w.f64(p.moments.count);
        w.vec3(&p.moments.mean);
        p.moments.scatter.iter().for_each(|&x| w.f64(x));
    }
    w.u64(ff.features.len() as u64);
    for f in &ff.features {
        w.u8(f.kind.code());
        w.vec3(&f.position);
        w.vec3(&f.direction);
        w.f32(f.pixel.0);
        w.f32(f.pixel.1);
        w.u32(f.patch.map_or(u32::MAX, |p| p));
    }
    w.u64(ff.keypoints.len() as u64);
    for k in &ff.keypoints {
        w.vec3(&k.position);
        w.f64(k.pixel.0);
        w.f64(k.pixel.1);
        w.u32(k.descriptor.len() as u32);
        k.descriptor.iter().for_each(|&d| w.f32(d));
    }
    w.0
}

pub fn decode_cache(buf: &[u8]) -> Result<FrameFeatures, String> {
    let mut r = CacheReader { buf, pos: 0 };
    let short = || "truncated".to_string();
    if r.take(8).ok_or_else(short)? != CACHE_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32().ok_or_else(short)?;
    if version != CACHE_VERSION {
        return Err(format!("version {version}, expected {CACHE_VERSION}"));
    }
    let frame = r.u64().ok_or_else(short)? as usize;
    let np = r.u64().ok_or_else(short)? as usize;
    let mut patches = Vec::with_capacity(np.min(1 << 16));
    for _ in 0..np {
        let normal = r.vec3().ok_or_else(short)?;
        let point = r.vec3().ok_or_else(short)?;
        let inlier_count = r.u64().ok_or_else(short)? as usize;
        let count = r.f64().ok_or_else(short)?;
        let mean = r.vec3().ok_or_else(short)?;
        let mut s = [0.0; 9];
        for x in &mut s {
            *x = r.f64().ok_or_else(short)?;
        }
        patches.push(PlanarPatch {
            plane: Plane { normal, point },
            inlier_count,
            frame,
            moments: PlaneMoments { count, mean, scatter: Matrix3::from_column_slice(&s) },
        });
    }
    let nf = r.u64().ok_or_else(short)? as usize;
    let mut features = Vec::with_capacity(nf.min(1 << 16));
    for _ in 0..nf {
        let kind = FeatureKind::from_code(r.u8().ok_or_else(short)?).ok_or("bad feature kind")?;
        let position = r.vec3().ok_or_else(short)?;
        let direction = r.vec3().ok_or_else(short)?;
        let pixel = (r.f32().ok_or_else(short)?, r.f32().ok_or_else(short)?);
        let patch = r.u32().ok_or_else(short)?;
        features.push(Feature {
            kind,
            position,
            direction,
            frame,
            pixel,
            patch: (patch != u32::MAX).then_some(patch),
        });
    }
    let nk = r.u64().ok_or_else(short)? as usize;
    let mut keypoints = Vec::with_capacity(nk.min(1 << 16));
    for _ in 0..nk {
        let position = r.vec3().ok_or_else(short)?;
        let pixel = (r.f64().ok_or_else(short)?, r.f64().ok_or_else(short)?);
        let len = r.u32().ok_or_else(short)? as usize;
        let descriptor = (0..len).map(|_| r.f32()).collect::<Option<Vec<f32>>>().ok_or_else(short)?;
        keypoints.push(Keypoint { position, pixel, descriptor });
    }
    if r.pos != buf.len() {
        return Err("trailing bytes".into());
    }
    Ok(FrameFeatures { frame, patches, features, keypoints })
}

pub fn write_cache(path: &Path, ff: &FrameFeatures) -> Result<(), FeatureError> {
    let io = |source| FeatureError::Io { path: path.to_path_buf(), source };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&encode_cache(ff)).map_err(io)
}

pub fn read_cache(path: &Path) -> Result<FrameFeatures, FeatureError> {
    let io = |source| FeatureError::Io { path: path.to_path_buf(), source };
    let mut buf = Vec::new();
    fs::File::open(path).map_err(io)?.read_to_end(&mut buf).map_err(io)?;
    decode_cache(&buf).map_err(|reason| FeatureError::Cache { path: path.to_path_buf(), reason })
}

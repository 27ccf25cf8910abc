//! Closest-compatible-feature correspondences between frame pairs.

use std::collections::BTreeMap;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::windows::Window;
use super::FeatureId;
use crate::features::{Feature, FeatureKind};
use crate::geom::{angle_between, RigidTransform};

const KINDS: [FeatureKind; 3] = [FeatureKind::Planar, FeatureKind::CreaseEdge, FeatureKind::ContourEdge];

fn kind_slot(kind: FeatureKind) -> usize {
    match kind {
        FeatureKind::Planar => 0,
        FeatureKind::CreaseEdge => 1,
        FeatureKind::ContourEdge => 2,
    }
}

/// World-space features of one frame, grouped by kind, with one k-d tree per kind.
pub struct WorldFrame {
    pub frame: usize,
    pub groups: [KindGroup; 3],
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

pub struct KindGroup {
    /// Index of each entry in the frame's feature list.
    pub source: Vec<u32>,
    pub positions: Vec<Vector3<f64>>,
    pub directions: Vec<Vector3<f64>>,
    tree: Option<ImmutableKdTree<f64, 3>>,
}

impl KindGroup {
    fn nearest(&self, p: &Vector3<f64>) -> Option<(usize, f64)> {
        let tree = self.tree.as_ref()?;
        let r = tree.query(&[p.x, p.y, p.z]).nearest_one::<SquaredEuclidean<f64>>().execute();
        Some((r.item as usize, r.distance))
    }
}

impl WorldFrame {
    pub fn new(frame: usize, features: &[Feature], pose: &RigidTransform) -> Self {
        let mut groups: [KindGroup; 3] = std::array::from_fn(|_| KindGroup {
            source: Vec::new(),
            positions: Vec::new(),
            directions: Vec::new(),
            tree: None,
        });
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for (i, f) in features.iter().enumerate() {
            let g = &mut groups[kind_slot(f.kind)];
            let p = pose.transform_point(&f.position);
            min = min.inf(&p);
            max = max.sup(&p);
            g.source.push(i as u32);
            g.positions.push(p);
            g.directions.push(pose.transform_vector(&f.direction));
        }
        for g in &mut groups {
            if !g.positions.is_empty() {
                let pts: Vec<[f64; 3]> = g.positions.iter().map(|p| [p.x, p.y, p.z]).collect();
                g.tree = ImmutableKdTree::new_from_slice(&pts).ok();
            }
        }
        Self { frame, groups, min, max }
    }

    fn near(&self, other: &WorldFrame, margin: f64) -> bool {
        (0..3).all(|k| self.min[k] - margin <= other.max[k] && other.min[k] - margin <= self.max[k])
    }
}

/// Angle between two feature directions; edges are unsigned lines.
pub fn direction_angle(kind: FeatureKind, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let t = angle_between(a, b);
    if kind.is_edge() {
        t.min(std::f64::consts::PI - t)
    } else {
        t
    }
}

/// A raw match before it becomes a constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawMatch {
    pub a: FeatureId,
    pub b: FeatureId,
    pub kind: FeatureKind,
    pub distance: f64,
    pub angle: f64,
}

/// Mutual-nearest same-kind matches from frame `a` into frame `b` within the
/// distance and angle limits.
pub fn match_frames(a: &WorldFrame, b: &WorldFrame, max_distance: f64, max_angle: f64) -> Vec<RawMatch> {
    let mut out = Vec::new();
    if !a.near(b, max_distance) {
        return out;
    }
    let max_sq = max_distance * max_distance;
    for kind in KINDS {
        let (ga, gb) = (&a.groups[kind_slot(kind)], &b.groups[kind_slot(kind)]);
        if ga.positions.is_empty() || gb.positions.is_empty() {
            continue;
        }
        for (i, p) in ga.positions.iter().enumerate() {
            let Some((j, d2)) = gb.nearest(p) else { continue };
            if d2 >= max_sq {
                continue;
            }
            if ga.nearest(&gb.positions[j]).map(|(back, _)| back) != Some(i) {
                continue;
            }
            let angle = direction_angle(kind, &ga.directions[i], &gb.directions[j]);
            if angle >= max_angle {
                continue;
            }
            out.push(RawMatch {
                a: FeatureId { frame: a.frame as u32, index: ga.source[i] },
                b: FeatureId { frame: b.frame as u32, index: gb.source[j] },
                kind,
                distance: d2.sqrt(),
                angle,
            });
        }
    }
    out
}

/// Frame pairs examined in one window: each frame with partners at offsets
/// 1, 2, 4, ... inside the window plus `random_partners` uniform draws.
pub fn window_pairs(w: &Window, random_partners: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((w.iteration as u64) << 32) | w.index as u64);
    let len = w.last - w.first + 1;
    let mut pairs = Vec::new();
    for f in w.frames() {
        let mut off = 1;
        while off < len {
            if f + off <= w.last {
                pairs.push((f, f + off));
            }
            off *= 2;
        }
        if len > 1 {
            for _ in 0..random_partners {
                let g = rng.random_range(w.first..=w.last);
                if g != f {
                    pairs.push((f.min(g), f.max(g)));
                }
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

/// Every sampled pair, owned by the first window that produced it.
pub fn owned_pairs(windows: &[Window], random_partners: usize, seed: u64) -> BTreeMap<(usize, usize), usize> {
    let mut owner = BTreeMap::new();
    for w in windows {
        for p in window_pairs(w, random_partners, seed) {
            owner.entry(p).or_insert(w.index);
        }
    }
    owner
}

/// Matches for many pairs, evaluated concurrently and returned in pair order.
pub fn match_pairs(
    world: &[WorldFrame],
    pairs: &[((usize, usize), (f64, f64))],
) -> Vec<Vec<RawMatch>> {
    pairs
        .par_iter()
        .map(|&((a, b), (d, ang))| match_frames(&world[a], &world[b], d, ang.to_radians()))
        .collect()
}

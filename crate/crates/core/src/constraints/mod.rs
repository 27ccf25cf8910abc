//! Per-iteration constraint detection: windows, coplanar proxy clustering,
//! planar relations, feature correspondences, and their subsampling.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{FeatureKind, FrameFeatures};
use crate::geom::{Plane, RigidTransform};

pub mod cluster;
pub mod correspond;
pub mod windows;

pub use cluster::{classify_relation, cluster_coplanar, relation_weight, Cluster, ClusterInput, RelationKind};
pub use correspond::{direction_angle, match_frames, owned_pairs, window_pairs, RawMatch, WorldFrame};
pub use windows::{make_windows, ThresholdSchedule, Window, WindowHistory};

/// A feature of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureId {
    pub frame: u32,
    pub index: u32,
}

/// A per-frame planar patch acting as a leaf proxy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LeafId {
    pub frame: u32,
    pub patch: u32,
}

/// A parent proxy of the current iteration (index into [`ConstraintSet::proxies`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProxyId(pub u32);

/// A parent planar proxy in world space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proxy {
    pub id: ProxyId,
    pub plane: Plane,
    pub children: Vec<LeafId>,
    pub inlier_count: usize,
    pub window: usize,
}

/// Parent-child coplanarity. `flip` records whether the child's normal points
/// against the parent's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoplanarityConstraint {
    pub parent: ProxyId,
    pub child: LeafId,
    pub flip: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationConstraint {
    pub kind: RelationKind,
    pub a: ProxyId,
    pub b: ProxyId,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrespondenceKind {
    Plane,
    Edge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceConstraint {
    pub a: FeatureId,
    pub b: FeatureId,
    pub kind: CorrespondenceKind,
    /// Window that owns the frame pair.
    pub window: usize,
    /// Limits in force when the match was made (meters, radians).
    pub max_distance: f64,
    pub max_angle: f64,
}

/// A planar feature sample tying a parent proxy to a frame pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneSample {
    pub proxy: ProxyId,
    pub feature: FeatureId,
    pub flip: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintParams {
    pub tau_merge: f64,
    pub lambda_n: f64,
    pub sigma_theta_deg: f64,
    pub relation_cutoff_sigmas: f64,
    pub schedule: ThresholdSchedule,
    pub random_partners: usize,
    /// Correspondence and plane-sample budgets are this many per frame.
    pub samples_per_frame: usize,
    /// Detect proxies and structural constraints at all.
    pub structure: bool,
}

impl Default for ConstraintParams {
    fn default() -> Self {
        Self {
            tau_merge: 0.01,
            lambda_n: crate::geom::DEFAULT_LAMBDA_N,
            sigma_theta_deg: 10.0,
            relation_cutoff_sigmas: 3.0,
            schedule: ThresholdSchedule::default(),
            random_partners: 4,
            samples_per_frame: 100,
            structure: true,
        }
    }
}

/// Everything detected in one iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub iteration: usize,
    pub windows: Vec<Window>,
    pub proxies: Vec<Proxy>,
    pub coplanarity: Vec<CoplanarityConstraint>,
    pub relations: Vec<RelationConstraint>,
    pub correspondences: Vec<CorrespondenceConstraint>,
    pub plane_samples: Vec<PlaneSample>,
    /// Correspondence count before subsampling.
    pub raw_correspondences: usize,
}

/// Splits `total` into integer shares proportional to `weights` (largest
/// remainder; ties go to the lower index).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || !(sum > 0.0) {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Keeps at most `cap` correspondences, allocating the budget across owning
/// windows in proportion to their counts. Preserves the input order.
pub fn subsample_correspondences(
    c: Vec<CorrespondenceConstraint>,
    cap: usize,
    seed: u64,
) -> Vec<CorrespondenceConstraint> {
    if c.len() <= cap {
        return c;
    }
    let mut by_window: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, x) in c.iter().enumerate() {
        by_window.entry(x.window).or_default().push(i);
    }
    let counts: Vec<f64> = by_window.values().map(|v| v.len() as f64).collect();
    let quota = largest_remainder(&counts, cap);
    let mut keep = Vec::with_capacity(cap);
    for ((&w, idx), &q) in by_window.iter().zip(&quota) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(w as u64);
        keep.extend(sample(&mut rng, idx.len(), q.min(idx.len())).into_iter().map(|k| idx[k]));
    }
    keep.sort_unstable();
    keep.into_iter().map(|i| c[i]).collect()
}

fn leaf_input(frames: &[FrameFeatures], poses: &[RigidTransform], leaf: LeafId) -> ClusterInput {
    let patch = &frames[leaf.frame as usize].patches[leaf.patch as usize];
    let pose = &poses[leaf.frame as usize];
    let moments = patch.moments.transformed(pose);
    let plane = pose.transform_plane(&patch.plane);
    ClusterInput { plane, moments }
}

fn detect_structure(
    frames: &[FrameFeatures],
    poses: &[RigidTransform],
    windows: &[Window],
    params: &ConstraintParams,
    set: &mut ConstraintSet,
) {
    let per_window: Vec<Vec<(Cluster, Vec<LeafId>)>> = windows
        .par_iter()
        .map(|w| {
            let leaves: Vec<LeafId> = w
                .frames()
                .flat_map(|f| (0..frames[f].patches.len()).map(move |p| LeafId { frame: f as u32, patch: p as u32 }))
                .collect();
            let inputs: Vec<ClusterInput> = leaves.iter().map(|&l| leaf_input(frames, poses, l)).collect();
            cluster_coplanar(&inputs, params.tau_merge, params.lambda_n)
                .into_iter()
                .map(|c| {
                    let ids = c.members.iter().map(|&m| leaves[m]).collect();
                    (c, ids)
                })
                .collect()
        })
        .collect();

    let mut window_proxies: Vec<Vec<ProxyId>> = Vec::with_capacity(windows.len());
    for (w, clusters) in windows.iter().zip(per_window) {
        let mut ids = Vec::new();
        for (c, children) in clusters {
            let id = ProxyId(set.proxies.len() as u32);
            let inlier_count = children
                .iter()
                .map(|l| frames[l.frame as usize].patches[l.patch as usize].inlier_count)
                .sum();
            if children.len() >= 2 {
                for &child in &children {
                    let n = leaf_input(frames, poses, child).plane.normal;
                    set.coplanarity.push(CoplanarityConstraint { parent: id, child, flip: n.dot(&c.plane.normal) < 0.0 });
                }
            }
            set.proxies.push(Proxy { id, plane: c.plane, children, inlier_count, window: w.index });
            ids.push(id);
        }
        window_proxies.push(ids);
    }

    // Relations among parents of the same window and of adjacent windows.
    let sigma = params.sigma_theta_deg.to_radians();
    let emit = |a: ProxyId, b: ProxyId, set: &mut ConstraintSet| {
        let (na, nb) = (set.proxies[a.0 as usize].plane.normal, set.proxies[b.0 as usize].plane.normal);
        if let Some((kind, weight)) = classify_relation(&na, &nb, sigma, params.relation_cutoff_sigmas) {
            set.relations.push(RelationConstraint { kind, a, b, weight });
        }
    };
    for j in 0..window_proxies.len() {
        let own = &window_proxies[j];
        for (i, &a) in own.iter().enumerate() {
            for &b in &own[i + 1..] {
                emit(a, b, set);
            }
        }
        if let Some(next) = window_proxies.get(j + 1) {
            for &a in own {
                for &b in next {
                    emit(a, b, set);
                }
            }
        }
    }

    // Plane samples: budget split over parents by inlier count.
    let budget = params.samples_per_frame * frames.len();
    let weights: Vec<f64> = set.proxies.iter().map(|p| p.inlier_count as f64).collect();
    let quota = largest_remainder(&weights, budget);
    let mut by_leaf: BTreeMap<LeafId, Vec<u32>> = BTreeMap::new();
    for ff in frames {
        for (i, f) in ff.features.iter().enumerate() {
            if let (FeatureKind::Planar, Some(p)) = (f.kind, f.patch) {
                by_leaf.entry(LeafId { frame: ff.frame as u32, patch: p }).or_default().push(i as u32);
            }
        }
    }
    for (proxy, &q) in set.proxies.iter().zip(&quota) {
        let pool: Vec<FeatureId> = proxy
            .children
            .iter()
            .flat_map(|l| {
                by_leaf.get(l).into_iter().flatten().map(move |&index| FeatureId { frame: l.frame, index })
            })
            .collect();
        if pool.is_empty() || q == 0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x7361_6d70);
        rng.set_stream(((set.iteration as u64) << 32) | proxy.id.0 as u64);
        let mut picks: Vec<usize> = sample(&mut rng, pool.len(), q.min(pool.len())).into_vec();
        picks.sort_unstable();
        for k in picks {
            let fid = pool[k];
            let f = &frames[fid.frame as usize].features[fid.index as usize];
            let n = poses[fid.frame as usize].transform_vector(&f.direction);
            set.plane_samples.push(PlaneSample { proxy: proxy.id, feature: fid, flip: n.dot(&proxy.plane.normal) < 0.0 });
        }
    }
}

/// Runs the detection step of one iteration over the given windows. `history`
/// must already include this iteration's window length.
pub fn detect_constraints(
    frames: &[FrameFeatures],
    poses: &[RigidTransform],
    windows: &[Window],
    history: &WindowHistory,
    params: &ConstraintParams,
    seed: u64,
) -> ConstraintSet {
    let iteration = history.current().unwrap_or(0);
    let mut set = ConstraintSet { iteration, windows: windows.to_vec(), ..Default::default() };
    if params.structure {
        detect_structure(frames, poses, windows, params, &mut set);
    }

    let world: Vec<WorldFrame> = frames
        .par_iter()
        .zip(poses.par_iter())
        .map(|(ff, pose)| WorldFrame::new(ff.frame, &ff.features, pose))
        .collect();
    let owner = owned_pairs(windows, params.random_partners, seed);
    let jobs: Vec<((usize, usize), (f64, f64))> = owner
        .keys()
        .map(|&(a, b)| ((a, b), params.schedule.at(history.pair_age(a, b))))
        .collect();
    let matched = correspond::match_pairs(&world, &jobs);
    let mut all = Vec::new();
    for ((&(_, _), &window), (matches, (_, (d, ang)))) in owner.iter().zip(matched.into_iter().zip(&jobs)) {
        for m in matches {
            all.push(CorrespondenceConstraint {
                a: m.a,
                b: m.b,
                kind: if m.kind.is_edge() { CorrespondenceKind::Edge } else { CorrespondenceKind::Plane },
                window,
                max_distance: *d,
                max_angle: ang.to_radians(),
            });
        }
    }
    // Deterministic order: owning window, then constraint key.
    all.sort_by_key(|c| (c.window, c.a, c.b));
    set.raw_correspondences = all.len();
    let cap = params.samples_per_frame * frames.len();
    set.correspondences = subsample_correspondences(all, cap, seed ^ ((iteration as u64) << 40));
    set
}

/// Writes one JSON object per constraint.
pub fn dump_constraints(set: &ConstraintSet, out: &mut impl Write) -> std::io::Result<()> {
    use serde_json::json;
    let it = set.iteration;
    for c in &set.coplanarity {
        let v = json!({"type": "coplanarity", "parent": c.parent.0, "child": [c.child.frame, c.child.patch], "iteration": it});
        writeln!(out, "{v}")?;
    }
    for r in &set.relations {
        let v = json!({"type": "relation", "kind": r.kind, "a": r.a.0, "b": r.b.0, "weight": r.weight, "iteration": it});
        writeln!(out, "{v}")?;
    }
    for p in &set.plane_samples {
        let v = json!({"type": "plane_sample", "proxy": p.proxy.0, "feature": [p.feature.frame, p.feature.index], "iteration": it});
        writeln!(out, "{v}")?;
    }
    for c in &set.correspondences {
        let v = json!({
            "type": "correspondence",
            "kind": c.kind,
            "a": [c.a.frame, c.a.index],
            "b": [c.b.frame, c.b.index],
            "window": c.window,
            "weight": 1.0,
            "iteration": it,
        });
        writeln!(out, "{v}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn corr(window: usize, i: u32) -> CorrespondenceConstraint {
        CorrespondenceConstraint {
            a: FeatureId { frame: 0, index: i },
            b: FeatureId { frame: 1, index: i },
            kind: CorrespondenceKind::Plane,
            window,
            max_distance: 0.5,
            max_angle: 1.0,
        }
    }

    #[test]
    fn small_sets_are_unchanged() {
        let c: Vec<_> = (0..50).map(|i| corr(0, i)).collect();
        assert_eq!(subsample_correspondences(c.clone(), 100, 1), c);
    }

    #[test]
    fn cap_is_exact_and_stratified() {
        let mut c = Vec::new();
        let sizes = [40_000usize, 30_000, 20_000, 9_000, 1_000];
        for (w, &s) in sizes.iter().enumerate() {
            c.extend((0..s as u32).map(|i| corr(w, i)));
        }
        let kept = subsample_correspondences(c, 10_000, 3);
        assert_eq!(kept.len(), 10_000);
        let mut per: BTreeMap<usize, usize> = BTreeMap::new();
        for k in &kept {
            *per.entry(k.window).or_default() += 1;
        }
        let global = 10_000.0 / 100_000.0;
        for (w, &s) in sizes.iter().enumerate() {
            let ratio = per[&w] as f64 / s as f64;
            assert!(ratio >= global / 2.0, "window {w} kept {ratio}");
        }
        let again = subsample_correspondences((0..100_000u32).map(|i| corr(0, i)).collect(), 10_000, 3);
        assert_eq!(again, subsample_correspondences((0..100_000u32).map(|i| corr(0, i)).collect(), 10_000, 3));
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(&[900.0, 100.0], 100), vec![90, 10]);
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 100), vec![34, 33, 33]);
        assert_eq!(largest_remainder(&[1.0, 2.0], 0), vec![0, 0]);
    }
}

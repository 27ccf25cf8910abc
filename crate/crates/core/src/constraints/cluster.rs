//! Agglomerative clustering of coplanar proxies and relation detection.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::geom::{angle_between, coplanarity_error, Plane, PlaneMoments};

/// A plane to be clustered, with the moments of the pixels behind it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterInput {
    pub plane: Plane,
    pub moments: PlaneMoments,
}

/// Members (indices into the input) and the refit plane of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub members: Vec<usize>,
    pub plane: Plane,
    pub moments: PlaneMoments,
}

#[derive(Debug, PartialEq)]
struct Candidate {
    cost: f64,
    a: usize,
    b: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| (other.a, other.b).cmp(&(self.a, self.b)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Node {
    members: Vec<usize>,
    plane: Plane,
    moments: PlaneMoments,
    /// Normal of the member with the most pixels; fixes the cluster's sign.
    anchor: (f64, nalgebra::Vector3<f64>),
    alive: bool,
}

/// Merges planes in ascending coplanarity-error order while the error of the
/// closest pair stays below `tau`. Every merged cluster is refit from the summed
/// moments, its normal oriented like its largest member. Output clusters are
/// sorted by their smallest member index.
pub fn cluster_coplanar(inputs: &[ClusterInput], tau: f64, lambda_n: f64) -> Vec<Cluster> {
    let mut nodes: Vec<Node> = inputs
        .iter()
        .enumerate()
        .map(|(i, p)| Node {
            members: vec![i],
            plane: p.plane,
            moments: p.moments,
            anchor: (p.moments.count, p.plane.normal),
            alive: true,
        })
        .collect();
    let mut heap = BinaryHeap::new();
    for a in 0..nodes.len() {
        for b in a + 1..nodes.len() {
            let cost = coplanarity_error(&nodes[a].plane, &nodes[b].plane, lambda_n);
            if cost < tau {
                heap.push(Candidate { cost, a, b });
            }
        }
    }
    while let Some(c) = heap.pop() {
        if !nodes[c.a].alive || !nodes[c.b].alive {
            continue;
        }
        nodes[c.a].alive = false;
        nodes[c.b].alive = false;
        let (na, nb) = (&nodes[c.a], &nodes[c.b]);
        let moments = na.moments.merged(&nb.moments);
        let anchor = if nb.anchor.0 > na.anchor.0 { nb.anchor } else { na.anchor };
        let plane = moments.fit().0.oriented_like(&anchor.1);
        let mut members = na.members.clone();
        members.extend_from_slice(&nb.members);
        members.sort_unstable();
        let id = nodes.len();
        nodes.push(Node { members, plane, moments, anchor, alive: true });
        for other in 0..id {
            if nodes[other].alive {
                let cost = coplanarity_error(&nodes[other].plane, &nodes[id].plane, lambda_n);
                if cost < tau {
                    heap.push(Candidate { cost, a: other, b: id });
                }
            }
        }
    }
    let mut out: Vec<Cluster> = nodes
        .into_iter()
        .filter(|n| n.alive)
        .map(|n| Cluster { members: n.members, plane: n.plane, moments: n.moments })
        .collect();
    out.sort_by_key(|c| c.members[0]);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    Parallel,
    Orthogonal,
    Antiparallel,
}

impl RelationKind {
    pub fn canonical_angle(self) -> f64 {
        match self {
            RelationKind::Parallel => 0.0,
            RelationKind::Orthogonal => std::f64::consts::FRAC_PI_2,
            RelationKind::Antiparallel => std::f64::consts::PI,
        }
    }

    /// The relation whose canonical angle is nearest `theta`.
    pub fn nearest(theta: f64) -> Self {
        [RelationKind::Parallel, RelationKind::Orthogonal, RelationKind::Antiparallel]
            .into_iter()
            .min_by(|a, b| {
                (theta - a.canonical_angle()).abs().total_cmp(&(theta - b.canonical_angle()).abs())
            })
            .expect("three kinds")
    }
}

/// Gaussian falloff of a relation's weight away from its canonical angle.
pub fn relation_weight(theta: f64, kind: RelationKind, sigma_theta: f64) -> f64 {
    let d = theta - kind.canonical_angle();
    (-(d * d) / (2.0 * sigma_theta * sigma_theta)).exp()
}

/// Classifies the angle between two normals; `None` beyond `cutoff_sigmas`
/// standard deviations from every canonical angle.
pub fn classify_relation(
    a: &nalgebra::Vector3<f64>,
    b: &nalgebra::Vector3<f64>,
    sigma_theta: f64,
    cutoff_sigmas: f64,
) -> Option<(RelationKind, f64)> {
    let theta = angle_between(a, b);
    let kind = RelationKind::nearest(theta);
    ((theta - kind.canonical_angle()).abs() < cutoff_sigmas * sigma_theta)
        .then(|| (kind, relation_weight(theta, kind, sigma_theta)))
}

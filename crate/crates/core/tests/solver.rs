use approx::assert_relative_eq;
use fine2coarse::constraints::{
    CoplanarityConstraint, ConstraintSet, CorrespondenceConstraint, CorrespondenceKind, FeatureId, LeafId,
    PlaneSample, Proxy, ProxyId, RelationConstraint, RelationKind,
};
use fine2coarse::features::{Feature, FeatureKind, FrameFeatures, PlanarPatch};
use fine2coarse::geom::{coplanarity_error, relative, transform_misalignment, wrap_angle, EulerAngles, Plane, PlaneMoments, RigidTransform};
use fine2coarse::solver::{energy, solve, EnergyWeights, ParameterState, Problem, ProblemOptions, SolveOptions, TermClass};
use nalgebra::{Matrix4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn v3(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

fn unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = v3(rng, 1.0);
        if v.norm() > 0.3 {
            return v.normalize();
        }
    }
}

fn random_pose(rng: &mut ChaCha8Rng) -> RigidTransform {
    RigidTransform::from_params(&[
        rng.random_range(-3.0..3.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-3.0..3.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
    ])
}

fn planar(frame: usize, position: Vector3<f64>, normal: Vector3<f64>) -> Feature {
    Feature { kind: FeatureKind::Planar, position, direction: normal, frame, pixel: (0.0, 0.0), patch: None }
}

fn edge(frame: usize, position: Vector3<f64>, direction: Vector3<f64>) -> Feature {
    Feature { kind: FeatureKind::CreaseEdge, position, direction, frame, pixel: (0.0, 0.0), patch: None }
}

fn empty_frames(n: usize) -> Vec<FrameFeatures> {
    (0..n).map(|frame| FrameFeatures { frame, patches: vec![], features: vec![], keypoints: vec![] }).collect()
}

fn patch(frame: usize, plane: Plane) -> PlanarPatch {
    PlanarPatch { plane, inlier_count: 1000, frame, moments: PlaneMoments::empty() }
}

fn proxy(id: u32, plane: Plane) -> Proxy {
    Proxy { id: ProxyId(id), plane, children: vec![], inlier_count: 1000, window: 0 }
}

fn fid(frame: u32, index: u32) -> FeatureId {
    FeatureId { frame, index }
}

fn corr(a: FeatureId, b: FeatureId, kind: CorrespondenceKind) -> CorrespondenceConstraint {
    CorrespondenceConstraint { a, b, kind, window: 0, max_distance: 0.5, max_angle: 1.0 }
}

fn structural_only(frames: usize, proxies: usize) -> Problem {
    Problem::new(frames, proxies, ProblemOptions::default())
}

/// Independent homogeneous-matrix route for moving points into the world.
fn world_point(t: &RigidTransform, p: &Vector3<f64>) -> Vector3<f64> {
    let m: Matrix4<f64> = t.to_matrix4();
    let h = m * Vector4::new(p.x, p.y, p.z, 1.0);
    Vector3::new(h.x, h.y, h.z)
}

fn world_dir(t: &RigidTransform, d: &Vector3<f64>) -> Vector3<f64> {
    let m: Matrix4<f64> = t.to_matrix4();
    let h = m * Vector4::new(d.x, d.y, d.z, 0.0);
    Vector3::new(h.x, h.y, h.z)
}

struct Random {
    frames: Vec<FrameFeatures>,
    set: ConstraintSet,
    state: ParameterState,
}

fn random_scene(seed: u64) -> Random {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 6;
    let mut frames = empty_frames(n);
    let poses: Vec<RigidTransform> =
        (0..n).map(|i| if i == 0 { RigidTransform::identity() } else { random_pose(&mut rng) }).collect();
    let proxies: Vec<Plane> = (0..4).map(|_| Plane { normal: unit(&mut rng), point: v3(&mut rng, 2.0) }).collect();
    let mut set = ConstraintSet::default();
    for (i, p) in proxies.iter().enumerate() {
        set.proxies.push(proxy(i as u32, *p));
    }
    for f in 0..n {
        for _ in 0..3 {
            frames[f].patches.push(patch(f, Plane { normal: unit(&mut rng), point: v3(&mut rng, 2.0) }));
            frames[f].features.push(planar(f, v3(&mut rng, 2.0), unit(&mut rng)));
            frames[f].features.push(edge(f, v3(&mut rng, 2.0), unit(&mut rng)));
        }
    }
    for f in 0..n {
        for k in 0..3u32 {
            let parent = rng.random_range(0..4u32);
            let leaf = &frames[f].patches[k as usize];
            let n_world = poses[f].transform_vector(&leaf.plane.normal);
            let flip = n_world.dot(&proxies[parent as usize].normal) < 0.0;
            set.coplanarity.push(CoplanarityConstraint { parent: ProxyId(parent), child: LeafId { frame: f as u32, patch: k }, flip });
            let feat = &frames[f].features[2 * k as usize];
            let flip = poses[f].transform_vector(&feat.direction).dot(&proxies[parent as usize].normal) < 0.0;
            set.plane_samples.push(PlaneSample { proxy: ProxyId(parent), feature: fid(f as u32, 2 * k), flip });
        }
    }
    set.relations = vec![
        RelationConstraint { kind: RelationKind::Parallel, a: ProxyId(0), b: ProxyId(1), weight: 0.8 },
        RelationConstraint { kind: RelationKind::Orthogonal, a: ProxyId(1), b: ProxyId(2), weight: 0.5 },
        RelationConstraint { kind: RelationKind::Antiparallel, a: ProxyId(3), b: ProxyId(0), weight: 0.3 },
    ];
    for _ in 0..20 {
        let (a, b) = (rng.random_range(0..n as u32), rng.random_range(0..n as u32));
        if a == b {
            continue;
        }
        let k = rng.random_range(0..3u32);
        set.correspondences.push(corr(fid(a, 2 * k), fid(b, 2 * rng.random_range(0..3u32)), CorrespondenceKind::Plane));
        set.correspondences.push(corr(fid(a, 2 * k + 1), fid(b, 2 * rng.random_range(0..3u32) + 1), CorrespondenceKind::Edge));
    }
    Random { frames, set, state: ParameterState { poses, proxy_planes: proxies } }
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn with_constraints(r: &Random) -> Problem {
    let mut p = structural_only(r.state.poses.len(), r.state.proxy_planes.len());
    p.add_constraints(&r.frames, &r.set).unwrap();
    p
}

#[test]
fn hierarchy_residuals_match_scalar_coplanarity_error() {
    for seed in 0..20 {
        let r = random_scene(seed);
        let p = with_constraints(&r);
        let got = sum_sq(&p.residuals(&r.state, TermClass::H).unwrap());
        let oracle: f64 = r
            .set
            .coplanarity
            .iter()
            .map(|c| {
                let leaf = r.frames[c.child.frame as usize].patches[c.child.patch as usize].plane;
                let world = r.state.poses[c.child.frame as usize].transform_plane(&leaf);
                coplanarity_error(&r.state.proxy_planes[c.parent.0 as usize], &world, 0.25)
            })
            .sum();
        assert_relative_eq!(got, oracle, max_relative = 1e-10);
    }
}

#[test]
fn plane_sample_residuals_match_scalar_coplanarity_error() {
    for seed in 0..20 {
        let r = random_scene(seed);
        let p = with_constraints(&r);
        let got = sum_sq(&p.residuals(&r.state, TermClass::P).unwrap());
        let oracle: f64 = r
            .set
            .plane_samples
            .iter()
            .map(|s| {
                let f = &r.frames[s.feature.frame as usize].features[s.feature.index as usize];
                let t = &r.state.poses[s.feature.frame as usize];
                let world = Plane { normal: world_dir(t, &f.direction), point: world_point(t, &f.position) };
                coplanarity_error(&r.state.proxy_planes[s.proxy.0 as usize], &world, 0.25)
            })
            .sum();
        assert_relative_eq!(got, oracle, max_relative = 1e-10);
    }
}

#[test]
fn coplanar_residual_examples() {
    let plane = Plane::new(Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 2.0, 3.0));
    let mut frames = empty_frames(1);
    frames[0].patches.push(patch(0, plane));
    frames[0].patches.push(patch(0, Plane::new(plane.normal, plane.point + 0.1 * plane.normal)));
    let mut set = ConstraintSet::default();
    set.proxies.push(proxy(0, plane));
    for k in 0..2 {
        set.coplanarity.push(CoplanarityConstraint { parent: ProxyId(0), child: LeafId { frame: 0, patch: k }, flip: false });
    }
    let mut p = structural_only(1, 1);
    p.add_constraints(&frames, &set).unwrap();
    let state = ParameterState { poses: vec![RigidTransform::identity()], proxy_planes: vec![plane] };
    let r = p.residuals(&state, TermClass::H).unwrap();
    assert!(r[..5].iter().all(|v| *v == 0.0));
    assert_relative_eq!(r[5], 0.1, epsilon = 1e-12);
    assert_relative_eq!(r[6], -0.1, epsilon = 1e-12);
    assert!(r[7..].iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn dangling_proxy_is_rejected_by_id() {
    let mut frames = empty_frames(1);
    frames[0].patches.push(patch(0, Plane::new(Vector3::z(), Vector3::zeros())));
    let mut set = ConstraintSet::default();
    set.coplanarity.push(CoplanarityConstraint { parent: ProxyId(7), child: LeafId { frame: 0, patch: 0 }, flip: false });
    let mut p = structural_only(1, 2);
    let err = p.add_constraints(&frames, &set).unwrap_err().to_string();
    assert!(err.contains("proxy 7"), "{err}");
}

#[test]
fn relation_residual_examples() {
    let a = Vector3::new(0.0, 0.0, 1.0);
    let b = (nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), 10f64.to_radians()) * a).normalize();
    let state = |n1: Vector3<f64>| ParameterState {
        poses: vec![RigidTransform::identity()],
        proxy_planes: vec![Plane::new(a, Vector3::zeros()), Plane::new(n1, Vector3::zeros())],
    };
    let run = |kind, n1| {
        let mut set = ConstraintSet::default();
        set.relations.push(RelationConstraint { kind, a: ProxyId(0), b: ProxyId(1), weight: 1.0 });
        let mut p = structural_only(1, 2);
        p.add_constraints(&empty_frames(1), &set).unwrap();
        p.residuals(&state(n1), TermClass::G).unwrap()
    };
    assert_eq!(sum_sq(&run(RelationKind::Parallel, a)), 0.0);
    assert_eq!(sum_sq(&run(RelationKind::Orthogonal, Vector3::x())), 0.0);
    let r = run(RelationKind::Parallel, b);
    assert_eq!(r.len(), 3);
    assert_relative_eq!(sum_sq(&r), 2.0 * (1.0 - 10f64.to_radians().cos()), max_relative = 1e-12);
    assert_relative_eq!(sum_sq(&r), 0.0304, epsilon = 1e-4);
    assert_eq!(run(RelationKind::Orthogonal, b).len(), 1);
    assert_relative_eq!(sum_sq(&run(RelationKind::Antiparallel, -a)), 0.0);
}

#[test]
fn relation_residuals_match_direct_evaluation() {
    for seed in 0..10 {
        let r = random_scene(seed);
        let p = with_constraints(&r);
        let got = sum_sq(&p.residuals(&r.state, TermClass::G).unwrap());
        let oracle: f64 = r
            .set
            .relations
            .iter()
            .map(|g| {
                let (na, nb) = (r.state.proxy_planes[g.a.0 as usize].normal, r.state.proxy_planes[g.b.0 as usize].normal);
                g.weight
                    * match g.kind {
                        RelationKind::Parallel => (na - nb).norm_squared(),
                        RelationKind::Antiparallel => (na + nb).norm_squared(),
                        RelationKind::Orthogonal => na.dot(&nb).powi(2),
                    }
            })
            .sum();
        assert_relative_eq!(got, oracle, max_relative = 1e-12);
    }
}

#[test]
fn correspondence_residuals_match_scalar_oracle() {
    for seed in 0..20 {
        let r = random_scene(seed);
        let p = with_constraints(&r);
        let got = sum_sq(&p.residuals(&r.state, TermClass::C).unwrap());
        let oracle: f64 = r
            .set
            .correspondences
            .iter()
            .map(|c| {
                let fa = &r.frames[c.a.frame as usize].features[c.a.index as usize];
                let fb = &r.frames[c.b.frame as usize].features[c.b.index as usize];
                let (ta, tb) = (&r.state.poses[c.a.frame as usize], &r.state.poses[c.b.frame as usize]);
                let d = world_point(tb, &fb.position) - world_point(ta, &fa.position);
                let n = world_dir(ta, &fa.direction);
                match c.kind {
                    CorrespondenceKind::Plane => d.dot(&n).powi(2),
                    // |d x n|^2 = |d|^2 |n|^2 - (d . n)^2 for unit n.
                    CorrespondenceKind::Edge => d.norm_squared() - d.dot(&n).powi(2),
                }
            })
            .sum();
        assert_relative_eq!(got, oracle, max_relative = 1e-9);
    }
}

#[test]
fn correspondence_residual_examples() {
    let mut frames = empty_frames(2);
    let n = Vector3::new(0.0, 0.6, 0.8);
    frames[0].features.push(planar(0, Vector3::new(0.2, 0.1, 2.0), n));
    frames[1].features.push(planar(1, Vector3::new(0.2, 0.1, 2.0), n));
    frames[1].features.push(planar(1, Vector3::new(0.2, 0.1, 2.0) + 0.1 * n, n));
    let mut set = ConstraintSet::default();
    set.correspondences.push(corr(fid(0, 0), fid(1, 0), CorrespondenceKind::Plane));
    set.correspondences.push(corr(fid(0, 0), fid(1, 1), CorrespondenceKind::Plane));
    let mut p = structural_only(2, 0);
    p.add_constraints(&frames, &set).unwrap();
    let state = ParameterState { poses: vec![RigidTransform::identity(); 2], proxy_planes: vec![] };
    let r = p.residuals(&state, TermClass::C).unwrap();
    assert_eq!(r.len(), 2);
    assert_eq!(r[0], 0.0);
    assert_relative_eq!(r[1], 0.1, epsilon = 1e-12);
}

#[test]
fn edge_residual_is_perpendicular_offset() {
    let mut frames = empty_frames(2);
    let d = Vector3::new(1.0, 0.0, 0.0);
    frames[0].features.push(edge(0, Vector3::zeros(), d));
    frames[1].features.push(edge(1, Vector3::new(0.7, 0.3, 0.4), d));
    let mut set = ConstraintSet::default();
    set.correspondences.push(corr(fid(0, 0), fid(1, 0), CorrespondenceKind::Edge));
    let mut p = structural_only(2, 0);
    p.add_constraints(&frames, &set).unwrap();
    let state = ParameterState { poses: vec![RigidTransform::identity(); 2], proxy_planes: vec![] };
    let r = p.residuals(&state, TermClass::C).unwrap();
    assert_eq!(r.len(), 3);
    // Motion along the line does not count.
    assert_relative_eq!(sum_sq(&r).sqrt(), 0.5, epsilon = 1e-12);
}

fn local_problem(reference: &[RigidTransform]) -> Problem {
    let mut p = Problem::new(reference.len(), 0, ProblemOptions::default());
    p.add_local_alignment(reference).unwrap();
    p
}

fn random_trajectory(n: usize, seed: u64) -> Vec<RigidTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| if i == 0 { RigidTransform::identity() } else { random_pose(&mut rng) }).collect()
}

#[test]
fn local_alignment_counts_and_locality() {
    let reference = random_trajectory(20, 1);
    let p = local_problem(&reference);
    assert_eq!(p.row_count(TermClass::L), 12 * 69);
    let state = ParameterState { poses: reference.clone(), proxy_planes: vec![] };
    assert!(p.residuals(&state, TermClass::L).unwrap().iter().all(|v| *v == 0.0));

    let mut moved = state.clone();
    moved.poses[5].translation.x += 0.1;
    let r = p.residuals(&moved, TermClass::L).unwrap();
    let mut pairs = Vec::new();
    for j in 0..20 {
        for k in 0..=4 {
            if j + (1 << k) <= 19 {
                pairs.push((j, j + (1 << k)));
            }
        }
    }
    assert_eq!(pairs.len(), 69);
    let touched = pairs.iter().filter(|(a, b)| *a == 5 || *b == 5).count();
    let nonzero = r.chunks(12).filter(|c| c.iter().any(|v| *v != 0.0)).count();
    assert_eq!(nonzero, touched);
    for (c, (a, b)) in r.chunks(12).zip(&pairs) {
        assert_eq!(c.iter().any(|v| *v != 0.0), *a == 5 || *b == 5);
    }
}

#[test]
fn local_alignment_rows_follow_formula() {
    for n in [1usize, 2, 3, 7, 16, 17, 33, 100] {
        let p = local_problem(&vec![RigidTransform::identity(); n]);
        let expect: usize = (0..=4).filter(|k| (1usize << k) < n).map(|k| 12 * (n - (1 << k))).sum();
        assert_eq!(p.row_count(TermClass::L), expect, "n = {n}");
    }
}

#[test]
fn local_alignment_matches_transform_misalignment() {
    let reference = random_trajectory(12, 2);
    let state = ParameterState { poses: random_trajectory(12, 3), proxy_planes: vec![] };
    let got = sum_sq(&local_problem(&reference).residuals(&state, TermClass::L).unwrap());
    let mut oracle = 0.0;
    for j in 0..12 {
        for k in 0..=4 {
            let b = j + (1 << k);
            if b < 12 {
                oracle += transform_misalignment(
                    &relative(&reference[j], &reference[b]),
                    &relative(&state.poses[j], &state.poses[b]),
                    0.25,
                );
            }
        }
    }
    assert_relative_eq!(got, oracle, max_relative = 1e-10);
}

#[test]
fn inertia_residuals() {
    let r = random_scene(4);
    let mut p = structural_only(r.state.poses.len(), r.state.proxy_planes.len());
    p.add_inertia(&r.state).unwrap();
    assert!(p.residuals(&r.state, TermClass::I).unwrap().iter().all(|v| *v == 0.0));

    let mut yawed = r.state.clone();
    yawed.poses[3].rotation.yaw += 0.1;
    let res = p.residuals(&yawed, TermClass::I).unwrap();
    let nonzero: Vec<f64> = res.iter().copied().filter(|v| *v != 0.0).collect();
    assert_eq!(nonzero.len(), 1);
    assert_relative_eq!(nonzero[0], 0.1, epsilon = 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut moved = r.state.clone();
    for pose in moved.poses.iter_mut() {
        *pose = RigidTransform::from_params(&std::array::from_fn(|k| pose.to_params()[k] + rng.random_range(-4.0..4.0)));
    }
    for q in moved.proxy_planes.iter_mut() {
        q.normal += v3(&mut rng, 0.3);
        q.point += v3(&mut rng, 0.3);
    }
    let mut oracle = 0.0;
    for (a, b) in moved.poses.iter().zip(&r.state.poses) {
        let (pa, pb) = (a.to_params(), b.to_params());
        for k in 0..3 {
            oracle += wrap_angle(pa[k] - pb[k]).powi(2);
            oracle += (pa[k + 3] - pb[k + 3]).powi(2);
        }
    }
    for (a, b) in moved.proxy_planes.iter().zip(&r.state.proxy_planes) {
        oracle += (a.normal - b.normal).norm_squared() + (a.point - b.point).norm_squared();
    }
    assert_relative_eq!(sum_sq(&p.residuals(&moved, TermClass::I).unwrap()), oracle, max_relative = 1e-12);

    let short = ParameterState { poses: r.state.poses[..2].to_vec(), proxy_planes: vec![] };
    assert!(p.residuals(&short, TermClass::I).is_err());
}

fn full_problem(r: &Random) -> Problem {
    let reference = random_trajectory(r.state.poses.len(), 77);
    let previous = {
        let mut s = r.state.clone();
        s.poses[2].translation.y += 0.3;
        s.proxy_planes[1].point.x -= 0.2;
        s
    };
    Problem::build(&r.frames, &r.set, &reference, &previous, ProblemOptions::default()).unwrap()
}

#[test]
fn energy_recomposes_from_terms() {
    let w = EnergyWeights { w_s: 0.7, w_p: 1.3, w_h: 0.9, w_g: 0.4, w_c: 1.7, w_l: 2.5, w_i: 0.05 };
    for seed in 0..10 {
        let r = random_scene(seed);
        let p = full_problem(&r);
        let e = energy(&p, &r.state, &w).unwrap();
        let mut sum = 0.0;
        for class in TermClass::ALL {
            let term = sum_sq(&p.residuals(&r.state, class).unwrap());
            assert_relative_eq!(e.get(class), term, max_relative = 1e-12);
            sum += w.factor(class) * term;
        }
        let by_hand = w.w_s * (w.w_p * e.e_p + w.w_h * e.e_h + w.w_g * e.e_g) + w.w_c * e.e_c + w.w_l * e.e_l + w.w_i * e.e_i;
        assert_relative_eq!(e.total, sum, max_relative = 1e-12);
        assert_relative_eq!(e.total, by_hand, max_relative = 1e-12);

        let doubled = energy(&p, &r.state, &EnergyWeights { w_c: 2.0 * w.w_c, ..w }).unwrap();
        assert_relative_eq!(doubled.total - e.total, w.w_c * e.e_c, max_relative = 1e-9);
        assert_eq!(doubled.e_h, e.e_h);
    }
}

#[test]
fn energy_is_invariant_under_global_rigid_motion() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..10 {
        let r = random_scene(seed);
        let p = full_problem(&r);
        let g = random_pose(&mut rng);
        let moved = ParameterState {
            poses: r.state.poses.iter().map(|t| fine2coarse::geom::compose(&g, t)).collect(),
            proxy_planes: r.state.proxy_planes.iter().map(|q| g.transform_plane(q)).collect(),
        };
        let w = EnergyWeights::default();
        let (a, b) = (energy(&p, &r.state, &w).unwrap(), energy(&p, &moved, &w).unwrap());
        for class in [TermClass::H, TermClass::G, TermClass::P, TermClass::C, TermClass::L] {
            let (x, y) = (a.get(class), b.get(class));
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{class:?}: {x} vs {y}");
        }
    }
}

#[test]
fn zero_energy_start_is_returned_unchanged() {
    let reference = random_trajectory(5, 4);
    let state = ParameterState { poses: reference.clone(), proxy_planes: vec![] };
    let mut p = local_problem(&reference);
    p.add_inertia(&state).unwrap();
    let (out, rep) = solve(&p, &state, &EnergyWeights::default(), &SolveOptions::default()).unwrap();
    assert_eq!(out, state);
    assert_eq!(rep.iterations, 1);
    assert_eq!(rep.final_energy.total, 0.0);
}

fn one_plane_gap(w_i: f64) -> f64 {
    let mut frames = empty_frames(2);
    let n = Vector3::new(0.0, 0.0, -1.0);
    frames[0].features.push(planar(0, Vector3::new(0.0, 0.0, 2.0), n));
    frames[1].features.push(planar(1, Vector3::new(0.0, 0.0, 1.9), n));
    let mut set = ConstraintSet::default();
    set.correspondences.push(corr(fid(0, 0), fid(1, 0), CorrespondenceKind::Plane));
    let state = ParameterState { poses: vec![RigidTransform::identity(); 2], proxy_planes: vec![] };
    let p = Problem::build(&frames, &set, &state.poses, &state, ProblemOptions::default()).unwrap();
    assert_relative_eq!(p.residuals(&state, TermClass::C).unwrap()[0], 0.1, epsilon = 1e-12);
    let w = EnergyWeights { w_l: 0.0, w_i, ..Default::default() };
    let (out, rep) = solve(&p, &state, &w, &SolveOptions::default()).unwrap();
    assert!(rep.final_energy.total <= rep.initial.total);
    assert_eq!(out.poses[0], RigidTransform::identity());
    out.poses[1].translation.z
}

#[test]
fn single_plane_gap_matches_quadratic_minimum() {
    for w_i in [0.01, 0.5, 3.0] {
        let moved = one_plane_gap(w_i);
        assert_relative_eq!(moved, 0.1 * 1.0 / (1.0 + w_i), max_relative = 1e-5);
    }
    assert!((one_plane_gap(1e-12) - 0.1).abs() < 1e-6);
}

/// Three orthogonal walls seen by a camera sliding sideways, in the world frame
/// of camera 0 (y down, z forward).
struct Walls {
    truth: Vec<RigidTransform>,
    frames: Vec<FrameFeatures>,
    set: ConstraintSet,
}

fn three_walls(n: usize) -> Walls {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let walls = [
        Plane::new(Vector3::new(0.0, -1.0, 0.0), Vector3::new(0.0, 1.5, 0.0)),
        Plane::new(Vector3::new(0.0, 0.0, -1.0), Vector3::new(0.0, 0.0, 4.0)),
        Plane::new(Vector3::new(1.0, 0.0, 0.0), Vector3::new(-2.0, 0.0, 0.0)),
    ];
    let truth: Vec<RigidTransform> = (0..n)
        .map(|i| {
            let s = i as f64 / n as f64;
            RigidTransform::new(EulerAngles::new(0.3 * s, 0.05 * s, 0.0), Vector3::new(1.0 * s, 0.0, 0.3 * s))
        })
        .collect();
    let per_wall = 30;
    let mut frames = empty_frames(n);
    for (f, pose) in truth.iter().enumerate() {
        let inv = pose.inverse();
        for wall in &walls {
            let (u, v) = {
                let a = if wall.normal.x.abs() > 0.5 { Vector3::y() } else { Vector3::x() };
                let u = wall.normal.cross(&a).normalize();
                (u, wall.normal.cross(&u))
            };
            for _ in 0..per_wall {
                let p = wall.point + u * rng.random_range(-1.5..1.5) + v * rng.random_range(-1.5..1.5);
                frames[f].features.push(planar(f, inv.transform_point(&p), inv.transform_vector(&wall.normal)));
            }
        }
    }
    let mut set = ConstraintSet::default();
    for a in 0..n {
        for b in a + 1..n {
            for i in 0..(3 * per_wall) as u32 {
                // Same wall, different point.
                let j = (i / per_wall as u32) * per_wall as u32 + (i + 7) % per_wall as u32;
                set.correspondences.push(corr(fid(a as u32, i), fid(b as u32, j), CorrespondenceKind::Plane));
            }
        }
    }
    Walls { truth, frames, set }
}

#[test]
fn yaw_drift_is_removed_on_three_wall_room() {
    let n = 20;
    let w = three_walls(n);
    // Drifted start: yaw error accumulates to 5 degrees over the sequence.
    let drifted: Vec<RigidTransform> = w
        .truth
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let d = RigidTransform::rot_y((5.0 * i as f64 / (n - 1) as f64).to_radians());
            fine2coarse::geom::compose(&d, t)
        })
        .collect();
    let state = ParameterState { poses: drifted.clone(), proxy_planes: vec![] };
    let p = Problem::build(&w.frames, &w.set, &drifted, &state, ProblemOptions::default()).unwrap();
    let opts = SolveOptions { max_inner_iterations: 20, ..Default::default() };
    let (out, rep) = solve(&p, &state, &EnergyWeights::default(), &opts).unwrap();
    assert!(rep.final_energy.total * 100.0 <= rep.initial.total, "{:?}", rep);
    for (est, gt) in out.poses.iter().zip(&w.truth) {
        let rel = relative(est, gt);
        let ang = ((rel.rotation_matrix().trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(ang < 0.5, "rotation error {ang}");
        assert!(rel.translation.norm() < 0.01, "translation error {}", rel.translation.norm());
    }
    // Gauge and monotonicity.
    assert_eq!(out.poses[0], state.poses[0]);
    let mut last = rep.initial.total;
    for row in rep.log.iter().filter(|r| r.accepted) {
        assert!(row.energy.total <= last);
        last = row.energy.total;
    }
}

#[test]
fn solve_keeps_gauge_and_unit_normals() {
    let r = random_scene(8);
    let p = full_problem(&r);
    let (out, rep) = solve(&p, &r.state, &EnergyWeights::default(), &SolveOptions::default()).unwrap();
    assert_eq!(out.poses[0].to_params().map(f64::to_bits), r.state.poses[0].to_params().map(f64::to_bits));
    assert!(out.proxy_planes.iter().all(|q| (q.normal.norm() - 1.0).abs() < 1e-12));
    assert!(rep.final_energy.total <= rep.initial.total);
}

#[test]
fn non_finite_input_names_the_constraint() {
    let r = random_scene(2);
    let p = full_problem(&r);
    let mut bad = r.state.clone();
    bad.poses[3].translation.x = f64::NAN;
    let err = solve(&p, &bad, &EnergyWeights::default(), &SolveOptions::default()).unwrap_err().to_string();
    assert!(err.contains("non-finite"), "{err}");
    assert!(err.contains("coplanarity constraint") || err.contains("plane sample") || err.contains("correspondence"), "{err}");
}

#[test]
fn weights_are_validated() {
    assert!(EnergyWeights::default().validate().is_ok());
    assert!(EnergyWeights { w_i: 0.0, ..Default::default() }.validate().is_err());
    assert!(EnergyWeights { w_c: -1.0, ..Default::default() }.validate().is_err());
}

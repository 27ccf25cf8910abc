//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any criterion fails. Criterion 13 needs `F2C_SUN3D_DIR` and is skipped
//! without it.
//!
//! The end-to-end criteria (6 to 8) register ten synthetic two-room scenes under
//! all four ablation variants, so a release-profile run takes tens of minutes.

use std::path::Path;
use std::time::Instant;

use fine2coarse::bench::{
    lower_bound, offset_histogram, read_benchmark, resolve_benchmark, rmse, GroundTruthCorrespondence, Variant,
};
use fine2coarse::constraints::{
    relation_weight, CoplanarityConstraint, ConstraintSet, CorrespondenceConstraint, CorrespondenceKind, FeatureId,
    LeafId, PlaneSample, Proxy, ProxyId, RelationConstraint, RelationKind, ThresholdSchedule,
};
use fine2coarse::features::{Feature, FeatureKind, FrameFeatures, PlanarPatch};
use fine2coarse::geom::{Plane, PlaneMoments, RigidTransform};
use fine2coarse::ingest::synth::{
    corridor_scene, perturb_trajectory, plant_benchmark, single_room_scene, synth_scene, SyntheticScene,
};
use fine2coarse::ingest::{load_sequence, DepthMode, Intrinsics};
use fine2coarse::pairwise::{odometry_matches, MatchStore};
use fine2coarse::pipeline::{
    register, save_trajectory, IterationSummary, PipelineConfig, TrajectoryFormat,
};
use fine2coarse::solver::{
    BlockLinearization, Param, ParameterState, PointPair, Problem, ProblemOptions, SolveReport, TermClass,
};
use fine2coarse::ingest::synth::two_room_scene;
use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: std::ops::RangeInclusive<u64> = 1..=10;
const ODOMETRY_MATCHES: usize = 200;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Pipeline settings used for every synthetic end-to-end criterion.
fn suite_config(seed: u64) -> PipelineConfig {
    let mut c = PipelineConfig { seed, ..Default::default() };
    c.weights.w_s = 4.0;
    c
}

// ---------------------------------------------------------------------------
// 1. Jacobians against central differences

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
        rng.random_range(-1.2..1.2),
        rng.random_range(-3.0..3.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
    ])
}

fn random_plane(rng: &mut ChaCha8Rng) -> Plane {
    Plane { normal: unit(rng), point: v3(rng, 2.0) }
}

/// A problem with blocks of every class over random poses and proxies.
fn random_problem(seed: u64) -> (Problem, ParameterState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = (5, 3);
    let poses: Vec<RigidTransform> = (0..n).map(|_| random_pose(&mut rng)).collect();
    let proxies: Vec<Plane> = (0..m).map(|_| random_plane(&mut rng)).collect();
    let mut frames: Vec<FrameFeatures> =
        (0..n).map(|frame| FrameFeatures { frame, patches: vec![], features: vec![], keypoints: vec![] }).collect();
    for (f, ff) in frames.iter_mut().enumerate() {
        for _ in 0..2 {
            ff.patches.push(PlanarPatch { plane: random_plane(&mut rng), inlier_count: 100, frame: f, moments: PlaneMoments::empty() });
            let (p, d) = (v3(&mut rng, 2.0), unit(&mut rng));
            ff.features.push(Feature { kind: FeatureKind::Planar, position: p, direction: d, frame: f, pixel: (0.0, 0.0), patch: None });
            let (p, d) = (v3(&mut rng, 2.0), unit(&mut rng));
            ff.features.push(Feature { kind: FeatureKind::CreaseEdge, position: p, direction: d, frame: f, pixel: (0.0, 0.0), patch: None });
        }
    }
    let mut set = ConstraintSet::default();
    for (i, p) in proxies.iter().enumerate() {
        set.proxies.push(Proxy { id: ProxyId(i as u32), plane: *p, children: vec![], inlier_count: 100, window: 0 });
    }
    for f in 0..n as u32 {
        let parent = ProxyId(rng.random_range(0..m as u32));
        set.coplanarity.push(CoplanarityConstraint { parent, child: LeafId { frame: f, patch: rng.random_range(0..2) }, flip: rng.random_bool(0.5) });
        let feature = FeatureId { frame: f, index: 2 * rng.random_range(0..2) };
        set.plane_samples.push(PlaneSample { proxy: parent, feature, flip: rng.random_bool(0.5) });
    }
    for kind in [RelationKind::Parallel, RelationKind::Orthogonal, RelationKind::Antiparallel] {
        let a = rng.random_range(0..m as u32);
        let b = (a + 1 + rng.random_range(0..m as u32 - 1)) % m as u32;
        set.relations.push(RelationConstraint { kind, a: ProxyId(a), b: ProxyId(b), weight: rng.random_range(0.1..1.0) });
    }
    let mut pairs = Vec::new();
    for _ in 0..4 {
        let a = rng.random_range(0..n as u32);
        let b = (a + 1 + rng.random_range(0..n as u32 - 1)) % n as u32;
        for (kind, off) in [(CorrespondenceKind::Plane, 0), (CorrespondenceKind::Edge, 1)] {
            set.correspondences.push(CorrespondenceConstraint {
                a: FeatureId { frame: a, index: 2 * rng.random_range(0..2) + off },
                b: FeatureId { frame: b, index: 2 * rng.random_range(0..2) + off },
                kind,
                window: 0,
                max_distance: 0.5,
                max_angle: 1.0,
            });
        }
        pairs.push(PointPair { frame_a: a as usize, xyz_a: v3(&mut rng, 2.0), frame_b: b as usize, xyz_b: v3(&mut rng, 2.0) });
    }
    let reference: Vec<RigidTransform> = (0..n).map(|_| random_pose(&mut rng)).collect();
    let previous = ParameterState {
        poses: (0..n).map(|_| random_pose(&mut rng)).collect(),
        proxy_planes: (0..m).map(|_| random_plane(&mut rng)).collect(),
    };
    let mut problem = Problem::new(n, m, ProblemOptions::default());
    problem.add_constraints(&frames, &set).unwrap();
    problem.add_point_pairs(&pairs).unwrap();
    problem.add_local_alignment(&reference).unwrap();
    problem.add_inertia(&previous).unwrap();
    (problem, ParameterState { poses, proxy_planes: proxies })
}

fn nudged(state: &ParameterState, p: Param, k: usize, h: f64) -> ParameterState {
    let mut s = state.clone();
    match p {
        Param::Pose(i) => {
            let mut v = s.poses[i].to_params();
            v[k] += h;
            s.poses[i] = RigidTransform::from_params(&v);
        }
        Param::Proxy(i) => {
            let q = &mut s.proxy_planes[i];
            if k < 3 {
                q.normal[k] += h;
            } else {
                q.point[k - 3] += h;
            }
        }
    }
    s
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let h = 1e-6;
    let classes = [TermClass::P, TermClass::H, TermClass::G, TermClass::C, TermClass::L, TermClass::I];
    let mut worst = [0.0f64; 6];
    let mut seen = [0usize; 6];
    for seed in 0..100 {
        let (problem, state) = random_problem(seed);
        let blocks: Vec<BlockLinearization> = problem.linearize_blocks(&state).unwrap();
        for (bi, block) in blocks.iter().enumerate() {
            let c = classes.iter().position(|&c| c == block.class).unwrap();
            seen[c] += 1;
            for (param, analytic) in &block.jacobians {
                let mut numeric = DMatrix::zeros(analytic.nrows(), 6);
                for k in 0..6 {
                    let plus = &problem.linearize_blocks(&nudged(&state, *param, k, h)).unwrap()[bi].residual;
                    let minus = &problem.linearize_blocks(&nudged(&state, *param, k, -h)).unwrap()[bi].residual;
                    numeric.set_column(k, &((plus - minus) / (2.0 * h)));
                }
                let rel = (analytic - &numeric).norm() / numeric.norm().max(1e-3);
                worst[c] = worst[c].max(rel);
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let detail = classes
        .iter()
        .zip(&worst)
        .zip(&seen)
        .map(|((c, w), n)| format!("{c:?} {w:.1e} ({n} blocks)"))
        .collect::<Vec<_>>()
        .join(", ");
    let pass = worst.iter().all(|&w| w <= 1e-4) && seen.iter().all(|&n| n > 0) && secs < 30.0;
    outcome(pass, format!("max relative error {detail}; {secs:.1}s"))
}

// ---------------------------------------------------------------------------
// 2. Relation weights

fn criterion_2() -> Outcome {
    let sigma = PipelineConfig::default().constraints.sigma_theta_deg.to_radians();
    let kinds = [
        (RelationKind::Parallel, 0.0),
        (RelationKind::Orthogonal, std::f64::consts::FRAC_PI_2),
        (RelationKind::Antiparallel, std::f64::consts::PI),
    ];
    let canonical_ok = kinds.iter().all(|&(k, a)| relation_weight(a, k, sigma) == 1.0);
    let mut worst = 0.0f64;
    for deg in 0..=180 {
        let theta = (deg as f64).to_radians();
        for &(k, a) in &kinds {
            let d = theta - a;
            let direct = (-d * d / (2.0 * sigma * sigma)).exp();
            worst = worst.max((relation_weight(theta, k, sigma) - direct).abs());
        }
    }
    outcome(canonical_ok && worst <= 1e-12, format!("canonical angles exact: {canonical_ok}, max deviation {worst:.1e} over 181 angles"))
}

// ---------------------------------------------------------------------------
// 3. Threshold schedule endpoints

fn criterion_3() -> Outcome {
    let s = PipelineConfig::default().constraint_params().schedule;
    let start = s.at(0);
    let ends: Vec<(f64, f64)> = (s.ramp_iters..s.ramp_iters + 5).map(|a| s.at(a)).collect();
    let pass = start == (0.5, 45.0) && ends.iter().all(|&e| e == (0.15, 20.0)) && s == ThresholdSchedule::default();
    outcome(pass, format!("age 0 {start:?}, age >= {} {:?}", s.ramp_iters, ends[0]))
}

// ---------------------------------------------------------------------------
// 5. Local-alignment stride count

fn criterion_5() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for n in [5usize, 17, 100] {
        let mut p = Problem::new(n, 0, ProblemOptions::default());
        p.add_local_alignment(&vec![RigidTransform::identity(); n]).unwrap();
        let got = p.row_count(TermClass::L) / 12;
        let expected: usize = (0..=4).map(|k| 1usize << k).filter(|&s| s <= n - 1).map(|s| n - s).sum();
        pass &= got == expected;
        parts.push(format!("n={n}: {got}/{expected}"));
    }
    outcome(pass, parts.join(", "))
}

// ---------------------------------------------------------------------------
// Synthetic runs shared by criteria 4 and 6 to 10

struct Scene {
    frames: Vec<fine2coarse::ingest::DepthFrame>,
    ground_truth: Vec<RigidTransform>,
    matches: MatchStore,
    corrs: Vec<GroundTruthCorrespondence>,
}

fn prepare(scene: &SyntheticScene, seed: u64) -> Scene {
    let seq = synth_scene(scene, seed).expect("scene renders");
    let local = perturb_trajectory(&seq.ground_truth, scene.drift.as_ref().expect("drift"), seed);
    let matches = odometry_matches(&seq.frames, &local, ODOMETRY_MATCHES, seed);
    let plan = scene.benchmark.as_ref().expect("benchmark plan");
    let entries = plant_benchmark(scene, &seq.world_poses, plan, seed);
    let corrs = resolve_benchmark(&entries, &seq.frames).expect("benchmark resolves").correspondences;
    Scene { frames: seq.frames, ground_truth: seq.ground_truth, matches, corrs }
}

struct Run {
    initial: Vec<RigidTransform>,
    poses: Vec<RigidTransform>,
    iterations: Vec<IterationSummary>,
    secs: f64,
}

fn run(scene: &Scene, config: &PipelineConfig) -> Run {
    let t = Instant::now();
    let out = register(&scene.frames, config, Some(&scene.matches)).expect("registration succeeds");
    Run { initial: out.initial, poses: out.trajectory.poses, iterations: out.iterations, secs: t.elapsed().as_secs_f64() }
}

struct SeedResult {
    seed: u64,
    t0: f64,
    /// RMSE per variant in `Variant::ALL` order.
    rmse: [f64; 4],
    /// Bins of the full variant: (lo, hi, count, T0 mean, final mean).
    bins: Vec<(usize, usize, usize, f64, f64)>,
    full_secs: f64,
    lower_bound: f64,
    /// RMSE of ground truth, T0, and each variant's result.
    trajectories_rmse: Vec<f64>,
}

/// Energy checks of one solve: accepted steps never raise it, final <= initial.
fn monotone(r: &SolveReport) -> bool {
    let mut e = r.initial.total;
    for row in r.log.iter().filter(|row| row.accepted) {
        if row.energy.total > e {
            return false;
        }
        e = row.energy.total;
    }
    r.final_energy.total <= r.initial.total
}

#[derive(Default)]
struct Tally {
    solves: usize,
    monotone_violations: usize,
    cap_checks: usize,
    cap_violations: Vec<String>,
}

impl Tally {
    fn record(&mut self, label: &str, n: usize, iterations: &[IterationSummary]) {
        for it in iterations {
            self.solves += 1;
            if !monotone(&it.report) {
                self.monotone_violations += 1;
            }
            self.cap_checks += 1;
            let expected = it.raw_correspondences.min(100 * n);
            if it.correspondences != expected {
                self.cap_violations
                    .push(format!("{label} iteration {}: {} != min({}, {})", it.iteration, it.correspondences, it.raw_correspondences, 100 * n));
            }
        }
    }
}

fn suite(tally: &mut Tally) -> Vec<SeedResult> {
    let mut out = Vec::new();
    for seed in SEEDS {
        let scene = prepare(&two_room_scene(seed), seed);
        let n = scene.frames.len();
        let base = suite_config(seed);
        let mut rmses = [0.0; 4];
        let mut full: Option<Run> = None;
        let mut trajectories_rmse = vec![rmse(&scene.ground_truth, &scene.corrs).unwrap()];
        for (i, variant) in Variant::ALL.iter().enumerate() {
            let r = run(&scene, &variant.apply(&base));
            tally.record(&format!("seed {seed} {}", variant.name()), n, &r.iterations);
            rmses[i] = rmse(&r.poses, &scene.corrs).unwrap();
            trajectories_rmse.push(rmses[i]);
            if *variant == Variant::Full {
                full = Some(r);
            }
        }
        let full = full.expect("full variant ran");
        let t0 = rmse(&full.initial, &scene.corrs).unwrap();
        trajectories_rmse.push(t0);
        let before = offset_histogram(&full.initial, &scene.corrs, None).unwrap();
        let after = offset_histogram(&full.poses, &scene.corrs, None).unwrap();
        let bins = before
            .bins
            .iter()
            .zip(&after.bins)
            .map(|(a, b)| (a.lo, a.hi, a.count, a.mean_error, b.mean_error))
            .collect();
        let lb = lower_bound(&scene.corrs, n).unwrap().rmse;
        println!(
            "  seed {seed:>2}: T0 {t0:.4}  full {:.4}  no_structure {:.4}  no_fine_to_coarse {:.4}  neither {:.4}  lower bound {lb:.4}  ({:.0}s)",
            rmses[0], rmses[1], rmses[2], rmses[3], full.secs
        );
        out.push(SeedResult { seed, t0, rmse: rmses, bins, full_secs: full.secs, lower_bound: lb, trajectories_rmse });
    }
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_4(tally: &Tally) -> Outcome {
    let pass = tally.cap_violations.is_empty() && tally.cap_checks > 0;
    let mut detail = format!("{} iterations checked, {} violations", tally.cap_checks, tally.cap_violations.len());
    if let Some(first) = tally.cap_violations.first() {
        detail.push_str(&format!(" (first: {first})"));
    }
    outcome(pass, detail)
}

fn criterion_6(results: &[SeedResult]) -> Outcome {
    let drift_ok = results.iter().all(|r| r.t0 >= 0.4);
    let below = results.iter().filter(|r| r.rmse[0] < 0.05).count();
    let slowest = results.iter().map(|r| r.full_secs).fold(0.0, f64::max);
    let pass = drift_ok && below >= 8 && slowest < 300.0;
    let min_t0 = results.iter().map(|r| r.t0).fold(f64::INFINITY, f64::min);
    outcome(pass, format!("{below}/10 seeds below 0.05 m, min T0 {min_t0:.3} m, slowest run {slowest:.0}s"))
}

fn criterion_7(results: &[SeedResult]) -> Outcome {
    let mut occupied = 0;
    let mut worse = Vec::new();
    for r in results {
        for &(lo, hi, count, before, after) in &r.bins {
            if count == 0 {
                continue;
            }
            occupied += 1;
            if after >= before {
                worse.push(format!("seed {} [{lo},{hi}) {before:.3}->{after:.3}", r.seed));
            }
        }
    }
    let mut detail = format!("{} of {occupied} occupied bins improved", occupied - worse.len());
    if !worse.is_empty() {
        detail.push_str(&format!("; not improved: {}", worse.join(", ")));
    }
    outcome(worse.is_empty() && occupied > 0, detail)
}

fn criterion_8(results: &[SeedResult]) -> Outcome {
    let medians: Vec<f64> = (0..4).map(|i| median(results.iter().map(|r| r.rmse[i]).collect())).collect();
    let full_best = medians[1..].iter().all(|&m| medians[0] <= m);
    let neither_worst = results.iter().filter(|r| r.rmse[..3].iter().all(|&x| r.rmse[3] > x)).count();
    let pass = full_best && neither_worst >= 7;
    outcome(
        pass,
        format!(
            "medians full {:.4}, no_structure {:.4}, no_fine_to_coarse {:.4}, neither {:.4}; neither worst on {neither_worst}/10",
            medians[0], medians[1], medians[2], medians[3]
        ),
    )
}

fn criterion_9(tally: &Tally) -> Outcome {
    outcome(
        tally.monotone_violations == 0 && tally.solves > 0,
        format!("{} solves, {} with an energy increase", tally.solves, tally.monotone_violations),
    )
}

// ---------------------------------------------------------------------------
// 10. Lower bound

fn consistent_correspondences(seed: u64, n: usize, count: usize) -> Vec<GroundTruthCorrespondence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poses: Vec<RigidTransform> = (0..n).map(|_| random_pose(&mut rng)).collect();
    (0..count)
        .map(|i| {
            let a = i % (n - 1);
            let b = if i % 3 == 0 { rng.random_range(0..n) } else { a + 1 };
            let b = if b == a { (a + 1) % n } else { b };
            let x = v3(&mut rng, 3.0);
            GroundTruthCorrespondence {
                frame_a: a,
                pixel_a: (0.0, 0.0),
                pixel_b: (0.0, 0.0),
                xyz_a: poses[a].inverse().transform_point(&x),
                frame_b: b,
                xyz_b: poses[b].inverse().transform_point(&x),
            }
        })
        .collect()
}

fn criterion_10(results: &[SeedResult]) -> Outcome {
    let mut worst_zero = 0.0f64;
    for seed in 0..10 {
        let corrs = consistent_correspondences(seed, 8, 60);
        worst_zero = worst_zero.max(lower_bound(&corrs, 8).unwrap().rmse);
    }
    let mut violations = 0;
    let mut compared = 0;
    for r in results {
        for &x in &r.trajectories_rmse {
            compared += 1;
            if r.lower_bound > x {
                violations += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seed in 0..10 {
        let corrs = consistent_correspondences(100 + seed, 8, 60);
        let noisy: Vec<GroundTruthCorrespondence> = corrs
            .iter()
            .map(|c| GroundTruthCorrespondence { xyz_b: c.xyz_b + v3(&mut rng, 0.05), ..*c })
            .collect();
        let lb = lower_bound(&noisy, 8).unwrap().rmse;
        for _ in 0..10 {
            let poses: Vec<RigidTransform> = (0..8).map(|_| random_pose(&mut rng)).collect();
            compared += 1;
            if lb > rmse(&poses, &noisy).unwrap() {
                violations += 1;
            }
        }
    }
    outcome(
        worst_zero <= 1e-6 && violations == 0,
        format!("max on consistent data {worst_zero:.1e} m; {violations} of {compared} trajectories scored below the bound"),
    )
}

// ---------------------------------------------------------------------------
// 11. Determinism across thread counts

fn criterion_11(tally: &mut Tally) -> Outcome {
    let seed = 3;
    let scene = prepare(&single_room_scene(120, seed), seed);
    let config = suite_config(seed);
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for (i, threads) in [1usize, 3, 3].into_iter().enumerate() {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let out = pool.install(|| register(&scene.frames, &config, Some(&scene.matches))).unwrap();
        tally.record(&format!("determinism run {i}"), scene.frames.len(), &out.iterations);
        let path = dir.path().join(format!("run{i}.txt"));
        save_trajectory(&out.trajectory, &path, TrajectoryFormat::Native).unwrap();
        files.push(std::fs::read(&path).unwrap());
    }
    let same = files.windows(2).all(|w| w[0] == w[1]);
    outcome(same, format!("3 runs (1, 3, 3 threads), {} bytes each, identical: {same}", files[0].len()))
}

// ---------------------------------------------------------------------------
// 12. Corridor scalability

fn criterion_12(tally: &mut Tally) -> Outcome {
    let seed = 1;
    let t = Instant::now();
    let scene = prepare(&corridor_scene(2000, seed), seed);
    let synth = t.elapsed().as_secs_f64();
    let r = run(&scene, &suite_config(seed));
    tally.record("corridor", scene.frames.len(), &r.iterations);
    let t0 = rmse(&r.initial, &scene.corrs).unwrap();
    let e = rmse(&r.poses, &scene.corrs).unwrap();
    outcome(
        r.secs < 900.0,
        format!("2000 frames registered in {:.0}s (scene synthesis {synth:.0}s), RMSE {t0:.3} -> {e:.3} m", r.secs),
    )
}

// ---------------------------------------------------------------------------
// 13. Released benchmark lower bounds

fn criterion_13() -> Option<Outcome> {
    let root = std::env::var_os("F2C_SUN3D_DIR")?;
    let mut bounds = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(&root).ok()?.filter_map(|e| e.ok()).map(|e| e.path()).collect();
    entries.sort();
    for dir in entries.iter().filter(|p| p.join("manifest.txt").exists()) {
        let scene = |name: &str| dir.join(name);
        let bench = ["benchmark.json", "benchmark.txt"].iter().map(|f| scene(f)).find(|p| p.exists());
        let (Some(bench), Ok(intr)) = (bench, Intrinsics::load(&scene("intrinsics.txt"))) else { continue };
        let frames = match load_sequence(&scene("manifest.txt"), &intr, DepthMode::Sun3dShift) {
            Ok(f) => f,
            Err(e) => return Some(outcome(false, format!("{}: {e}", dir.display()))),
        };
        let columns = bench.extension().and_then(|e| e.to_str()) == Some("txt");
        let loaded = read_benchmark(Path::new(&bench), columns)
            .map_err(|e| e.to_string())
            .and_then(|e| resolve_benchmark(&e, &frames).map_err(|e| e.to_string()))
            .and_then(|b| lower_bound(&b.correspondences, frames.len()).map_err(|e| e.to_string()));
        match loaded {
            Ok(lb) => bounds.push(lb.rmse),
            Err(e) => return Some(outcome(false, format!("{}: {e}", dir.display()))),
        }
    }
    if bounds.is_empty() {
        return Some(outcome(false, "no scenes with manifest.txt, intrinsics.txt and a benchmark file".into()));
    }
    let mean = bounds.iter().sum::<f64>() / bounds.len() as f64;
    Some(outcome((mean - 0.031).abs() <= 0.01, format!("mean lower bound {mean:.4} m over {} scenes", bounds.len())))
}

fn main() {
    // Numeric arguments select criteria, as in `cargo test --test acceptance -- 1 5`;
    // harness flags are ignored.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let selected: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let want = |id: u32| selected.is_empty() || selected.contains(&id);
    let mut outcomes: Vec<(u32, Option<Outcome>)> = Vec::new();
    let cheap: [(u32, fn() -> Outcome); 4] = [(1, criterion_1), (2, criterion_2), (3, criterion_3), (5, criterion_5)];
    for (id, f) in cheap {
        if want(id) {
            outcomes.push((id, Some(f())));
        }
    }
    let mut tally = Tally::default();
    if [4, 6, 7, 8, 9, 10].into_iter().any(want) {
        println!("running the ten-seed two-room suite under all four variants");
        let results = suite(&mut tally);
        outcomes.push((6, Some(criterion_6(&results))));
        outcomes.push((7, Some(criterion_7(&results))));
        outcomes.push((8, Some(criterion_8(&results))));
        outcomes.push((10, Some(criterion_10(&results))));
    }
    // 4 and 9 check every solve run by the suite and by 11 and 12.
    if [4, 9, 11].into_iter().any(want) {
        outcomes.push((11, Some(criterion_11(&mut tally))));
    }
    if [4, 9, 12].into_iter().any(want) {
        outcomes.push((12, Some(criterion_12(&mut tally))));
    }
    if want(4) {
        outcomes.push((4, Some(criterion_4(&tally))));
    }
    if want(9) {
        outcomes.push((9, Some(criterion_9(&tally))));
    }
    if want(13) {
        outcomes.push((13, criterion_13()));
    }
    outcomes.retain(|(id, _)| want(*id));
    outcomes.sort_by_key(|(id, _)| *id);
    let mut failed = 0;
    for (id, o) in outcomes {
        match o {
            Some(o) => {
                println!("{} {id:>2}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
                failed += usize::from(!o.pass);
            }
            None => println!("SKIP {id:>2}: F2C_SUN3D_DIR not set"),
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

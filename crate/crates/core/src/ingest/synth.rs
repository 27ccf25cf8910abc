//! Synthetic multi-room scenes: ray-cast depth frames with a controllable noise
//! model, odometry with injected drift, and planted benchmark correspondences.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DepthFrame, IngestError, Intrinsics, MAX_VALID_DEPTH};
use crate::bench::BenchmarkEntry;
use crate::geom::{compose, relative, EulerAngles, RigidTransform};

/// Axis-aligned box room (in its own frame) rotated by `yaw_deg` about the
/// vertical axis through its plan centre. `min[2]` is the floor, `max[2]` the ceiling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Room {
    pub min: [f64; 3],
    pub max: [f64; 3],
    #[serde(default)]
    pub yaw_deg: f64,
}

/// Opening cut into every wall passing within 5 cm of `center` (plan coordinates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Doorway {
    pub center: [f64; 2],
    pub width: f64,
    pub height: f64,
}

/// Camera keyframe. The camera moves linearly towards the next keyframe over
/// `frames` frames; the last keyframe emits `frames` stationary frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keyframe {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub frames: usize,
}

/// Depth noise `sigma(z) = a + b z^2`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthNoise {
    pub a: f64,
    pub b: f64,
}

impl DepthNoise {
    pub fn sigma(&self, z: f64) -> f64 {
        self.a + self.b * z * z
    }
}

/// Per-step odometry noise. Angles in degrees, translations in meters; the bias
/// terms are added to every step so concatenation drifts systematically.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSpec {
    #[serde(default)]
    pub rotation_std_deg: f64,
    #[serde(default)]
    pub translation_std: f64,
    #[serde(default)]
    pub yaw_bias_deg: f64,
    #[serde(default)]
    pub translation_bias: [f64; 3],
}

/// How many ground-truth correspondences to plant and at which frame offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkPlan {
    pub offsets: Vec<usize>,
    pub pairs_per_offset: usize,
    #[serde(default)]
    pub loop_pairs: usize,
    #[serde(default = "default_min_loop_offset")]
    pub min_loop_offset: usize,
    pub points_per_pair: usize,
    #[serde(default)]
    pub annotation_noise_px: f64,
}

fn default_min_loop_offset() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScene {
    pub intrinsics: Intrinsics,
    pub rooms: Vec<Room>,
    #[serde(default)]
    pub doorways: Vec<Doorway>,
    pub trajectory: Vec<Keyframe>,
    #[serde(default)]
    pub noise: DepthNoise,
    #[serde(default)]
    pub seed: u64,
    /// Render a checkerboard gray channel for the keypoint detector.
    #[serde(default)]
    pub texture: bool,
    #[serde(default)]
    pub drift: Option<DriftSpec>,
    #[serde(default)]
    pub benchmark: Option<BenchmarkPlan>,
}

fn invalid(pointer: impl Into<String>, reason: impl Into<String>) -> IngestError {
    IngestError::InvalidScene { pointer: pointer.into(), reason: reason.into() }
}

impl SyntheticScene {
    /// Parses and validates a scene description; errors carry the JSON pointer of
    /// the offending field.
    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scene: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = path_to_pointer(&e.path().to_string());
            invalid(pointer, e.inner().to_string())
        })?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        self.intrinsics.validate().map_err(|e| invalid("/intrinsics", e.to_string()))?;
        if self.rooms.is_empty() {
            return Err(invalid("/rooms", "at least one room is required"));
        }
        for (i, r) in self.rooms.iter().enumerate() {
            for k in 0..3 {
                if !(r.max[k] > r.min[k]) {
                    return Err(invalid(format!("/rooms/{i}/max"), "room must have positive extent"));
                }
            }
        }
        for (i, d) in self.doorways.iter().enumerate() {
            if !(d.width > 0.0 && d.height > 0.0) {
                return Err(invalid(format!("/doorways/{i}"), "doorway size must be positive"));
            }
        }
        if self.trajectory.is_empty() {
            return Err(invalid("/trajectory", "at least one keyframe is required"));
        }
        for (i, k) in self.trajectory.iter().enumerate() {
            let fwd = Vector3::from(k.look_at) - Vector3::from(k.position);
            if fwd.norm() < 1e-6 {
                return Err(invalid(format!("/trajectory/{i}/look_at"), "look_at equals position"));
            }
            if fwd.normalize().cross(&Vector3::z()).norm() < 1e-3 {
                return Err(invalid(format!("/trajectory/{i}/look_at"), "camera looks straight up or down"));
            }
        }
        if self.frame_count() == 0 {
            return Err(invalid("/trajectory", "trajectory emits no frames"));
        }
        if !(self.noise.a >= 0.0 && self.noise.b >= 0.0) {
            return Err(invalid("/noise", "noise coefficients must be non-negative"));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.trajectory.iter().map(|k| k.frames).sum()
    }

    /// Camera-to-world poses of every frame in the scene's plan coordinates.
    pub fn world_poses(&self) -> Vec<RigidTransform> {
        let mut out = Vec::with_capacity(self.frame_count());
        for (i, key) in self.trajectory.iter().enumerate() {
            let next = self.trajectory.get(i + 1).unwrap_or(key);
            for j in 0..key.frames {
                let s = j as f64 / key.frames as f64;
                let lerp = |a: [f64; 3], b: [f64; 3]| Vector3::from(a) * (1.0 - s) + Vector3::from(b) * s;
                out.push(look_at_pose(&lerp(key.position, next.position), &lerp(key.look_at, next.look_at)));
            }
        }
        out
    }
}

fn path_to_pointer(path: &str) -> String {
    if path == "." || path.is_empty() {
        return String::new();
    }
    let mut out = String::new();
    for seg in path.split('.') {
        let mut rest = seg;
        if let Some(b) = rest.find('[') {
            out.push('/');
            out.push_str(&rest[..b]);
            rest = &rest[b..];
            while let Some(end) = rest.find(']') {
                out.push('/');
                out.push_str(&rest[1..end]);
                rest = &rest[end + 1..];
            }
        } else {
            out.push('/');
            out.push_str(rest);
        }
    }
    out
}

/// Level camera at `position` looking at `target`, world z up.
pub fn look_at_pose(position: &Vector3<f64>, target: &Vector3<f64>) -> RigidTransform {
    let forward = (target - position).normalize();
    let right = forward.cross(&Vector3::z()).normalize();
    let down = forward.cross(&right);
    let r = Matrix3::from_columns(&[right, down, forward]);
    RigidTransform::from_parts(&r, *position)
}

#[derive(Debug, Clone)]
struct Hole {
    along: f64,
    half_width: f64,
    top: f64,
}

#[derive(Debug, Clone)]
struct RoomGeom {
    center: Vector2<f64>,
    cos: f64,
    sin: f64,
    half: [f64; 2],
    floor: f64,
    ceiling: f64,
    /// Holes per wall: +x, -x, +y, -y in the room frame.
    holes: [Vec<Hole>; 4],
}

impl RoomGeom {
    fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (x, y) = (p.x - self.center.x, p.y - self.center.y);
        Vector3::new(self.cos * x + self.sin * y, -self.sin * x + self.cos * y, p.z)
    }

    fn dir_to_local(&self, d: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(self.cos * d.x + self.sin * d.y, -self.sin * d.x + self.cos * d.y, d.z)
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= self.half[0] && l.y.abs() <= self.half[1] && l.z >= self.floor && l.z <= self.ceiling
    }
}

/// A ray hit: ray parameter, surface id (`room * 6 + face`), and world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub surface: u32,
    pub point: Vector3<f64>,
    /// In-surface coordinates, used for texturing.
    pub surface_uv: (f64, f64),
}

/// Brute-force ray caster over every room's walls, floor, and ceiling.
#[derive(Debug, Clone)]
pub struct SceneRaycaster {
    rooms: Vec<RoomGeom>,
}

const DOOR_SNAP: f64 = 0.05;

impl SceneRaycaster {
    pub fn new(scene: &SyntheticScene) -> Self {
        let rooms = scene
            .rooms
            .iter()
            .map(|r| {
                let yaw = r.yaw_deg.to_radians();
                let mut g = RoomGeom {
                    center: Vector2::new((r.min[0] + r.max[0]) / 2.0, (r.min[1] + r.max[1]) / 2.0),
                    cos: yaw.cos(),
                    sin: yaw.sin(),
                    half: [(r.max[0] - r.min[0]) / 2.0, (r.max[1] - r.min[1]) / 2.0],
                    floor: r.min[2],
                    ceiling: r.max[2],
                    holes: Default::default(),
                };
                for d in &scene.doorways {
                    let l = g.to_local(&Vector3::new(d.center[0], d.center[1], 0.0));
                    let hole = |along: f64| Hole { along, half_width: d.width / 2.0, top: g.floor + d.height };
                    if l.y.abs() <= g.half[1] {
                        if (l.x - g.half[0]).abs() < DOOR_SNAP {
                            g.holes[0].push(hole(l.y));
                        }
                        if (l.x + g.half[0]).abs() < DOOR_SNAP {
                            g.holes[1].push(hole(l.y));
                        }
                    }
                    if l.x.abs() <= g.half[0] {
                        if (l.y - g.half[1]).abs() < DOOR_SNAP {
                            g.holes[2].push(hole(l.x));
                        }
                        if (l.y + g.half[1]).abs() < DOOR_SNAP {
                            g.holes[3].push(hole(l.x));
                        }
                    }
                }
                g
            })
            .collect();
        Self { rooms }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.rooms.iter().any(|r| r.contains(p))
    }

    /// Nearest surface hit along `origin + t * dir` with `t > 0`.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        const EPS: f64 = 1e-9;
        let mut best: Option<Hit> = None;
        for (ri, room) in self.rooms.iter().enumerate() {
            let o = room.to_local(origin);
            let d = room.dir_to_local(dir);
            let mut consider = |t: f64, face: usize, uv: (f64, f64)| {
                if t > EPS && best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        surface: (ri * 6 + face) as u32,
                        point: origin + dir * t,
                        surface_uv: uv,
                    });
                }
            };
            // Walls.
            for (face, axis, sign) in [(0, 0, 1.0), (1, 0, -1.0), (2, 1, 1.0), (3, 1, -1.0)] {
                if d[axis].abs() < 1e-15 {
                    continue;
                }
                let t = (sign * room.half[axis] - o[axis]) / d[axis];
                let p = o + d * t;
                let other = 1 - axis;
                if p[other].abs() > room.half[other] || p.z < room.floor || p.z > room.ceiling {
                    continue;
                }
                let in_hole = room.holes[face]
                    .iter()
                    .any(|h| (p[other] - h.along).abs() < h.half_width && p.z < h.top);
                if !in_hole {
                    consider(t, face, (p[other], p.z));
                }
            }
            if d.z.abs() > 1e-15 {
                for (face, z) in [(4, room.floor), (5, room.ceiling)] {
                    let t = (z - o.z) / d.z;
                    let p = o + d * t;
                    if p.x.abs() <= room.half[0] && p.y.abs() <= room.half[1] {
                        consider(t, face, (p.x, p.y));
                    }
                }
            }
        }
        best
    }
}

/// Frames plus ground truth for a rendered synthetic scene.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub frames: Vec<DepthFrame>,
    /// Camera-to-world poses in the scene's plan coordinates.
    pub world_poses: Vec<RigidTransform>,
    /// The same poses re-expressed relative to frame 0, the registration gauge.
    pub ground_truth: Vec<RigidTransform>,
}

fn checker(uv: (f64, f64)) -> f32 {
    const SQUARE: f64 = 0.25;
    let parity = ((uv.0 / SQUARE).floor() as i64 + (uv.1 / SQUARE).floor() as i64).rem_euclid(2);
    if parity == 0 {
        0.2
    } else {
        0.8
    }
}

fn render_frame(
    scene: &SyntheticScene,
    caster: &SceneRaycaster,
    pose: &RigidTransform,
    index: usize,
    seed: u64,
) -> DepthFrame {
    let k = scene.intrinsics;
    let r = pose.rotation_matrix();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut depth = vec![0.0f32; k.pixel_count()];
    let mut gray = scene.texture.then(|| vec![0.0f32; k.pixel_count()]);
    for v in 0..k.height {
        for u in 0..k.width {
            let dir = r * k.ray(u as f64, v as f64);
            let Some(hit) = caster.cast(&pose.translation, &dir) else { continue };
            let sigma = scene.noise.sigma(hit.t);
            let mut z = hit.t;
            if sigma > 0.0 {
                let n: f64 = rng.sample(rand_distr::StandardNormal);
                z += sigma * n;
            }
            if z > 0.0 && z <= MAX_VALID_DEPTH {
                depth[v * k.width + u] = z as f32;
            }
            if let Some(g) = gray.as_mut() {
                g[v * k.width + u] = checker(hit.surface_uv);
            }
        }
    }
    DepthFrame { index, intrinsics: k, depth, gray }
}

/// Renders every frame of `scene`. Deterministic for a given `seed`.
pub fn synth_scene(scene: &SyntheticScene, seed: u64) -> Result<SyntheticSequence, IngestError> {
    scene.validate()?;
    let caster = SceneRaycaster::new(scene);
    let world_poses = scene.world_poses();
    if let Some(frame) = world_poses.iter().position(|p| !caster.contains(&p.translation)) {
        return Err(IngestError::PoseOutsideRooms { frame });
    }
    let frames = world_poses
        .par_iter()
        .enumerate()
        .map(|(i, p)| render_frame(scene, &caster, p, i, seed))
        .collect();
    let origin = world_poses[0];
    let ground_truth = world_poses.iter().map(|p| relative(p, &origin)).collect();
    Ok(SyntheticSequence { frames, world_poses, ground_truth })
}

/// Pairwise odometry `L[k]` (frame `k+1` into frame `k`) with seeded noise and a
/// constant per-step bias.
pub fn perturb_trajectory(gt: &[RigidTransform], drift: &DriftSpec, seed: u64) -> Vec<RigidTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = Normal::new(0.0, drift.rotation_std_deg.to_radians()).expect("finite std");
    let trans = Normal::new(0.0, drift.translation_std).expect("finite std");
    let bias = drift.yaw_bias_deg.to_radians();
    gt.windows(2)
        .map(|w| {
            let truth = relative(&w[1], &w[0]);
            let noise = RigidTransform::new(
                EulerAngles::new(bias + rot.sample(&mut rng), rot.sample(&mut rng), rot.sample(&mut rng)),
                Vector3::new(
                    drift.translation_bias[0] + trans.sample(&mut rng),
                    drift.translation_bias[1] + trans.sample(&mut rng),
                    drift.translation_bias[2] + trans.sample(&mut rng),
                ),
            );
            compose(&truth, &noise)
        })
        .collect()
}

const PLANT_MARGIN: f64 = 2.0;

/// Checks that the four pixels around `(u, v)` all see `surface`.
fn same_surface_patch(
    caster: &SceneRaycaster,
    pose: &RigidTransform,
    k: &Intrinsics,
    u: f64,
    v: f64,
    surface: u32,
) -> bool {
    let r = pose.rotation_matrix();
    let (u0, v0) = (u.floor(), v.floor());
    [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)].iter().all(|(du, dv)| {
        caster
            .cast(&pose.translation, &(r * k.ray(u0 + du, v0 + dv)))
            .is_some_and(|h| h.surface == surface && h.t <= MAX_VALID_DEPTH * 0.95)
    })
}

fn try_plant(
    caster: &SceneRaycaster,
    poses: &[RigidTransform],
    k: &Intrinsics,
    a: usize,
    b: usize,
    rng: &mut ChaCha8Rng,
    noise_px: f64,
) -> Option<BenchmarkEntry> {
    let (pa, pb) = (&poses[a], &poses[b]);
    let u_a = rng.random_range(PLANT_MARGIN..k.width as f64 - PLANT_MARGIN).floor();
    let v_a = rng.random_range(PLANT_MARGIN..k.height as f64 - PLANT_MARGIN).floor();
    let hit = caster.cast(&pa.translation, &(pa.rotation_matrix() * k.ray(u_a, v_a)))?;
    if hit.t > MAX_VALID_DEPTH * 0.95 || !same_surface_patch(caster, pa, k, u_a, v_a, hit.surface) {
        return None;
    }
    let in_b = pb.rotation_matrix().transpose() * (hit.point - pb.translation);
    let (mut u_b, mut v_b) = k.project(&in_b)?;
    if noise_px > 0.0 {
        let n = Normal::new(0.0, noise_px).expect("finite std");
        u_b += n.sample(rng);
        v_b += n.sample(rng);
    }
    let inside = |u: f64, v: f64| {
        u >= PLANT_MARGIN && v >= PLANT_MARGIN && u < k.width as f64 - PLANT_MARGIN && v < k.height as f64 - PLANT_MARGIN
    };
    if !inside(u_b, v_b) {
        return None;
    }
    let seen = caster.cast(&pb.translation, &(pb.rotation_matrix() * k.ray(u_b, v_b)))?;
    if seen.surface != hit.surface || (seen.point - hit.point).norm() > 0.02 + 3.0 * noise_px * seen.t / k.fx {
        return None;
    }
    if !same_surface_patch(caster, pb, k, u_b, v_b, hit.surface) {
        return None;
    }
    Some(BenchmarkEntry { frame_a: a, u_a, v_a, frame_b: b, u_b, v_b })
}

/// Plants ground-truth point correspondences at controlled frame offsets plus
/// long-range loop-closure pairs. Every planted pixel neighbourhood lies on a
/// single surface so sub-pixel backprojection is exact on noise-free depth.
pub fn plant_benchmark(
    scene: &SyntheticScene,
    world_poses: &[RigidTransform],
    plan: &BenchmarkPlan,
    seed: u64,
) -> Vec<BenchmarkEntry> {
    let caster = SceneRaycaster::new(scene);
    let k = scene.intrinsics;
    let n = world_poses.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6265_6e63_68);
    let mut out = Vec::new();
    let plant_pair = |a: usize, b: usize, rng: &mut ChaCha8Rng, out: &mut Vec<BenchmarkEntry>| -> usize {
        let mut got = 0;
        for _ in 0..plan.points_per_pair * 20 {
            if got == plan.points_per_pair {
                break;
            }
            if let Some(e) = try_plant(&caster, world_poses, &k, a, b, rng, plan.annotation_noise_px) {
                out.push(e);
                got += 1;
            }
        }
        got
    };
    for &offset in &plan.offsets {
        if offset == 0 || offset >= n {
            continue;
        }
        let mut pairs = 0;
        for _ in 0..plan.pairs_per_offset * 20 {
            if pairs == plan.pairs_per_offset {
                break;
            }
            let a = rng.random_range(0..n - offset);
            if plant_pair(a, a + offset, &mut rng, &mut out) > 0 {
                pairs += 1;
            }
        }
    }
    if plan.loop_pairs > 0 && plan.min_loop_offset < n {
        let mut pairs = 0;
        for _ in 0..plan.loop_pairs * 200 {
            if pairs == plan.loop_pairs {
                break;
            }
            let a = rng.random_range(0..n - plan.min_loop_offset);
            let b = rng.random_range(a + plan.min_loop_offset..n);
            if plant_pair(a, b, &mut rng, &mut out) > 0 {
                pairs += 1;
            }
        }
    }
    out.sort_by(|x, y| {
        (x.frame_a, x.frame_b)
            .cmp(&(y.frame_a, y.frame_b))
            .then(x.u_a.total_cmp(&y.u_a))
            .then(x.v_a.total_cmp(&y.v_a))
    });
    out
}

/// Two adjacent rooms joined by a doorway, with a trajectory that tours the
/// first room, crosses into the second, and returns to its starting point.
pub fn two_room_scene(seed: u64) -> SyntheticScene {
    let kf = |p: [f64; 2], l: [f64; 3], frames: usize| Keyframe { position: [p[0], p[1], 1.5], look_at: l, frames };
    SyntheticScene {
        intrinsics: Intrinsics { fx: 120.0, fy: 120.0, cx: 79.5, cy: 59.5, width: 160, height: 120 },
        rooms: vec![
            Room { min: [0.0, 0.0, 0.0], max: [6.0, 5.0, 2.8], yaw_deg: 0.0 },
            Room { min: [6.0, 0.0, 0.0], max: [11.0, 5.0, 2.8], yaw_deg: 0.0 },
        ],
        doorways: vec![Doorway { center: [6.0, 2.5], width: 1.0, height: 2.1 }],
        trajectory: vec![
            kf([1.5, 1.5], [6.0, 5.0, 1.2], 40),
            kf([4.5, 1.5], [0.0, 5.0, 1.2], 40),
            kf([4.5, 3.5], [0.0, 0.0, 1.2], 40),
            kf([1.5, 3.5], [6.0, 0.0, 1.2], 40),
            kf([1.5, 2.5], [6.0, 2.5, 1.4], 40),
            kf([5.0, 2.5], [11.0, 2.5, 1.4], 20),
            kf([7.0, 2.5], [11.0, 5.0, 1.2], 40),
            kf([9.5, 1.5], [6.0, 5.0, 1.2], 40),
            kf([9.5, 3.5], [6.0, 0.0, 1.2], 40),
            kf([7.5, 3.5], [11.0, 0.0, 1.2], 40),
            kf([7.0, 2.5], [0.0, 2.5, 1.4], 20),
            kf([5.0, 2.5], [0.0, 2.5, 1.4], 40),
            kf([2.0, 1.8], [6.0, 5.0, 1.2], 59),
            kf([1.6, 1.5], [6.0, 5.0, 1.2], 1),
        ],
        noise: DepthNoise { a: 0.0005, b: 0.0005 },
        seed,
        texture: false,
        drift: Some(DriftSpec {
            rotation_std_deg: 0.1,
            translation_std: 0.005,
            yaw_bias_deg: 0.055,
            translation_bias: [0.0, 0.0, 0.0],
        }),
        benchmark: Some(BenchmarkPlan {
            offsets: vec![1, 2, 4, 8, 16, 32, 64, 128],
            pairs_per_offset: 10,
            loop_pairs: 40,
            min_loop_offset: 150,
            points_per_pair: 4,
            annotation_noise_px: 0.0,
        }),
    }
}

/// An empty room toured corner to corner and back to the start.
pub fn single_room_scene(frames: usize, seed: u64) -> SyntheticScene {
    let quarter = frames / 4;
    let kf = |p: [f64; 2], l: [f64; 2], frames: usize| Keyframe { position: [p[0], p[1], 1.5], look_at: [l[0], l[1], 1.2], frames };
    SyntheticScene {
        intrinsics: Intrinsics { fx: 120.0, fy: 120.0, cx: 79.5, cy: 59.5, width: 160, height: 120 },
        rooms: vec![Room { min: [0.0, 0.0, 0.0], max: [5.0, 4.0, 2.8], yaw_deg: 0.0 }],
        doorways: vec![],
        trajectory: vec![
            kf([1.2, 1.2], [5.0, 4.0], quarter),
            kf([3.8, 1.2], [0.0, 4.0], quarter),
            kf([3.8, 2.8], [0.0, 0.0], quarter),
            kf([1.2, 2.8], [5.0, 0.0], frames - 3 * quarter),
            kf([1.2, 1.2], [5.0, 4.0], 0),
        ],
        noise: DepthNoise { a: 0.0005, b: 0.0005 },
        seed,
        texture: false,
        drift: Some(DriftSpec { rotation_std_deg: 0.1, translation_std: 0.005, yaw_bias_deg: 0.1, translation_bias: [0.0; 3] }),
        benchmark: Some(BenchmarkPlan {
            offsets: vec![1, 2, 4, 8, 16, 32],
            pairs_per_offset: 5,
            loop_pairs: 10,
            min_loop_offset: (frames / 2).max(1),
            points_per_pair: 4,
            annotation_noise_px: 0.0,
        }),
    }
}

/// A long corridor walked end to end, for runtime smoke tests.
pub fn corridor_scene(frames: usize, seed: u64) -> SyntheticScene {
    let half = frames / 2;
    SyntheticScene {
        intrinsics: Intrinsics { fx: 120.0, fy: 120.0, cx: 79.5, cy: 59.5, width: 160, height: 120 },
        rooms: vec![Room { min: [0.0, 0.0, 0.0], max: [30.0, 2.5, 2.8], yaw_deg: 0.0 }],
        doorways: vec![],
        trajectory: vec![
            Keyframe { position: [1.0, 1.25, 1.5], look_at: [6.0, 0.0, 1.2], frames: half },
            Keyframe { position: [28.0, 1.25, 1.5], look_at: [34.0, 2.5, 1.2], frames: frames - half },
            Keyframe { position: [1.0, 1.25, 1.5], look_at: [-4.0, 2.5, 1.2], frames: 0 },
        ],
        noise: DepthNoise { a: 0.0005, b: 0.0005 },
        seed,
        texture: false,
        drift: Some(DriftSpec { rotation_std_deg: 0.1, translation_std: 0.005, yaw_bias_deg: 0.02, translation_bias: [0.0; 3] }),
        benchmark: Some(BenchmarkPlan {
            offsets: vec![1, 4, 16, 64],
            pairs_per_offset: 10,
            loop_pairs: 20,
            min_loop_offset: 200,
            points_per_pair: 4,
            annotation_noise_px: 0.0,
        }),
    }
}

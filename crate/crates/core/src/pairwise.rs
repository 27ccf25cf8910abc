//! Local alignment of successive frames and concatenation into the initial
//! trajectory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::Keypoint;
use crate::geom::{compose, RigidTransform};
use crate::ingest::DepthFrame;

#[derive(Debug, Error)]
pub enum PairwiseError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed match file: {reason}")]
    Format { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    pub ratio: f64,
    pub inlier_threshold: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub min_inliers: usize,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { ratio: 0.8, inlier_threshold: 0.05, max_iterations: 1000, confidence: 0.99, min_inliers: 12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentStatus {
    Ok,
    FallbackIdentity,
}

/// Transform taking frame `k` coordinates into frame `k - 1` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalAlignment {
    pub transform: RigidTransform,
    pub inliers: usize,
    pub status: AlignmentStatus,
}

impl LocalAlignment {
    pub fn fallback() -> Self {
        Self { transform: RigidTransform::identity(), inliers: 0, status: AlignmentStatus::FallbackIdentity }
    }
}

/// A 3D point correspondence; `xyz_a` in the earlier frame's camera space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMatch {
    pub xyz_a: [f64; 3],
    pub xyz_b: [f64; 3],
}

/// Externally supplied matches for one frame pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub frame_a: usize,
    pub frame_b: usize,
    pub matches: Vec<PointMatch>,
}

/// Precomputed matches keyed by `(frame_a, frame_b)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchStore {
    pub sets: BTreeMap<(usize, usize), Vec<PointMatch>>,
}

impl MatchStore {
    pub fn from_sets(sets: Vec<MatchSet>) -> Self {
        let mut store = Self::default();
        for s in sets {
            store.sets.entry((s.frame_a, s.frame_b)).or_default().extend(s.matches);
        }
        store
    }

    pub fn get(&self, a: usize, b: usize) -> Option<&[PointMatch]> {
        self.sets.get(&(a, b)).map(|v| v.as_slice())
    }

    pub fn to_sets(&self) -> Vec<MatchSet> {
        self.sets
            .iter()
            .map(|(&(frame_a, frame_b), m)| MatchSet { frame_a, frame_b, matches: m.clone() })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self, PairwiseError> {
        let text = fs::read_to_string(path).map_err(|source| PairwiseError::Io { path: path.into(), source })?;
        let sets: Vec<MatchSet> = serde_json::from_str(&text)
            .map_err(|e| PairwiseError::Format { path: path.into(), reason: e.to_string() })?;
        Ok(Self::from_sets(sets))
    }

    pub fn save(&self, path: &Path) -> Result<(), PairwiseError> {
        let text = serde_json::to_string(&self.to_sets()).expect("matches serialize");
        fs::write(path, text).map_err(|source| PairwiseError::Io { path: path.into(), source })
    }
}

fn descriptor_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>()
}

fn best_two(query: &[f32], set: &[Keypoint]) -> Option<(usize, f32, f32)> {
    let mut best = (usize::MAX, f32::INFINITY, f32::INFINITY);
    for (i, k) in set.iter().enumerate() {
        let d = descriptor_distance(query, &k.descriptor);
        if d < best.1 {
            best = (i, d, best.1);
        } else if d < best.2 {
            best.2 = d;
        }
    }
    (best.0 != usize::MAX).then_some(best)
}

/// Mutual-nearest descriptor matches passing the ratio test (on distances).
pub fn match_descriptors(a: &[Keypoint], b: &[Keypoint], ratio: f64) -> Vec<(usize, usize)> {
    let ratio_sq = (ratio * ratio) as f32;
    let mut out = Vec::new();
    for (i, ka) in a.iter().enumerate() {
        let Some((j, d1, d2)) = best_two(&ka.descriptor, b) else { continue };
        if d2.is_finite() && d1 > ratio_sq * d2 {
            continue;
        }
        if best_two(&b[j].descriptor, a).is_some_and(|(back, _, _)| back == i) {
            out.push((i, j));
        }
    }
    out
}

/// Least-squares rigid transform mapping `src` onto `dst` (Kabsch with
/// reflection correction). Needs at least three non-collinear pairs.
pub fn fit_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<RigidTransform> {
    if src.len() < 3 || src.len() != dst.len() {
        return None;
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - cd) * (s - cs).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    // Degenerate (collinear) samples leave two singular values near zero.
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[1] <= 1e-12 * sv[0].max(1e-300) {
        return None;
    }
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let t = cd - r * cs;
    let out = RigidTransform::from_parts(&r, t);
    out.is_finite().then_some(out)
}

/// RANSAC over 3D point matches; the result maps `xyz_b` onto `xyz_a`.
pub fn align_matches(matches: &[PointMatch], params: &RansacParams, seed: u64) -> LocalAlignment {
    if matches.len() < 3 {
        return LocalAlignment::fallback();
    }
    let a: Vec<Vector3<f64>> = matches.iter().map(|m| Vector3::from(m.xyz_a)).collect();
    let b: Vec<Vector3<f64>> = matches.iter().map(|m| Vector3::from(m.xyz_b)).collect();
    let thr_sq = params.inlier_threshold * params.inlier_threshold;
    let inliers_of = |t: &RigidTransform| -> Vec<usize> {
        (0..a.len()).filter(|&i| (t.transform_point(&b[i]) - a[i]).norm_squared() < thr_sq).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Vec<usize> = Vec::new();
    let mut needed = params.max_iterations;
    let mut it = 0;
    while it < needed.min(params.max_iterations) {
        it += 1;
        let pick = sample(&mut rng, a.len(), 3).into_vec();
        let src: Vec<Vector3<f64>> = pick.iter().map(|&i| b[i]).collect();
        let dst: Vec<Vector3<f64>> = pick.iter().map(|&i| a[i]).collect();
        let Some(t) = fit_rigid(&src, &dst) else { continue };
        let inl = inliers_of(&t);
        if inl.len() > best.len() {
            best = inl;
            let w = best.len() as f64 / a.len() as f64;
            let p_fail = 1.0 - w.powi(3);
            needed = if p_fail <= 0.0 {
                0
            } else {
                ((1.0 - params.confidence).ln() / p_fail.ln()).ceil().max(0.0) as usize
            };
        }
    }
    if best.len() < params.min_inliers.max(3) {
        return LocalAlignment::fallback();
    }
    // Refit on all inliers, then re-collect inliers once.
    let refit = |idx: &[usize]| {
        let src: Vec<Vector3<f64>> = idx.iter().map(|&i| b[i]).collect();
        let dst: Vec<Vector3<f64>> = idx.iter().map(|&i| a[i]).collect();
        fit_rigid(&src, &dst)
    };
    let Some(mut t) = refit(&best) else { return LocalAlignment::fallback() };
    let again = inliers_of(&t);
    if again.len() >= best.len() {
        if let Some(t2) = refit(&again) {
            t = t2;
            best = again;
        }
    }
    if best.len() < params.min_inliers {
        return LocalAlignment::fallback();
    }
    LocalAlignment { transform: t, inliers: best.len(), status: AlignmentStatus::Ok }
}

/// Aligns keypoints of frame `b` onto those of frame `a`.
pub fn align_pair(a: &[Keypoint], b: &[Keypoint], params: &RansacParams, seed: u64) -> LocalAlignment {
    let matches: Vec<PointMatch> = match_descriptors(a, b, params.ratio)
        .into_iter()
        .map(|(i, j)| PointMatch { xyz_a: a[i].position.into(), xyz_b: b[j].position.into() })
        .collect();
    align_matches(&matches, params, seed)
}

/// Initial trajectory: `T0[0] = I`, `T0[k] = T0[k-1] * L[k-1]` with camera-to-world
/// poses and `L[k-1]` taking frame `k` into frame `k - 1`.
pub fn concatenate(local: &[LocalAlignment]) -> Vec<RigidTransform> {
    let mut out = Vec::with_capacity(local.len() + 1);
    out.push(RigidTransform::identity());
    for l in local {
        let prev = *out.last().expect("non-empty");
        out.push(compose(&prev, &l.transform));
    }
    out
}

/// Odometry matches that reproduce the given local transforms exactly: points
/// backprojected from frame `k + 1` paired with their images under `L[k]`.
pub fn odometry_matches(
    frames: &[DepthFrame],
    local: &[RigidTransform],
    per_pair: usize,
    seed: u64,
) -> MatchStore {
    let mut sets = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (k, l) in local.iter().enumerate() {
        let fb = &frames[k + 1];
        let valid: Vec<usize> = (0..fb.depth.len()).filter(|&i| fb.depth_at(i % fb.width(), i / fb.width()).is_some()).collect();
        let take = per_pair.min(valid.len());
        let mut picks: Vec<usize> = sample(&mut rng, valid.len(), take).into_iter().map(|i| valid[i]).collect();
        picks.sort_unstable();
        let matches = picks
            .into_iter()
            .map(|i| {
                let pb = fb.point_at(i % fb.width(), i / fb.width()).expect("valid pixel");
                PointMatch { xyz_a: l.transform_point(&pb).into(), xyz_b: pb.into() }
            })
            .collect();
        sets.push(MatchSet { frame_a: k, frame_b: k + 1, matches });
    }
    MatchStore::from_sets(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::EulerAngles;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        RigidTransform::new(
            EulerAngles::new(rng.random_range(-0.5..0.5), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
            Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
        )
    }

    fn keypoints(rng: &mut ChaCha8Rng, n: usize) -> Vec<Keypoint> {
        (0..n)
            .map(|_| {
                let mut d: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
                let norm = d.iter().map(|x| x * x).sum::<f32>().sqrt();
                d.iter_mut().for_each(|x| *x /= norm);
                Keypoint {
                    position: Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(1.0..4.0)),
                    pixel: (0.0, 0.0),
                    descriptor: d,
                }
            })
            .collect()
    }

    fn max_entry_diff(a: &RigidTransform, b: &RigidTransform) -> f64 {
        (a.to_matrix4() - b.to_matrix4()).abs().max()
    }

    #[test]
    fn identical_keypoints_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = keypoints(&mut rng, 40);
        let la = align_pair(&k, &k, &RansacParams::default(), 0);
        assert_eq!(la.status, AlignmentStatus::Ok);
        assert_eq!(la.inliers, 40);
        assert!(max_entry_diff(&la.transform, &RigidTransform::identity()) < 1e-6);
    }

    #[test]
    fn exact_recovery_of_known_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = keypoints(&mut rng, 50);
        let t = random_transform(&mut rng);
        let inv = t.inverse();
        let b: Vec<Keypoint> = a.iter().map(|k| Keypoint { position: inv.transform_point(&k.position), ..k.clone() }).collect();
        let la = align_pair(&a, &b, &RansacParams::default(), 0);
        assert_eq!(la.status, AlignmentStatus::Ok);
        assert!(max_entry_diff(&la.transform, &t) < 1e-6);
    }

    #[test]
    fn robust_to_half_outliers() {
        let mut worst: f64 = 0.0;
        for trial in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let t = random_transform(&mut rng);
            let noise = Normal::new(0.0, 0.005).unwrap();
            let matches: Vec<PointMatch> = (0..60)
                .map(|i| {
                    let b = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(1.0..4.0));
                    let a = if i % 2 == 0 {
                        t.transform_point(&b) + Vector3::from_fn(|_, _| noise.sample(&mut rng))
                    } else {
                        Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(1.0..4.0))
                    };
                    PointMatch { xyz_a: a.into(), xyz_b: b.into() }
                })
                .collect();
            let la = align_matches(&matches, &RansacParams::default(), trial);
            assert_eq!(la.status, AlignmentStatus::Ok);
            worst = worst.max((la.transform.translation - t.translation).norm());
        }
        assert!(worst < 0.01, "{worst}");
    }

    #[test]
    fn too_few_matches_fall_back_to_identity() {
        let la = align_matches(&[PointMatch { xyz_a: [0.0; 3], xyz_b: [0.0; 3] }], &RansacParams::default(), 0);
        assert_eq!(la, LocalAlignment::fallback());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let few: Vec<PointMatch> = (0..8)
            .map(|_| {
                let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..2.0)];
                PointMatch { xyz_a: p, xyz_b: p }
            })
            .collect();
        assert_eq!(align_matches(&few, &RansacParams::default(), 0).status, AlignmentStatus::FallbackIdentity);
    }

    #[test]
    fn ransac_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = keypoints(&mut rng, 30);
        let b = keypoints(&mut rng, 30);
        let p = RansacParams::default();
        assert_eq!(align_pair(&a, &b, &p, 7), align_pair(&a, &b, &p, 7));
    }

    #[test]
    fn fit_rigid_rejects_reflections() {
        let src = vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0), Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 1.0, 1.0)];
        let dst: Vec<Vector3<f64>> = src.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let t = fit_rigid(&src, &dst).unwrap();
        assert!(t.rotation_matrix().determinant() > 0.0);
    }

    fn ok(t: RigidTransform) -> LocalAlignment {
        LocalAlignment { transform: t, inliers: 12, status: AlignmentStatus::Ok }
    }

    #[test]
    fn concatenate_identity_and_telescoping() {
        let ids = concatenate(&[ok(RigidTransform::identity()); 4]);
        assert!(ids.iter().all(|t| *t == RigidTransform::identity()));
        let steps = concatenate(&[ok(RigidTransform::from_translation(1.0, 0.0, 0.0)); 5]);
        for (k, t) in steps.iter().enumerate() {
            assert!((t.translation - Vector3::new(k as f64, 0.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn concatenate_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let l: Vec<LocalAlignment> = (0..30).map(|_| ok(random_transform(&mut rng))).collect();
        let t0 = concatenate(&l);
        let mut m = nalgebra::Matrix4::identity();
        for (k, lk) in l.iter().enumerate() {
            m *= lk.transform.to_matrix4();
            assert!((t0[k + 1].to_matrix4() - m).abs().max() < 1e-9);
        }
    }

    #[test]
    fn concatenating_clean_odometry_reproduces_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut gt = vec![RigidTransform::identity()];
        for _ in 0..20 {
            let next = compose(gt.last().unwrap(), &random_transform(&mut rng));
            gt.push(next);
        }
        let l = crate::ingest::perturb_trajectory(&gt, &Default::default(), 0);
        let t0 = concatenate(&l.into_iter().map(ok).collect::<Vec<_>>());
        for (a, b) in t0.iter().zip(&gt) {
            assert!(max_entry_diff(a, b) < 1e-9);
        }
    }

    #[test]
    fn match_file_round_trip() {
        let store = MatchStore::from_sets(vec![MatchSet {
            frame_a: 0,
            frame_b: 1,
            matches: vec![PointMatch { xyz_a: [0.1, 0.2, 0.3], xyz_b: [1.0 / 3.0, 0.0, 2.0] }],
        }]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        store.save(&p).unwrap();
        assert_eq!(MatchStore::load(&p).unwrap(), store);
    }
}

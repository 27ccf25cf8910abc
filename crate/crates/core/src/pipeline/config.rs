//! Plain-text `key = value` configuration of a registration run.

use std::fmt::Display;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::constraints::ConstraintParams;
use crate::features::{FeatureParams, HarrisParams};
use crate::pairwise::RansacParams;
use crate::solver::{EnergyWeights, ProblemOptions, SolveOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Initial window length in frames.
    pub l0: usize,
    /// Explicit iteration count; derived from `l0` and the frame count when unset.
    pub n_iter: Option<usize>,
    pub seed: u64,
    /// Detect proxies and structural constraints.
    pub structure: bool,
    /// Grow windows from `l0`; otherwise every iteration uses one window over all frames.
    pub fine_to_coarse: bool,
    /// Abort when more than this fraction of consecutive pairs fail to align.
    pub max_failed_pairs: f64,
    pub constraints: ConstraintParams,
    pub weights: EnergyWeights,
    pub problem: ProblemOptions,
    pub solver: SolveOptions,
    pub features: FeatureParams,
    pub keypoints: HarrisParams,
    pub ransac: RansacParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            l0: 16,
            n_iter: None,
            seed: 0,
            structure: true,
            fine_to_coarse: true,
            max_failed_pairs: 0.5,
            constraints: ConstraintParams::default(),
            weights: EnergyWeights::default(),
            problem: ProblemOptions::default(),
            solver: SolveOptions::default(),
            features: FeatureParams::default(),
            keypoints: HarrisParams::default(),
            ransac: RansacParams::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| format!("{key}: cannot parse {value:?}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("{key}: expected a boolean, got {value:?}")),
    }
}

impl PipelineConfig {
    /// Sets one key. Keys use the names of [`PipelineConfig::to_text`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        let c = &mut self.constraints;
        let s = &mut c.schedule;
        let w = &mut self.weights;
        let f = &mut self.features;
        match key {
            "l0" => self.l0 = parse(key, value)?,
            "n_iter" => {
                self.n_iter = if value == "auto" { None } else { Some(parse(key, value)?) };
            }
            "seed" => self.seed = parse(key, value)?,
            "structure" => self.structure = parse_bool(key, value)?,
            "fine_to_coarse" => self.fine_to_coarse = parse_bool(key, value)?,
            "max_failed_pairs" => self.max_failed_pairs = parse(key, value)?,
            "tau_merge" => c.tau_merge = parse(key, value)?,
            "lambda_n" => {
                c.lambda_n = parse(key, value)?;
                self.problem.lambda_n = c.lambda_n;
            }
            "lambda_r" => self.problem.lambda_r = parse(key, value)?,
            "k_max" => self.problem.k_max = parse(key, value)?,
            "sigma_theta" => c.sigma_theta_deg = parse(key, value)?,
            "relation_cutoff" => c.relation_cutoff_sigmas = parse(key, value)?,
            "max_distance_initial" => s.start_distance = parse(key, value)?,
            "max_angle_initial" => s.start_angle_deg = parse(key, value)?,
            "max_distance_final" => s.end_distance = parse(key, value)?,
            "max_angle_final" => s.end_angle_deg = parse(key, value)?,
            "ramp_iters" => s.ramp_iters = parse(key, value)?,
            "random_partners" => c.random_partners = parse(key, value)?,
            "samples_per_frame" => c.samples_per_frame = parse(key, value)?,
            "weights.w_S" => w.w_s = parse(key, value)?,
            "weights.w_P" => w.w_p = parse(key, value)?,
            "weights.w_H" => w.w_h = parse(key, value)?,
            "weights.w_G" => w.w_g = parse(key, value)?,
            "weights.w_C" => w.w_c = parse(key, value)?,
            "weights.w_L" => w.w_l = parse(key, value)?,
            "weights.w_I" => w.w_i = parse(key, value)?,
            "solver.max_inner_iterations" => self.solver.max_inner_iterations = parse(key, value)?,
            "solver.initial_damping" => self.solver.initial_damping = parse(key, value)?,
            "solver.min_relative_decrease" => self.solver.min_relative_decrease = parse(key, value)?,
            "solver.cg_max_iterations" => self.solver.cg_max_iterations = parse(key, value)?,
            "solver.cg_tolerance" => self.solver.cg_tolerance = parse(key, value)?,
            "solver.preconditioner_band" => self.solver.preconditioner_band = parse(key, value)?,
            "features.cell_size" => f.cell_size = parse(key, value)?,
            "features.patch_max_angle" => f.patch_max_angle_deg = parse(key, value)?,
            "features.patch_max_rms" => f.patch_max_rms = parse(key, value)?,
            "features.min_patch_pixels" => f.min_patch_pixels = parse(key, value)?,
            "features.planar_stride" => f.planar_stride = parse(key, value)?,
            "features.contour_jump" => f.contour_jump = parse(key, value)?,
            "features.crease_angle" => f.crease_angle_deg = parse(key, value)?,
            "features.max_features" => f.max_features = parse(key, value)?,
            "features.min_spacing" => f.min_spacing_px = parse(key, value)?,
            "keypoints.k" => self.keypoints.k = parse(key, value)?,
            "keypoints.nms_radius" => self.keypoints.nms_radius = parse(key, value)?,
            "keypoints.max_corners" => self.keypoints.max_corners = parse(key, value)?,
            "keypoints.relative_threshold" => self.keypoints.relative_threshold = parse(key, value)?,
            "ransac.ratio" => self.ransac.ratio = parse(key, value)?,
            "ransac.inlier_threshold" => self.ransac.inlier_threshold = parse(key, value)?,
            "ransac.max_iterations" => self.ransac.max_iterations = parse(key, value)?,
            "ransac.confidence" => self.ransac.confidence = parse(key, value)?,
            "ransac.min_inliers" => self.ransac.min_inliers = parse(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.constraints;
        let s = &c.schedule;
        let w = &self.weights;
        let f = &self.features;
        let k = &self.keypoints;
        let r = &self.ransac;
        let o = &self.solver;
        vec![
            ("l0", self.l0.to_string()),
            ("n_iter", self.n_iter.map_or("auto".to_string(), |n| n.to_string())),
            ("seed", self.seed.to_string()),
            ("structure", self.structure.to_string()),
            ("fine_to_coarse", self.fine_to_coarse.to_string()),
            ("max_failed_pairs", self.max_failed_pairs.to_string()),
            ("tau_merge", c.tau_merge.to_string()),
            ("lambda_n", c.lambda_n.to_string()),
            ("lambda_r", self.problem.lambda_r.to_string()),
            ("k_max", self.problem.k_max.to_string()),
            ("sigma_theta", c.sigma_theta_deg.to_string()),
            ("relation_cutoff", c.relation_cutoff_sigmas.to_string()),
            ("max_distance_initial", s.start_distance.to_string()),
            ("max_angle_initial", s.start_angle_deg.to_string()),
            ("max_distance_final", s.end_distance.to_string()),
            ("max_angle_final", s.end_angle_deg.to_string()),
            ("ramp_iters", s.ramp_iters.to_string()),
            ("random_partners", c.random_partners.to_string()),
            ("samples_per_frame", c.samples_per_frame.to_string()),
            ("weights.w_S", w.w_s.to_string()),
            ("weights.w_P", w.w_p.to_string()),
            ("weights.w_H", w.w_h.to_string()),
            ("weights.w_G", w.w_g.to_string()),
            ("weights.w_C", w.w_c.to_string()),
            ("weights.w_L", w.w_l.to_string()),
            ("weights.w_I", w.w_i.to_string()),
            ("solver.max_inner_iterations", o.max_inner_iterations.to_string()),
            ("solver.initial_damping", o.initial_damping.to_string()),
            ("solver.min_relative_decrease", o.min_relative_decrease.to_string()),
            ("solver.cg_max_iterations", o.cg_max_iterations.to_string()),
            ("solver.cg_tolerance", o.cg_tolerance.to_string()),
            ("solver.preconditioner_band", o.preconditioner_band.to_string()),
            ("features.cell_size", f.cell_size.to_string()),
            ("features.patch_max_angle", f.patch_max_angle_deg.to_string()),
            ("features.patch_max_rms", f.patch_max_rms.to_string()),
            ("features.min_patch_pixels", f.min_patch_pixels.to_string()),
            ("features.planar_stride", f.planar_stride.to_string()),
            ("features.contour_jump", f.contour_jump.to_string()),
            ("features.crease_angle", f.crease_angle_deg.to_string()),
            ("features.max_features", f.max_features.to_string()),
            ("features.min_spacing", f.min_spacing_px.to_string()),
            ("keypoints.k", k.k.to_string()),
            ("keypoints.nms_radius", k.nms_radius.to_string()),
            ("keypoints.max_corners", k.max_corners.to_string()),
            ("keypoints.relative_threshold", k.relative_threshold.to_string()),
            ("ransac.ratio", r.ratio.to_string()),
            ("ransac.inlier_threshold", r.inlier_threshold.to_string()),
            ("ransac.max_iterations", r.max_iterations.to_string()),
            ("ransac.confidence", r.confidence.to_string()),
            ("ransac.min_inliers", r.min_inliers.to_string()),
        ]
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses a config file on top of the defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| PipelineError::Config { line: Some(i + 1), reason };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            cfg.set(k.trim(), v).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |reason: String| Err(PipelineError::Config { line: None, reason });
        if self.l0 < 2 {
            return err(format!("l0 must be at least 2, got {}", self.l0));
        }
        if self.n_iter == Some(0) {
            return err("n_iter must be positive".into());
        }
        let c = &self.constraints;
        let s = &c.schedule;
        let positive = [
            ("tau_merge", c.tau_merge),
            ("sigma_theta", c.sigma_theta_deg),
            ("relation_cutoff", c.relation_cutoff_sigmas),
            ("max_distance_initial", s.start_distance),
            ("max_angle_initial", s.start_angle_deg),
            ("max_distance_final", s.end_distance),
            ("max_angle_final", s.end_angle_deg),
            ("lambda_r", self.problem.lambda_r),
            ("lambda_n", c.lambda_n),
            ("max_failed_pairs", self.max_failed_pairs),
            ("features.patch_max_angle", self.features.patch_max_angle_deg),
            ("features.patch_max_rms", self.features.patch_max_rms),
            ("features.contour_jump", self.features.contour_jump),
            ("features.crease_angle", self.features.crease_angle_deg),
            ("ransac.inlier_threshold", self.ransac.inlier_threshold),
            ("solver.initial_damping", self.solver.initial_damping),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return err(format!("{k} must be positive, got {v}"));
            }
        }
        if c.samples_per_frame == 0 {
            return err("samples_per_frame must be positive".into());
        }
        self.weights.validate().map_err(|e| PipelineError::Config { line: None, reason: e.to_string() })
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        content_hash(&self.to_text())
    }

    /// Whether structural constraints take part at all.
    pub fn structure_enabled(&self) -> bool {
        self.structure && self.weights.w_s > 0.0
    }

    pub fn constraint_params(&self) -> ConstraintParams {
        ConstraintParams { structure: self.structure_enabled(), ..self.constraints.clone() }
    }

    /// Window length of every iteration for `n` frames.
    pub fn window_lengths(&self, n: usize) -> Vec<usize> {
        let mut lengths = Vec::new();
        let mut l = self.l0;
        loop {
            lengths.push(l);
            let done = match self.n_iter {
                Some(k) => lengths.len() >= k,
                None => l >= n,
            };
            if done {
                break;
            }
            l = l.saturating_mul(2);
        }
        if !self.fine_to_coarse {
            lengths.iter_mut().for_each(|l| *l = n);
        }
        lengths
    }
}

/// Hex SHA-256 of `text`.
pub fn content_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

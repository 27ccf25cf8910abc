//! Trajectory files.
//!
//! The native format has one line per frame: the frame index and the 16
//! row-major entries of the camera-to-world matrix. Each pose line is followed
//! by a `#e` comment carrying the exact Euler parameters, so native files
//! round-trip bit for bit; readers that skip comments see a plain matrix file.
//! The TUM-style export has lines `index tx ty tz qx qy qz qw`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use super::PipelineError;
use crate::geom::RigidTransform;
use crate::solver::EnergyBreakdown;

/// Tolerance on rotation orthonormality when reading matrices.
const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryMeta {
    /// Iteration that produced the poses; `None` for inputs and ground truth.
    pub iteration: Option<usize>,
    pub energy: Option<EnergyBreakdown>,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<RigidTransform>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn new(poses: Vec<RigidTransform>) -> Self {
        Self { poses, meta: TrajectoryMeta::default() }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrajectoryFormat {
    #[default]
    Native,
    Tum,
}

impl FromStr for TrajectoryFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native" => Ok(Self::Native),
            "tum" => Ok(Self::Tum),
            other => Err(format!("unknown trajectory format '{other}'")),
        }
    }
}

/// Formats a float so that parsing gives back the same bits, without a
/// negative zero.
fn num(v: f64) -> String {
    format!("{}", v + 0.0)
}

fn write_header(out: &mut String, t: &Trajectory) {
    let _ = writeln!(out, "# trajectory frames={}", t.poses.len());
    if let Some(h) = &t.meta.config_hash {
        let _ = writeln!(out, "# config_hash {h}");
    }
    if let Some(i) = t.meta.iteration {
        let _ = writeln!(out, "# iteration {i}");
    }
    if let Some(e) = &t.meta.energy {
        let _ = writeln!(
            out,
            "# energy E_H={} E_G={} E_P={} E_C={} E_L={} E_I={} total={}",
            e.e_h, e.e_g, e.e_p, e.e_c, e.e_l, e.e_i, e.total
        );
    }
}

pub fn to_text(t: &Trajectory, format: TrajectoryFormat) -> String {
    let mut out = String::new();
    write_header(&mut out, t);
    for (k, p) in t.poses.iter().enumerate() {
        match format {
            TrajectoryFormat::Native => {
                let m = p.to_matrix4();
                let _ = write!(out, "{k}");
                for r in 0..4 {
                    for c in 0..4 {
                        let _ = write!(out, " {}", num(m[(r, c)]));
                    }
                }
                let _ = write!(out, "\n#e {k}");
                for v in p.to_params() {
                    let _ = write!(out, " {}", num(v));
                }
                out.push('\n');
            }
            TrajectoryFormat::Tum => {
                let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(p.rotation_matrix()));
                let t = &p.translation;
                let _ = writeln!(
                    out,
                    "{k} {} {} {} {} {} {} {}",
                    num(t.x),
                    num(t.y),
                    num(t.z),
                    num(q.i),
                    num(q.j),
                    num(q.k),
                    num(q.w)
                );
            }
        }
    }
    out
}

pub fn save_trajectory(t: &Trajectory, path: &Path, format: TrajectoryFormat) -> Result<(), PipelineError> {
    fs::write(path, to_text(t, format)).map_err(|source| PipelineError::Io { path: path.into(), source })
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory, PipelineError> {
    let text = fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.into(), source })?;
    parse_trajectory(&text).map_err(|(line, reason)| PipelineError::Format { path: path.into(), line, reason })
}

fn parse_numbers(tokens: &[&str]) -> Result<Vec<f64>, String> {
    tokens
        .iter()
        .map(|t| {
            let v: f64 = t.parse().map_err(|_| format!("not a number: {t:?}"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("non-finite value {t:?}"))
            }
        })
        .collect()
}

fn parse_energy(rest: &str) -> Result<EnergyBreakdown, String> {
    let mut e = EnergyBreakdown::default();
    for item in rest.split_whitespace() {
        let (k, v) = item.split_once('=').ok_or_else(|| format!("bad energy entry {item:?}"))?;
        let v: f64 = v.parse().map_err(|_| format!("bad energy value {v:?}"))?;
        match k {
            "E_H" => e.e_h = v,
            "E_G" => e.e_g = v,
            "E_P" => e.e_p = v,
            "E_C" => e.e_c = v,
            "E_L" => e.e_l = v,
            "E_I" => e.e_i = v,
            "total" => e.total = v,
            _ => return Err(format!("unknown energy term {k:?}")),
        }
    }
    Ok(e)
}

fn pose_from_matrix(v: &[f64]) -> Result<RigidTransform, String> {
    let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    if v[12] != 0.0 || v[13] != 0.0 || v[14] != 0.0 || v[15] != 1.0 {
        return Err("last matrix row must be 0 0 0 1".into());
    }
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > ROTATION_TOLERANCE || r.determinant() < 0.0 {
        return Err(format!("rotation block is not a rotation (orthonormality error {err:.2e})"));
    }
    Ok(RigidTransform::from_parts(&r, Vector3::new(v[3], v[7], v[11])))
}

/// Parses either format; errors carry a 1-based line number.
pub fn parse_trajectory(text: &str) -> Result<Trajectory, (usize, String)> {
    let mut meta = TrajectoryMeta::default();
    let mut poses: Vec<RigidTransform> = Vec::new();
    // Line of the last native pose still open for an exact-parameter line.
    let mut open_native: Option<usize> = None;
    let mut format: Option<TrajectoryFormat> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#e ") {
            let tokens: Vec<&str> = rest.split_whitespace().collect();
            if tokens.len() != 7 {
                return Err((line_no, format!("expected index and 6 parameters, found {} fields", tokens.len())));
            }
            let k: usize = tokens[0].parse().map_err(|_| (line_no, format!("bad frame index {:?}", tokens[0])))?;
            if open_native != Some(k) {
                return Err((line_no, format!("parameter line for frame {k} does not follow its matrix")));
            }
            let v = parse_numbers(&tokens[1..]).map_err(|e| (line_no, e))?;
            let exact = RigidTransform::from_params(&[v[0], v[1], v[2], v[3], v[4], v[5]]);
            let diff = (exact.to_matrix4() - poses[k].to_matrix4()).abs().max();
            if diff > 1e-9 {
                return Err((line_no, format!("parameters disagree with the matrix of frame {k} by {diff:.2e}")));
            }
            poses[k] = exact;
            open_native = None;
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(h) = rest.strip_prefix("config_hash ") {
                meta.config_hash = Some(h.trim().to_string());
            } else if let Some(it) = rest.strip_prefix("iteration ") {
                meta.iteration = Some(it.trim().parse().map_err(|_| (line_no, format!("bad iteration {it:?}")))?);
            } else if let Some(e) = rest.strip_prefix("energy ") {
                meta.energy = Some(parse_energy(e).map_err(|r| (line_no, r))?);
            }
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let this = match tokens.len() {
            17 => TrajectoryFormat::Native,
            8 => TrajectoryFormat::Tum,
            n => return Err((line_no, format!("expected 17 (matrix) or 8 (TUM) fields, found {n}"))),
        };
        if *format.get_or_insert(this) != this {
            return Err((line_no, "mixed native and TUM lines".into()));
        }
        let k: usize = tokens[0].parse().map_err(|_| (line_no, format!("bad frame index {:?}", tokens[0])))?;
        if k != poses.len() {
            return Err((line_no, format!("expected frame {}, found {k}", poses.len())));
        }
        let v = parse_numbers(&tokens[1..]).map_err(|e| (line_no, e))?;
        let pose = match this {
            TrajectoryFormat::Native => pose_from_matrix(&v).map_err(|e| (line_no, e))?,
            TrajectoryFormat::Tum => {
                let q = Quaternion::new(v[6], v[3], v[4], v[5]);
                if !(q.norm() > 1e-6) {
                    return Err((line_no, "zero quaternion".into()));
                }
                let r = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
                RigidTransform::from_parts(&r, Vector3::new(v[0], v[1], v[2]))
            }
        };
        poses.push(pose);
        open_native = (this == TrajectoryFormat::Native).then_some(k);
    }
    Ok(Trajectory { poses, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::EulerAngles;

    #[test]
    fn identity_line() {
        let text = to_text(&Trajectory::new(vec![RigidTransform::identity()]), TrajectoryFormat::Native);
        let line = text.lines().find(|l| !l.starts_with('#')).unwrap();
        assert_eq!(line, "0 1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 1");
    }

    #[test]
    fn matrix_only_files_are_accepted() {
        let p = RigidTransform::new(EulerAngles::new(0.3, -0.2, 0.1), Vector3::new(1.0, 2.0, -0.5));
        let text: String = to_text(&Trajectory::new(vec![RigidTransform::identity(), p]), TrajectoryFormat::Native)
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| format!("{l}\n"))
            .collect();
        let t = parse_trajectory(&text).unwrap();
        assert!((t.poses[1].to_matrix4() - p.to_matrix4()).abs().max() < 1e-12);
    }

    #[test]
    fn malformed_lines_are_reported() {
        let bad = "0 1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 1\n1 2 3\n";
        assert_eq!(parse_trajectory(bad).unwrap_err().0, 2);
        let skip = "0 0 0 0 0 0 0 1\n2 0 0 0 0 0 0 1\n";
        assert_eq!(parse_trajectory(skip).unwrap_err().0, 2);
        let scaled = "0 2 0 0 0 0 1 0 0 0 0 1 0 0 0 0 1\n";
        assert_eq!(parse_trajectory(scaled).unwrap_err().0, 1);
        let nan = "# c\n0 0 0 NaN 0 0 0 1\n";
        assert_eq!(parse_trajectory(nan).unwrap_err().0, 2);
    }
}

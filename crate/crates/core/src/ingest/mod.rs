//! Depth frames: loading, intrinsics, backprojection, and the synthetic scene
//! generator used for desk-scale verification.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod synth;

pub use synth::{
    perturb_trajectory, plant_benchmark, synth_scene, BenchmarkPlan, DepthNoise, Doorway,
    DriftSpec, Keyframe, Room, SceneRaycaster, SyntheticScene, SyntheticSequence,
};

/// Depths beyond this range are treated as invalid.
pub const MAX_VALID_DEPTH: f64 = 12.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: png decode failed: {reason}")]
    Png { path: PathBuf, reason: String },
    #[error("{path}: image is {found_width}x{found_height}, intrinsics declare {width}x{height}")]
    SizeMismatch {
        path: PathBuf,
        width: usize,
        height: usize,
        found_width: usize,
        found_height: usize,
    },
    #[error("{path}: expected a 16-bit single-channel png")]
    PixelFormat { path: PathBuf },
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("camera pose of frame {frame} lies outside every room")]
    PoseOutsideRooms { frame: usize },
    #[error("invalid scene at {pointer}: {reason}")]
    InvalidScene { pointer: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.to_path_buf(), source }
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: &str| Err(IngestError::Intrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside image");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside image");
        }
        Ok(())
    }

    /// Unnormalized ray through pixel `(u, v)` with unit z component.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 1e-9 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Parses the `fx= fy= cx= cy= width= height=` text format. Keys may be
    /// spread over any number of lines.
    pub fn parse(text: &str) -> Result<Self, IngestError> {
        let mut vals: [Option<f64>; 6] = [None; 6];
        const KEYS: [&str; 6] = ["fx", "fy", "cx", "cy", "width", "height"];
        for tok in text.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| IngestError::Intrinsics(format!("expected key=value, got '{tok}'")))?;
            let idx = KEYS
                .iter()
                .position(|&key| key == k)
                .ok_or_else(|| IngestError::Intrinsics(format!("unknown key '{k}'")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| IngestError::Intrinsics(format!("bad number for {k}: '{v}'")))?;
            vals[idx] = Some(v);
        }
        let get = |i: usize| vals[i].ok_or_else(|| IngestError::Intrinsics(format!("missing {}", KEYS[i])));
        let dim = |i: usize| -> Result<usize, IngestError> {
            let v = get(i)?;
            if v < 1.0 || v.fract() != 0.0 {
                return Err(IngestError::Intrinsics(format!("{} must be a positive integer", KEYS[i])));
            }
            Ok(v as usize)
        };
        let k = Intrinsics {
            fx: get(0)?,
            fy: get(1)?,
            cx: get(2)?,
            cy: get(3)?,
            width: dim(4)?,
            height: dim(5)?,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn to_text(&self) -> String {
        format!(
            "fx={} fy={} cx={} cy={} width={} height={}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}

/// One depth image in meters; `0.0` marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub index: usize,
    pub intrinsics: Intrinsics,
    pub depth: Vec<f32>,
    /// Optional intensity in `[0, 1]`, used only by the keypoint detector.
    pub gray: Option<Vec<f32>>,
}

impl DepthFrame {
    pub fn new(index: usize, intrinsics: Intrinsics, depth: Vec<f32>) -> Self {
        assert_eq!(depth.len(), intrinsics.pixel_count());
        Self { index, intrinsics, depth, gray: None }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn depth_at(&self, u: usize, v: usize) -> Option<f64> {
        let d = self.depth[v * self.width() + u] as f64;
        (d > 0.0 && d <= MAX_VALID_DEPTH).then_some(d)
    }

    /// Camera-space point behind integer pixel `(u, v)`.
    pub fn point_at(&self, u: usize, v: usize) -> Option<Vector3<f64>> {
        self.depth_at(u, v)
            .map(|d| self.intrinsics.ray(u as f64, v as f64) * d)
    }

    /// Camera-space point behind a sub-pixel location. Inverse depth is
    /// interpolated bilinearly, which is exact on planar surfaces; every pixel
    /// carrying non-zero weight must be valid.
    pub fn point_at_subpixel(&self, u: f64, v: f64) -> Option<Vector3<f64>> {
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let (u0, v0) = (u.floor() as usize, v.floor() as usize);
        let (fu, fv) = (u - u0 as f64, v - v0 as f64);
        if u0 >= self.width() || v0 >= self.height() {
            return None;
        }
        let mut inv = 0.0;
        for (du, wu) in [(0usize, 1.0 - fu), (1, fu)] {
            for (dv, wv) in [(0usize, 1.0 - fv), (1, fv)] {
                let w = wu * wv;
                if w == 0.0 {
                    continue;
                }
                let (uu, vv) = (u0 + du, v0 + dv);
                if uu >= self.width() || vv >= self.height() {
                    return None;
                }
                inv += w / self.depth_at(uu, vv)?;
            }
        }
        Some(self.intrinsics.ray(u, v) / inv)
    }

    pub fn valid_count(&self) -> usize {
        (0..self.height())
            .flat_map(|v| (0..self.width()).map(move |u| (u, v)))
            .filter(|&(u, v)| self.depth_at(u, v).is_some())
            .count()
    }
}

/// How raw 16-bit depth values encode millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    Millimeters,
    /// SUN3D stores millimeters rotated left by three bits.
    Sun3dShift,
}

impl std::str::FromStr for DepthMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "millimeters" | "mm" => Ok(Self::Millimeters),
            "sun3d_shift" | "sun3d" => Ok(Self::Sun3dShift),
            other => Err(format!("unknown depth mode '{other}'")),
        }
    }
}

/// Inverse of the SUN3D decoding: rotates millimeters left by three bits.
pub fn encode_sun3d(millimeters: u16) -> u16 {
    millimeters.rotate_left(3)
}

pub fn decode_raw(raw: u16, mode: DepthMode) -> f32 {
    let mm = match mode {
        DepthMode::Millimeters => raw,
        DepthMode::Sun3dShift => raw.rotate_right(3),
    };
    let m = mm as f32 / 1000.0;
    if m as f64 > MAX_VALID_DEPTH {
        0.0
    } else {
        m
    }
}

pub fn encode_raw(meters: f32, mode: DepthMode) -> u16 {
    let mm = if meters > 0.0 { (meters * 1000.0).round().clamp(0.0, 65535.0) as u16 } else { 0 };
    match mode {
        DepthMode::Millimeters => mm,
        DepthMode::Sun3dShift => encode_sun3d(mm),
    }
}

/// Reads a 16-bit grayscale PNG into a depth frame.
pub fn load_depth(
    path: &Path,
    mode: DepthMode,
    intrinsics: &Intrinsics,
    index: usize,
) -> Result<DepthFrame, IngestError> {
    let raw = read_png16(path)?;
    if raw.width != intrinsics.width || raw.height != intrinsics.height {
        return Err(IngestError::SizeMismatch {
            path: path.to_path_buf(),
            width: intrinsics.width,
            height: intrinsics.height,
            found_width: raw.width,
            found_height: raw.height,
        });
    }
    let depth = raw.data.iter().map(|&r| decode_raw(r, mode)).collect();
    Ok(DepthFrame::new(index, *intrinsics, depth))
}

pub fn save_depth(frame: &DepthFrame, path: &Path, mode: DepthMode) -> Result<(), IngestError> {
    let data: Vec<u16> = frame.depth.iter().map(|&d| encode_raw(d, mode)).collect();
    write_png16(path, frame.width(), frame.height(), &data)
}

struct Png16 {
    width: usize,
    height: usize,
    data: Vec<u16>,
}

fn read_png16(path: &Path) -> Result<Png16, IngestError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let png_err = |e: png::DecodingError| IngestError::Png { path: path.to_path_buf(), reason: e.to_string() };
    let mut reader = png::Decoder::new(std::io::BufReader::new(file)).read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| IngestError::PixelFormat { path: path.to_path_buf() })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(IngestError::PixelFormat { path: path.to_path_buf() });
    }
    let data = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok(Png16 { width: info.width as usize, height: info.height as usize, data })
}

fn write_png16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<(), IngestError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let png_err = |e: png::EncodingError| IngestError::Png { path: path.to_path_buf(), reason: e.to_string() };
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header().map_err(png_err)?;
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_be_bytes()).collect();
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads a frame-list manifest: one depth path per line, relative paths
/// resolved against the manifest's directory. Blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect())
}

pub fn write_manifest(path: &Path, entries: &[String]) -> Result<(), IngestError> {
    let mut f = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for e in entries {
        writeln!(f, "{e}").map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

/// Loads every frame named by a manifest.
pub fn load_sequence(
    manifest: &Path,
    intrinsics: &Intrinsics,
    mode: DepthMode,
) -> Result<Vec<DepthFrame>, IngestError> {
    read_manifest(manifest)?
        .iter()
        .enumerate()
        .map(|(i, p)| load_depth(p, mode, intrinsics, i))
        .collect()
}

/// A backprojected pixel with its estimated surface normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedPoint {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub pixel: (usize, usize),
}

/// Per-pixel camera-space points and normals of one frame.
#[derive(Debug, Clone)]
pub struct PointGrid {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Option<Vector3<f64>>>,
    pub normals: Vec<Option<Vector3<f64>>>,
}

impl PointGrid {
    pub fn point(&self, u: usize, v: usize) -> Option<Vector3<f64>> {
        self.points[v * self.width + u]
    }

    pub fn normal(&self, u: usize, v: usize) -> Option<Vector3<f64>> {
        self.normals[v * self.width + u]
    }
}

const NORMAL_RADIUS: isize = 2;
/// Longest tangent accepted, relative to the frontal footprint of the same pixel span.
const MAX_SLANT: f64 = 5.0;

/// Backprojects every valid pixel and estimates normals from central-difference
/// tangents accumulated over a 5x5 neighbourhood.
pub fn point_grid(frame: &DepthFrame) -> PointGrid {
    let (w, h) = (frame.width(), frame.height());
    let points: Vec<Option<Vector3<f64>>> = (0..h)
        .flat_map(|v| (0..w).map(move |u| (u, v)))
        .map(|(u, v)| frame.point_at(u, v))
        .collect();
    let at = |u: isize, v: isize| -> Option<Vector3<f64>> {
        if u < 0 || v < 0 || u >= w as isize || v >= h as isize {
            None
        } else {
            points[v as usize * w + u as usize]
        }
    };
    let r = NORMAL_RADIUS;
    let mut normals = vec![None; w * h];
    for v in 0..h as isize {
        for u in 0..w as isize {
            let Some(p) = at(u, v) else { continue };
            // Differences spanning a depth discontinuity are skipped.
            let max_span = MAX_SLANT * (2 * r) as f64 * p.z / frame.intrinsics.fx.min(frame.intrinsics.fy);
            let mut tu = Vector3::zeros();
            let mut tv = Vector3::zeros();
            let (mut nu, mut nv) = (0, 0);
            for o in -r..=r {
                if let (Some(a), Some(b)) = (at(u + r, v + o), at(u - r, v + o)) {
                    if (a - b).norm() < max_span {
                        tu += a - b;
                        nu += 1;
                    }
                }
                if let (Some(a), Some(b)) = (at(u + o, v + r), at(u + o, v - r)) {
                    if (a - b).norm() < max_span {
                        tv += a - b;
                        nv += 1;
                    }
                }
            }
            if nu == 0 || nv == 0 {
                continue;
            }
            let n = tu.cross(&tv);
            let len = n.norm();
            if len < 1e-12 {
                continue;
            }
            let mut n = n / len;
            if n.dot(&p) > 0.0 {
                n = -n;
            }
            normals[v as usize * w + u as usize] = Some(n);
        }
    }
    PointGrid { width: w, height: h, points, normals }
}

/// Oriented points for every pixel with a valid depth and a normal estimate.
pub fn backproject(frame: &DepthFrame) -> Vec<OrientedPoint> {
    let grid = point_grid(frame);
    let mut out = Vec::new();
    for v in 0..grid.height {
        for u in 0..grid.width {
            if let (Some(position), Some(normal)) = (grid.point(u, v), grid.normal(u, v)) {
                out.push(OrientedPoint { position, normal, pixel: (u, v) });
            }
        }
    }
    out
}

//! Binary PLY export of registered frames and structural proxies.

use fine2coarse::geom::RigidTransform;
use fine2coarse::ingest::{point_grid, DepthFrame};
use fine2coarse::pipeline::StructuralModel;
use nalgebra::Vector3;

/// A world-space point with its normal.
pub struct CloudPoint {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
}

/// A proxy plane drawn as a square patch.
pub struct Quad {
    pub corners: [Vector3<f64>; 4],
    pub normal: Vector3<f64>,
    pub color: [u8; 3],
}

const POINT_COLOR: [u8; 3] = [180, 180, 180];

/// Pixels on a `stride` grid that have both a depth and a normal, moved into
/// world space.
pub fn fuse(frames: &[DepthFrame], poses: &[RigidTransform], stride: usize) -> Vec<CloudPoint> {
    let mut out = Vec::new();
    for (frame, pose) in frames.iter().zip(poses) {
        let grid = point_grid(frame);
        for v in (0..grid.height).step_by(stride) {
            for u in (0..grid.width).step_by(stride) {
                if let (Some(p), Some(n)) = (grid.point(u, v), grid.normal(u, v)) {
                    out.push(CloudPoint { position: pose.transform_point(&p), normal: pose.transform_vector(&n) });
                }
            }
        }
    }
    out
}

fn proxy_color(id: u32) -> [u8; 3] {
    // Golden-ratio hue steps keep neighbouring ids apart.
    let h = (id as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// One square per parent proxy, centred on its support and sized to cover it.
pub fn proxy_quads(model: &StructuralModel) -> Vec<Quad> {
    model
        .proxies
        .iter()
        .map(|p| {
            let n = Vector3::from(p.normal).normalize();
            let origin = Vector3::from(p.point);
            let project = |x: Vector3<f64>| x - n * n.dot(&(x - origin));
            let centre = if p.support.is_empty() {
                origin
            } else {
                project(p.support.iter().map(|(c, _)| Vector3::from(*c)).sum::<Vector3<f64>>() / p.support.len() as f64)
            };
            let half = p
                .support
                .iter()
                .map(|(c, r)| (project(Vector3::from(*c)) - centre).norm() + r)
                .fold(0.25, f64::max);
            let seed = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let a = n.cross(&seed).normalize() * half;
            let b = n.cross(&a);
            Quad { corners: [centre - a - b, centre + a - b, centre + a + b, centre - a + b], normal: n, color: proxy_color(p.id) }
        })
        .collect()
}

/// Serializes points and quads as `binary_little_endian` PLY.
pub fn to_ply(points: &[CloudPoint], quads: &[Quad], config_hash: Option<&str>) -> Vec<u8> {
    let vertices = points.len() + 4 * quads.len();
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("comment config_hash {}\n", config_hash.unwrap_or("none")));
    header.push_str(&format!("element vertex {vertices}\n"));
    for p in ["x", "y", "z", "nx", "ny", "nz"] {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    header.push_str(&format!("element face {}\n", quads.len()));
    header.push_str("property list uchar int vertex_indices\nend_header\n");
    let mut out = header.into_bytes();
    let mut vertex = |p: &Vector3<f64>, n: &Vector3<f64>, c: [u8; 3]| {
        for x in p.iter().chain(n.iter()) {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        out.extend_from_slice(&c);
    };
    for p in points {
        vertex(&p.position, &p.normal, POINT_COLOR);
    }
    for q in quads {
        for c in &q.corners {
            vertex(c, &q.normal, q.color);
        }
    }
    for (i, _) in quads.iter().enumerate() {
        out.push(4);
        let base = (points.len() + 4 * i) as i32;
        for k in 0..4 {
            out.extend_from_slice(&(base + k).to_le_bytes());
        }
    }
    out
}

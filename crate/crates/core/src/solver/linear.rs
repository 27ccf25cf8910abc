//! Block-sparse normal equations and their preconditioned conjugate-gradient solve.

use std::collections::HashMap;

use nalgebra::{Matrix6, Vector6};

/// Symmetric block-sparse matrix of 6x6 blocks (upper triangle stored) with a
/// right-hand side.
#[derive(Debug, Clone)]
pub(crate) struct BlockSystem {
    pub diag: Vec<Matrix6<f64>>,
    /// Off-diagonal blocks `(row, col, block)` with `row < col`, in insertion order.
    pub off: Vec<(usize, usize, Matrix6<f64>)>,
    index: HashMap<(usize, usize), usize>,
    pub rhs: Vec<Vector6<f64>>,
}

impl BlockSystem {
    pub fn new(blocks: usize) -> Self {
        Self {
            diag: vec![Matrix6::zeros(); blocks],
            off: Vec::new(),
            index: HashMap::new(),
            rhs: vec![Vector6::zeros(); blocks],
        }
    }

    pub fn blocks(&self) -> usize {
        self.diag.len()
    }

    /// Adds `m` at block `(i, j)`; `(j, i)` receives the transpose implicitly.
    pub fn add(&mut self, i: usize, j: usize, m: &Matrix6<f64>) {
        if i == j {
            self.diag[i] += m;
            return;
        }
        let (r, c, m) = if i < j { (i, j, *m) } else { (j, i, m.transpose()) };
        let k = *self.index.entry((r, c)).or_insert_with(|| {
            self.off.push((r, c, Matrix6::zeros()));
            self.off.len() - 1
        });
        self.off[k].2 += m;
    }

    /// `y = (A + diag(damping)) x`.
    pub fn apply(&self, x: &[Vector6<f64>], damping: &[Vector6<f64>], y: &mut [Vector6<f64>]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.diag[i] * x[i] + damping[i].component_mul(&x[i]);
        }
        for (r, c, m) in &self.off {
            y[*r] += m * x[*c];
            y[*c] += m.tr_mul(&x[*r]);
        }
    }
}

/// Preconditioner: a banded Cholesky factor over the first `banded` blocks
/// (poses) and independent 6x6 factors for the remaining blocks (proxies).
pub(crate) struct Preconditioner {
    dim: usize,
    half_band: usize,
    /// Row `i` holds `L[i][i - half_band ..= i]`.
    band: Vec<f64>,
    tail: Vec<Matrix6<f64>>,
    banded: usize,
}

impl Preconditioner {
    /// Keeps blocks `(i, j)` among the first `banded` blocks with `|i - j| <= bandwidth`.
    pub fn new(sys: &BlockSystem, damping: &[Vector6<f64>], banded: usize, bandwidth: usize) -> Self {
        let dim = 6 * banded;
        let half_band = (6 * (bandwidth + 1) - 1).min(dim.saturating_sub(1));
        let width = half_band + 1;
        let mut band = vec![0.0; dim * width];
        // Entry (i, j), j <= i, lives at i * width + (j + half_band - i).
        let at = |i: usize, j: usize| i * width + j + half_band - i;
        for b in 0..banded {
            let d = sys.diag[b];
            for r in 0..6 {
                for c in 0..=r {
                    band[at(6 * b + r, 6 * b + c)] = d[(r, c)] + if r == c { damping[b][r] } else { 0.0 };
                }
            }
        }
        for (r, c, m) in &sys.off {
            if *c < banded && c - r <= bandwidth {
                // Lower triangle block (c, r) = m^T.
                for i in 0..6 {
                    for j in 0..6 {
                        band[at(6 * c + i, 6 * r + j)] = m[(j, i)];
                    }
                }
            }
        }
        // In-place banded Cholesky.
        for i in 0..dim {
            let lo = i.saturating_sub(half_band);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(half_band));
                let mut s = band[at(i, j)];
                for k in klo..j {
                    s -= band[at(i, k)] * band[at(j, k)];
                }
                band[at(i, j)] = if i == j { s.max(1e-300).sqrt() } else { s / band[at(j, j)] };
            }
        }
        let tail = (banded..sys.blocks())
            .map(|b| {
                let m = sys.diag[b] + Matrix6::from_diagonal(&damping[b]);
                m.cholesky().map(|c| c.l()).unwrap_or_else(|| Matrix6::from_diagonal(&m.diagonal().map(|v| v.max(1e-300).sqrt())))
            })
            .collect();
        Self { dim, half_band, band, tail, banded }
    }

    /// `z = M^-1 r`.
    pub fn solve(&self, r: &[Vector6<f64>], z: &mut [Vector6<f64>]) {
        let width = self.half_band + 1;
        let at = |i: usize, j: usize| i * width + j + self.half_band - i;
        let mut y = vec![0.0; self.dim];
        for i in 0..self.dim {
            let mut s = r[i / 6][i % 6];
            for k in i.saturating_sub(self.half_band)..i {
                s -= self.band[at(i, k)] * y[k];
            }
            y[i] = s / self.band[at(i, i)];
        }
        for i in (0..self.dim).rev() {
            let mut s = y[i];
            for k in i + 1..(i + self.half_band + 1).min(self.dim) {
                s -= self.band[at(k, i)] * y[k];
            }
            y[i] = s / self.band[at(i, i)];
        }
        for i in 0..self.dim {
            z[i / 6][i % 6] = y[i];
        }
        for (k, l) in self.tail.iter().enumerate() {
            let b = self.banded + k;
            let w = l.solve_lower_triangular(&r[b]).unwrap_or_else(Vector6::zeros);
            z[b] = l.tr_solve_lower_triangular(&w).unwrap_or_else(Vector6::zeros);
        }
    }
}

fn dot(a: &[Vector6<f64>], b: &[Vector6<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

/// Outcome of a conjugate-gradient solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Solves `(A + diag(damping)) x = rhs` by preconditioned conjugate gradients from `x = 0`.
pub(crate) fn pcg(
    sys: &BlockSystem,
    damping: &[Vector6<f64>],
    pre: &Preconditioner,
    max_iterations: usize,
    tolerance: f64,
) -> (Vec<Vector6<f64>>, CgReport) {
    let n = sys.blocks();
    let mut x = vec![Vector6::zeros(); n];
    let mut r = sys.rhs.clone();
    let norm_b = dot(&r, &r).sqrt();
    if norm_b == 0.0 {
        return (x, CgReport { iterations: 0, relative_residual: 0.0 });
    }
    let mut z = vec![Vector6::zeros(); n];
    pre.solve(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![Vector6::zeros(); n];
    let mut rel = 1.0;
    let mut it = 0;
    while it < max_iterations {
        sys.apply(&p, damping, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        it += 1;
        rel = dot(&r, &r).sqrt() / norm_b;
        if rel <= tolerance {
            break;
        }
        pre.solve(&r, &mut z);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    (x, CgReport { iterations: it, relative_residual: rel })
}

//! Kernel point sets: the origin plus `L − 1` directions on the unit sphere.
//!
//! The kernel points fix the canonical slot order that neighbors are
//! permuted into. Slot 0 is always the origin (the center point itself).

use std::f64::consts::PI;

use crate::error::{ensure, Result};
use crate::numkit::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct KernelLattice {
    points: Matrix,
}

/// Nearest-neighbor angle statistics over the sphere points of a lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformityStats {
    pub min_angle: f64,
    pub max_angle: f64,
    /// Population standard deviation of the nearest-neighbor angles.
    pub angle_std: f64,
}

impl KernelLattice {
    /// Wraps an `L × 3` matrix. Row 0 must be the origin and the other rows
    /// must have unit norm.
    pub fn from_points(points: Matrix) -> Result<Self> {
        ensure!(points.cols() == 3, "kernel points must be 3-D");
        ensure!(points.rows() >= 2, "need at least two kernel points");
        ensure!(
            points.row(0) == [0.0, 0.0, 0.0],
            "kernel point 0 must be the origin"
        );
        for l in 1..points.rows() {
            let n = norm(points.row(l));
            ensure!((n - 1.0).abs() <= 1e-9, "kernel point {l} has norm {n}");
        }
        Ok(Self { points })
    }

    /// Number of kernel points L, the origin included.
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn point(&self, l: usize) -> [f64; 3] {
        let r = self.points.row(l);
        [r[0], r[1], r[2]]
    }

    /// Mutable access for the learnable-kernel ablation. Callers keep row 0
    /// at the origin.
    pub(crate) fn points_mut(&mut self) -> &mut Matrix {
        &mut self.points
    }

    /// Writes "x y z" per line with 17 significant digits.
    pub fn to_ascii(&self) -> String {
        let mut s = String::new();
        for l in 0..self.len() {
            let [x, y, z] = self.point(l);
            s.push_str(&format!("{x:.16e} {y:.16e} {z:.16e}\n"));
        }
        s
    }
}

/// Origin followed by a golden-angle spiral with equally spaced heights:
/// for `m = 0..L−1`, `z = 1 − (2m+1)/(L−1)`, `θ = m·π(3−√5)`.
pub fn fibonacci_lattice(count: usize) -> Result<KernelLattice> {
    ensure!(count >= 2, "kernel lattice needs L >= 2, got {count}");
    let sphere = count - 1;
    let golden_angle = PI * (3.0 - 5f64.sqrt());
    let mut points = Matrix::zeros(count, 3);
    for m in 0..sphere {
        let z = 1.0 - (2 * m + 1) as f64 / sphere as f64;
        let r = (1.0 - z * z).sqrt();
        let theta = m as f64 * golden_angle;
        let row = points.row_mut(m + 1);
        row[0] = r * theta.cos();
        row[1] = r * theta.sin();
        row[2] = z;
    }
    Ok(KernelLattice { points })
}

/// Origin plus `L − 1` directions drawn uniformly on the sphere by
/// normalizing Gaussian triples.
pub fn random_lattice(count: usize, rng: &mut Rng) -> Result<KernelLattice> {
    ensure!(count >= 2, "kernel lattice needs L >= 2, got {count}");
    let mut points = Matrix::zeros(count, 3);
    for l in 1..count {
        let v = loop {
            let v = [rng.normal(), rng.normal(), rng.normal()];
            if norm(&v) > 1e-12 {
                break v;
            }
        };
        let n = norm(&v);
        let row = points.row_mut(l);
        for c in 0..3 {
            row[c] = v[c] / n;
        }
    }
    Ok(KernelLattice { points })
}

/// Angular nearest-neighbor statistics over rows `1..L` (the origin is
/// ignored). Requires at least two sphere points.
pub fn uniformity_stats(kernel: &KernelLattice) -> Result<UniformityStats> {
    ensure!(kernel.len() >= 3, "uniformity needs L >= 3");
    let dirs: Vec<[f64; 3]> = (1..kernel.len()).map(|l| kernel.point(l)).collect();
    let nearest: Vec<f64> = dirs
        .iter()
        .enumerate()
        .map(|(a, pa)| {
            dirs.iter()
                .enumerate()
                .filter(|&(b, _)| b != a)
                .map(|(_, pb)| angle_between(pa, pb))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let count = nearest.len() as f64;
    let mean = nearest.iter().sum::<f64>() / count;
    let var = nearest.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / count;
    Ok(UniformityStats {
        min_angle: nearest.iter().copied().fold(f64::INFINITY, f64::min),
        max_angle: nearest.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        angle_std: var.sqrt(),
    })
}

fn norm(v: &[f64]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn angle_between(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let c = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (norm(a) * norm(b));
    c.clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points() {
        let k = fibonacci_lattice(2).unwrap();
        assert_eq!(k.point(0), [0.0, 0.0, 0.0]);
        assert_eq!(k.point(1), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn three_points_heights() {
        let k = fibonacci_lattice(3).unwrap();
        assert_eq!(k.point(1)[2], 0.5);
        assert_eq!(k.point(2)[2], -0.5);
        for l in 1..3 {
            assert!((norm(&k.point(l)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn count_below_two_rejected() {
        assert!(fibonacci_lattice(1).is_err());
        assert!(fibonacci_lattice(0).is_err());
        assert!(random_lattice(1, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn heights_equally_spaced() {
        let k = fibonacci_lattice(32).unwrap();
        let step = 2.0 / 31.0;
        for l in 2..32 {
            let dz = k.point(l - 1)[2] - k.point(l)[2];
            assert!((dz - step).abs() < 1e-12);
        }
    }

    #[test]
    fn paper_sizes_have_distinct_points() {
        for count in [16, 32] {
            let k = fibonacci_lattice(count).unwrap();
            let s = uniformity_stats(&k).unwrap();
            assert!(s.min_angle > 0.0);
            for a in 0..count {
                for b in a + 1..count {
                    assert_ne!(k.point(a), k.point(b));
                }
            }
        }
    }

    #[test]
    fn two_sphere_points_share_their_mutual_angle() {
        let k = fibonacci_lattice(3).unwrap();
        let s = uniformity_stats(&k).unwrap();
        let mutual = angle_between(&k.point(1), &k.point(2));
        assert_eq!(s.min_angle, mutual);
        assert_eq!(s.max_angle, mutual);
        assert_eq!(s.angle_std, 0.0);
    }

    #[test]
    fn antipodal_pair() {
        let pts = Matrix::from_rows(&[[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]).unwrap();
        let k = KernelLattice::from_points(pts).unwrap();
        let s = uniformity_stats(&k).unwrap();
        assert!((s.min_angle - PI).abs() < 1e-15);
    }

    #[test]
    fn random_lattice_is_seeded_and_unit() {
        let a = random_lattice(33, &mut Rng::new(9)).unwrap();
        let b = random_lattice(33, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        for l in 1..33 {
            assert!((norm(&a.point(l)) - 1.0).abs() < 1e-12);
        }
        assert_eq!(a.point(0), [0.0; 3]);
    }

    #[test]
    fn random_directions_are_centered() {
        // Monte-Carlo mean of 10⁴ uniform directions: std per coordinate is
        // 1/√(3·10⁴) ≈ 0.0058, so 0.05 is a ~9σ band.
        let k = random_lattice(10_001, &mut Rng::new(11)).unwrap();
        let mut mean = [0.0; 3];
        for l in 1..k.len() {
            let p = k.point(l);
            for c in 0..3 {
                mean[c] += p[c] / 10_000.0;
            }
        }
        assert!(mean.iter().all(|m| m.abs() < 0.05), "{mean:?}");
    }

    #[test]
    fn ascii_has_one_line_per_point() {
        let text = fibonacci_lattice(5).unwrap().to_ascii();
        assert_eq!(text.lines().count(), 5);
        let first: Vec<f64> = text
            .lines()
            .nth(3)
            .unwrap()
            .split_whitespace()
            .map(|t| t.parse().unwrap())
            .collect();
        assert_eq!(first, fibonacci_lattice(5).unwrap().point(3).to_vec());
    }
}

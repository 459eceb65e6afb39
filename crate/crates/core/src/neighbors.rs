//! Point clouds, K-nearest-neighbor tables and random downsampling.
//!
//! Every neighbor row starts with the point itself, followed by the other
//! points by increasing Euclidean distance (ties broken by lower index).
//! When a cloud has fewer points than `k`, rows are padded with the self
//! index so that shapes stay static.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::numkit::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Matrix,
    features: Option<Matrix>,
}

impl PointCloud {
    pub fn new(coords: Matrix) -> Result<Self> {
        ensure!(
            coords.cols() == 3,
            "point coordinates must be n x 3, got {} columns",
            coords.cols()
        );
        coords.check_finite("point coordinates")?;
        Ok(Self {
            coords,
            features: None,
        })
    }

    pub fn from_points(points: &[[f64; 3]]) -> Result<Self> {
        if points.is_empty() {
            return Self::new(Matrix::zeros(0, 3));
        }
        Self::new(Matrix::from_rows(points)?)
    }

    pub fn with_features(mut self, features: Matrix) -> Result<Self> {
        ensure!(
            features.rows() == self.len(),
            "features have {} rows for {} points",
            features.rows(),
            self.len()
        );
        features.check_finite("point features")?;
        self.features = Some(features);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.rows() == 0
    }

    pub fn coords(&self) -> &Matrix {
        &self.coords
    }

    pub fn coords_mut(&mut self) -> &mut Matrix {
        &mut self.coords
    }

    pub fn features(&self) -> Option<&Matrix> {
        self.features.as_ref()
    }

    pub fn feature_width(&self) -> usize {
        self.features.as_ref().map_or(0, Matrix::cols)
    }

    #[inline]
    pub fn point(&self, i: usize) -> [f64; 3] {
        let r = self.coords.row(i);
        [r[0], r[1], r[2]]
    }

    /// Keeps the given rows (coordinates and features), in order.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            coords: self.coords.gather_rows(idx),
            features: self.features.as_ref().map(|f| f.gather_rows(idx)),
        }
    }
}

/// Per-point neighbor table, `n × k`, self in column 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    k: usize,
    idx: Vec<usize>,
}

impl NeighborIndex {
    /// Validates and wraps a row-major `n × k` table.
    pub fn from_rows(k: usize, idx: Vec<usize>) -> Result<Self> {
        ensure!(k >= 1, "k must be at least 1");
        ensure!(idx.len() % k == 0, "index length not a multiple of k");
        let n = idx.len() / k;
        for (i, row) in idx.chunks_exact(k).enumerate() {
            ensure!(row[0] == i, "row {i} does not start with itself");
            ensure!(
                row.iter().all(|&j| j < n),
                "row {i} has an out-of-range index"
            );
        }
        Ok(Self { k, idx })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.idx.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[usize] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.idx
    }

    /// Shuffles slots `1..k` of every row, leaving the self slot in place.
    pub fn shuffle_rows(&mut self, rng: &mut Rng) {
        for row in self.idx.chunks_exact_mut(self.k) {
            rng.shuffle(&mut row[1..]);
        }
    }
}

/// Indices kept by [`random_downsample`], relative to the input cloud.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMap {
    pub kept: Vec<usize>,
    pub ratio: usize,
}

#[inline]
pub(crate) fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Candidate ordered by (distance², index).
#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    j: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.j.cmp(&other.j))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn write_row(row: &mut [usize], i: usize, mut nearest: Vec<Candidate>) {
    nearest.sort_unstable();
    row[0] = i;
    for (s, slot) in row[1..].iter_mut().enumerate() {
        *slot = nearest.get(s).map_or(i, |c| c.j);
    }
}

/// Exact KNN by scanning all pairs.
pub fn knn_bruteforce(cloud: &PointCloud, k: usize) -> Result<NeighborIndex> {
    ensure!(k >= 1, "k must be at least 1");
    let n = cloud.len();
    ensure!(n >= 1, "KNN on an empty cloud");
    let coords = cloud.coords();
    let others = k - 1;
    let mut idx = vec![0usize; n * k];
    idx.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        let pi = coords.row(i);
        let mut cands: Vec<Candidate> = (0..n)
            .filter(|&j| j != i)
            .map(|j| Candidate {
                d2: dist2(pi, coords.row(j)),
                j,
            })
            .collect();
        if others < cands.len() && others > 0 {
            cands.select_nth_unstable(others - 1);
            cands.truncate(others);
        } else if others == 0 {
            cands.clear();
        }
        write_row(row, i, cands);
    });
    Ok(NeighborIndex { k, idx })
}

struct Grid {
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    start: Vec<usize>,
    members: Vec<usize>,
}

impl Grid {
    fn build(coords: &Matrix, requested_cell: f64) -> Grid {
        let n = coords.rows();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for i in 0..n {
            for c in 0..3 {
                lo[c] = lo[c].min(coords[(i, c)]);
                hi[c] = hi[c].max(coords[(i, c)]);
            }
        }
        // Cap the cell count near n so sparse clouds do not allocate huge grids.
        let max_cells = (4 * n + 64) as f64;
        let mut cell = requested_cell;
        loop {
            let count: f64 = (0..3)
                .map(|c| ((hi[c] - lo[c]) / cell).floor() + 1.0)
                .product();
            if count <= max_cells {
                break;
            }
            cell *= 2.0;
        }
        let dims = [0, 1, 2].map(|c| ((hi[c] - lo[c]) / cell).floor() as usize + 1);
        let mut grid = Grid {
            origin: lo,
            cell,
            dims,
            start: Vec::new(),
            members: Vec::new(),
        };
        let ncells = dims[0] * dims[1] * dims[2];
        let keys: Vec<usize> = (0..n)
            .map(|i| grid.linear(grid.cell_of(coords.row(i))))
            .collect();
        let mut counts = vec![0usize; ncells + 1];
        for &key in &keys {
            counts[key + 1] += 1;
        }
        for c in 0..ncells {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut members = vec![0usize; n];
        for (i, &key) in keys.iter().enumerate() {
            members[fill[key]] = i;
            fill[key] += 1;
        }
        grid.start = counts;
        grid.members = members;
        grid
    }

    fn cell_of(&self, p: &[f64]) -> [usize; 3] {
        [0, 1, 2].map(|c| {
            let v = ((p[c] - self.origin[c]) / self.cell).floor();
            (v.max(0.0) as usize).min(self.dims[c] - 1)
        })
    }

    fn linear(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    fn cell_members(&self, c: [usize; 3]) -> &[usize] {
        let key = self.linear(c);
        &self.members[self.start[key]..self.start[key + 1]]
    }

    fn max_shell(&self, c: [usize; 3]) -> usize {
        (0..3)
            .map(|a| c[a].max(self.dims[a] - 1 - c[a]))
            .max()
            .unwrap_or(0)
    }

    /// Calls `f` for every in-bounds cell at Chebyshev distance `s` from `c`.
    fn for_shell(&self, c: [usize; 3], s: usize, mut f: impl FnMut([usize; 3])) {
        let s = s as isize;
        let ci = c.map(|v| v as isize);
        let in_bounds = |v: isize, a: usize| v >= 0 && (v as usize) < self.dims[a];
        for dx in -s..=s {
            let x = ci[0] + dx;
            if !in_bounds(x, 0) {
                continue;
            }
            for dy in -s..=s {
                let y = ci[1] + dy;
                if !in_bounds(y, 1) {
                    continue;
                }
                let on_face = dx.abs() == s || dy.abs() == s;
                if on_face {
                    for dz in -s..=s {
                        let z = ci[2] + dz;
                        if in_bounds(z, 2) {
                            f([x as usize, y as usize, z as usize]);
                        }
                    }
                } else {
                    for z in [ci[2] - s, ci[2] + s] {
                        if in_bounds(z, 2) {
                            f([x as usize, y as usize, z as usize]);
                        }
                        if s == 0 {
                            break;
                        }
                    }
                }
            }
        }
    }
}

/// KNN accelerated by a uniform grid with the given cell edge length.
///
/// Produces exactly the same table as [`knn_bruteforce`]: shells of cells
/// are visited outward until the k-th candidate is strictly closer than
/// anything in an unvisited cell.
pub fn knn_grid(cloud: &PointCloud, k: usize, cell: f64) -> Result<NeighborIndex> {
    ensure!(k >= 1, "k must be at least 1");
    ensure!(
        cell > 0.0 && cell.is_finite(),
        "grid cell must be positive, got {cell}"
    );
    let n = cloud.len();
    ensure!(n >= 1, "KNN on an empty cloud");
    let coords = cloud.coords();
    let grid = Grid::build(coords, cell);
    let others = (k - 1).min(n - 1);
    let mut idx = vec![0usize; n * k];
    idx.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        let pi = coords.row(i);
        let home = grid.cell_of(pi);
        let last_shell = grid.max_shell(home);
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(others + 1);
        if others > 0 {
            for s in 0..=last_shell {
                grid.for_shell(home, s, |c| {
                    for &j in grid.cell_members(c) {
                        if j == i {
                            continue;
                        }
                        let cand = Candidate {
                            d2: dist2(pi, coords.row(j)),
                            j,
                        };
                        if heap.len() < others {
                            heap.push(cand);
                        } else if cand < *heap.peek().expect("heap is full") {
                            heap.pop();
                            heap.push(cand);
                        }
                    }
                });
                if heap.len() == others {
                    let reach = s as f64 * grid.cell;
                    let worst = heap.peek().expect("heap is full").d2;
                    if worst < reach * reach * (1.0 - 1e-9) {
                        break;
                    }
                }
            }
        }
        write_row(row, i, heap.into_vec());
    });
    Ok(NeighborIndex { k, idx })
}

/// Keeps `ceil(n / ratio)` points chosen uniformly without replacement.
/// Kept indices are returned in increasing order; `ratio = 1` is the identity.
pub fn random_downsample(
    cloud: &PointCloud,
    ratio: usize,
    rng: &mut Rng,
) -> Result<(PointCloud, SampleMap)> {
    ensure!(ratio >= 1, "downsampling ratio must be at least 1");
    let n = cloud.len();
    let kept: Vec<usize> = if ratio == 1 {
        (0..n).collect()
    } else {
        let m = n.div_ceil(ratio);
        let mut perm = rng.permutation(n);
        perm.truncate(m);
        perm.sort_unstable();
        perm
    };
    Ok((cloud.select(&kept), SampleMap { kept, ratio }))
}

/// Mean distance from each point to its nearest other point; a natural
/// scale for grid cells and kernel bandwidths.
pub fn mean_neighbor_distance(cloud: &PointCloud, nbr: &NeighborIndex) -> f64 {
    let n = nbr.len();
    if n == 0 || nbr.k() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let j = nbr.row(i)[1];
        total += dist2(cloud.coords().row(i), cloud.coords().row(j)).sqrt();
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = Rng::new(seed);
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.uniform(), rng.uniform(), rng.uniform()])
            .collect();
        PointCloud::from_points(&pts).unwrap()
    }

    #[test]
    fn collinear_hand_table() {
        let cloud =
            PointCloud::from_points(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
        let nbr = knn_bruteforce(&cloud, 2).unwrap();
        assert_eq!(nbr.row(1), &[1, 0]);
        assert_eq!(nbr.row(2), &[2, 1]);
        assert_eq!(nbr.row(0), &[0, 1]);
    }

    #[test]
    fn k1_is_self_only() {
        let cloud = random_cloud(20, 1);
        let nbr = knn_bruteforce(&cloud, 1).unwrap();
        for i in 0..20 {
            assert_eq!(nbr.row(i), &[i]);
        }
        assert_eq!(knn_grid(&cloud, 1, 0.1).unwrap(), nbr);
    }

    #[test]
    fn duplicates_break_ties_by_index() {
        let cloud =
            PointCloud::from_points(&[[0.0; 3], [0.0; 3], [0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let nbr = knn_bruteforce(&cloud, 3).unwrap();
        assert_eq!(nbr.row(0), &[0, 1, 2]);
        assert_eq!(nbr.row(2), &[2, 0, 1]);
        assert_eq!(nbr.row(3), &[3, 0, 1]);
        assert_eq!(knn_grid(&cloud, 3, 0.5).unwrap(), nbr);
    }

    #[test]
    fn short_clouds_pad_with_self() {
        let cloud = PointCloud::from_points(&[[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let nbr = knn_bruteforce(&cloud, 4).unwrap();
        assert_eq!(nbr.row(0), &[0, 1, 0, 0]);
        assert_eq!(nbr.row(1), &[1, 0, 1, 1]);
        assert_eq!(knn_grid(&cloud, 4, 0.3).unwrap(), nbr);
    }

    #[test]
    fn empty_cloud_rejected() {
        let cloud = PointCloud::from_points(&[]).unwrap();
        assert!(knn_bruteforce(&cloud, 3).is_err());
        assert!(knn_grid(&cloud, 3, 0.1).is_err());
    }

    #[test]
    fn grid_rejects_nonpositive_cell() {
        let cloud = random_cloud(5, 2);
        assert!(knn_grid(&cloud, 2, 0.0).is_err());
        assert!(knn_grid(&cloud, 2, -1.0).is_err());
    }

    #[test]
    fn grid_matches_bruteforce() {
        for (seed, n) in [(3, 10), (4, 100), (5, 500)] {
            let cloud = random_cloud(n, seed);
            for k in [1, 2, 8, 16] {
                for cell in [0.05, 0.2, 5.0] {
                    assert_eq!(
                        knn_grid(&cloud, k, cell).unwrap(),
                        knn_bruteforce(&cloud, k).unwrap(),
                        "n={n} k={k} cell={cell}"
                    );
                }
            }
        }
    }

    #[test]
    fn rows_sorted_by_distance() {
        let cloud = random_cloud(200, 6);
        let nbr = knn_bruteforce(&cloud, 12).unwrap();
        for i in 0..200 {
            let d: Vec<f64> = nbr
                .row(i)
                .iter()
                .map(|&j| dist2(cloud.coords().row(i), cloud.coords().row(j)))
                .collect();
            assert!(d.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn downsample_counts_and_identity() {
        let cloud = random_cloud(8, 7);
        let (same, map) = random_downsample(&cloud, 1, &mut Rng::new(0)).unwrap();
        assert_eq!(same, cloud);
        assert_eq!(map.kept, (0..8).collect::<Vec<_>>());
        let (small, map) = random_downsample(&cloud, 4, &mut Rng::new(0)).unwrap();
        assert_eq!(small.len(), 2);
        assert_eq!(map.kept.len(), 2);
        let (_, again) = random_downsample(&cloud, 4, &mut Rng::new(0)).unwrap();
        assert_eq!(map, again);
        let (_, odd) = random_downsample(&random_cloud(9, 1), 4, &mut Rng::new(0)).unwrap();
        assert_eq!(odd.kept.len(), 3);
    }

    #[test]
    fn downsample_keeps_features() {
        let cloud = random_cloud(10, 8);
        let feats = Matrix::from_vec(10, 1, (0..10).map(f64::from).collect()).unwrap();
        let cloud = cloud.with_features(feats).unwrap();
        let (small, map) = random_downsample(&cloud, 3, &mut Rng::new(5)).unwrap();
        for (row, &src) in map.kept.iter().enumerate() {
            assert_eq!(small.features().unwrap()[(row, 0)], src as f64);
            assert_eq!(small.point(row), cloud.point(src));
        }
    }
}

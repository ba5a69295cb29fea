//! Evaluation: Chamfer distance, volumetric IoU and segmentation labels.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::MetricsError;
use crate::fitting::bounding_box;
use crate::geometry::{implicit_value, mesh, sample_surface, to_canonical, SuperquadricParams};
use crate::inference::AbstractionResult;

/// Axis-aligned boolean voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub resolution: [usize; 3],
    pub origin: Vector3<f64>,
    pub cell_size: Vector3<f64>,
    pub occupancy: Vec<bool>,
}

impl OccupancyGrid {
    /// Empty grid covering `[lo, hi]`.
    pub fn new(lo: Vector3<f64>, hi: Vector3<f64>, resolution: [usize; 3]) -> Self {
        assert!(resolution.iter().all(|&r| r >= 2), "resolution must be at least 2 per axis");
        let extent = (hi - lo).map(|e| e.max(1e-9));
        let cell_size = Vector3::new(
            extent.x / resolution[0] as f64,
            extent.y / resolution[1] as f64,
            extent.z / resolution[2] as f64,
        );
        Self {
            resolution,
            origin: lo,
            cell_size,
            occupancy: vec![false; resolution.iter().product()],
        }
    }

    /// Empty cubic-resolution grid over the bounding box of `points`,
    /// inflated by `inflate` of its extent on every side.
    pub fn around(points: &[Vector3<f64>], resolution: usize, inflate: f64) -> Self {
        let (lo, hi) = bounding_box(points);
        let pad = (hi - lo).map(|e| e.max(1e-9)) * inflate;
        Self::new(lo - pad, hi + pad, [resolution; 3])
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.is_empty()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution[1] + j) * self.resolution[0] + i
    }

    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let i = idx % self.resolution[0];
        let j = (idx / self.resolution[0]) % self.resolution[1];
        (i, j, idx / (self.resolution[0] * self.resolution[1]))
    }

    pub fn cell_center(&self, idx: usize) -> Vector3<f64> {
        let (i, j, k) = self.coords(idx);
        self.origin
            + Vector3::new(
                (i as f64 + 0.5) * self.cell_size.x,
                (j as f64 + 0.5) * self.cell_size.y,
                (k as f64 + 0.5) * self.cell_size.z,
            )
    }

    /// Cell containing `x`, if inside the grid.
    pub fn cell_of(&self, x: &Vector3<f64>) -> Option<usize> {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let f = ((x[a] - self.origin[a]) / self.cell_size[a]).floor();
            if f < 0.0 || f >= self.resolution[a] as f64 {
                return None;
            }
            c[a] = f as usize;
        }
        Some(self.index(c[0], c[1], c[2]))
    }

    pub fn occupied(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    pub fn same_frame(&self, other: &Self) -> bool {
        self.resolution == other.resolution && self.origin == other.origin && self.cell_size == other.cell_size
    }

    /// Same frame, occupied where a cell centre is inside any component.
    pub fn rasterize(&self, components: &[SuperquadricParams]) -> Self {
        let mut out = self.clone();
        for (idx, cell) in out.occupancy.iter_mut().enumerate() {
            let x = self.cell_center(idx);
            *cell = components.iter().any(|c| inside(c, &x));
        }
        out
    }

    /// Solid occupancy of a closed sampled surface in this frame.
    ///
    /// Cells whose centre lies within a closing radius of a sample form a
    /// shell; the exterior is flood-filled from the grid boundary through the
    /// remaining cells, and shell cells nearer the exterior than the samples
    /// are handed back to it. Everything else is solid.
    ///
    /// The radius is `1.5·sqrt(ln N)` times the median nearest-neighbour
    /// spacing, which tracks the largest gaps of a random sampling, and at
    /// least half a cell diagonal.
    pub fn solid_from_surface(&self, points: &[Vector3<f64>]) -> Self {
        let mut out = self.clone();
        if points.is_empty() {
            return out;
        }
        let spread = 1.5 * (points.len() as f64).ln().max(1.0).sqrt();
        let radius = (spread * median_spacing(points)).max(0.5 * self.cell_size.norm());
        let r2 = radius * radius;
        let samples = point_tree(points);
        let shell: Vec<bool> = (0..self.len())
            .map(|idx| {
                let c = self.cell_center(idx);
                samples.nearest_one::<SquaredEuclidean>(&[c.x, c.y, c.z]).distance <= r2
            })
            .collect();

        let [nx, ny, nz] = self.resolution;
        let mut outside = vec![false; self.len()];
        let mut stack = Vec::new();
        for idx in 0..self.len() {
            let (i, j, k) = self.coords(idx);
            let border = i == 0 || j == 0 || k == 0 || i == nx - 1 || j == ny - 1 || k == nz - 1;
            if border && !shell[idx] {
                outside[idx] = true;
                stack.push(idx);
            }
        }
        while let Some(idx) = stack.pop() {
            for n in self.neighbours6(idx) {
                if !outside[n] && !shell[n] {
                    outside[n] = true;
                    stack.push(n);
                }
            }
        }

        // a shell cell is exterior when it sits closer to the nearest exterior
        // front cell than that front cell sits to the samples
        let front: Vec<usize> = (0..self.len())
            .filter(|&idx| outside[idx] && self.neighbours6(idx).any(|n| !outside[n]))
            .collect();
        let centers: Vec<Vector3<f64>> = front.iter().map(|&idx| self.cell_center(idx)).collect();
        let reach: Vec<f64> = centers
            .iter()
            .map(|c| samples.nearest_one::<SquaredEuclidean>(&[c.x, c.y, c.z]).distance.sqrt())
            .collect();
        let front_tree = point_tree(&centers);
        for (idx, cell) in out.occupancy.iter_mut().enumerate() {
            *cell = !outside[idx]
                && (front.is_empty() || !shell[idx] || {
                    let c = self.cell_center(idx);
                    let nearest = front_tree.nearest_one::<SquaredEuclidean>(&[c.x, c.y, c.z]);
                    nearest.distance.sqrt() >= reach[nearest.item as usize]
                });
        }
        out
    }

    fn neighbours6(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let (i, j, k) = self.coords(idx);
        let [nx, ny, nz] = self.resolution;
        let steps: [(isize, isize, isize); 6] = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
        steps.into_iter().filter_map(move |(di, dj, dk)| {
            let a = i.checked_add_signed(di).filter(|&a| a < nx)?;
            let b = j.checked_add_signed(dj).filter(|&b| b < ny)?;
            let c = k.checked_add_signed(dk).filter(|&c| c < nz)?;
            Some(self.index(a, b, c))
        })
    }
}

fn point_tree(points: &[Vector3<f64>]) -> ImmutableKdTree<f64, 3> {
    let coords: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
    ImmutableKdTree::new_from_slice(&coords)
}

/// Median distance from a point to its nearest other point; 0 below two points.
fn median_spacing(points: &[Vector3<f64>]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let tree = point_tree(points);
    let two = std::num::NonZero::new(2).expect("nonzero");
    let mut d: Vec<f64> = points
        .iter()
        .map(|p| {
            tree.nearest_n::<SquaredEuclidean>(&[p.x, p.y, p.z], two)
                .iter()
                .map(|n| n.distance)
                .fold(0.0, f64::max)
                .sqrt()
        })
        .collect();
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// Inside test: `F(to_canonical(x)) ≤ 1`. Points that cannot be untapered
/// are outside.
pub fn inside(theta: &SuperquadricParams, x: &Vector3<f64>) -> bool {
    to_canonical(theta, x).is_ok_and(|c| implicit_value(theta, &c) <= 1.0)
}

/// `|A ∩ B| / |A ∪ B|` of two grids in the same frame; 0 when both are empty.
pub fn grid_iou(a: &OccupancyGrid, b: &OccupancyGrid) -> Result<f64, MetricsError> {
    if !a.same_frame(b) {
        return Err(MetricsError::GridMismatch);
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.occupancy.iter().zip(&b.occupancy) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Volumetric IoU of the abstraction rasterized onto the ground-truth grid.
pub fn iou(result: &AbstractionResult, ground_truth: &OccupancyGrid) -> Result<f64, MetricsError> {
    if result.components.is_empty() {
        return Err(MetricsError::EmptyAbstraction);
    }
    let thetas: Vec<SuperquadricParams> = result.components.iter().map(|c| c.theta).collect();
    grid_iou(&ground_truth.rasterize(&thetas), ground_truth)
}

/// Splits `n` samples between components proportionally to their surface
/// areas (largest-remainder rounding).
pub fn allocate_by_area(components: &[SuperquadricParams], n: usize) -> Vec<usize> {
    let areas: Vec<f64> = components.iter().map(|c| mesh(c, 64).area()).collect();
    let total: f64 = areas.iter().sum();
    if components.is_empty() {
        return Vec::new();
    }
    if !(total > 0.0) {
        let mut out = vec![n / components.len(); components.len()];
        for slot in out.iter_mut().take(n % components.len()) {
            *slot += 1;
        }
        return out;
    }
    let exact: Vec<f64> = areas.iter().map(|a| a / total * n as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let missing = n - out.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        out[i] += 1;
    }
    out
}

/// `n` area-weighted surface samples of the whole abstraction.
pub fn sample_abstraction<R: Rng + ?Sized>(
    components: &[SuperquadricParams],
    n: usize,
    rng: &mut R,
) -> Vec<Vector3<f64>> {
    let counts = allocate_by_area(components, n);
    let mut out = Vec::with_capacity(n);
    for (c, &m) in components.iter().zip(&counts) {
        out.extend(sample_surface(c, m, rng));
    }
    out
}

/// Mean distance from each point of `from` to its nearest neighbour in `to`.
pub fn mean_nearest_distance(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> f64 {
    let tree = point_tree(to);
    let total: f64 = from
        .iter()
        .map(|p| tree.nearest_one::<SquaredEuclidean>(&[p.x, p.y, p.z]).distance.sqrt())
        .sum();
    total / from.len() as f64
}

/// Symmetric Chamfer distance between two point sets after mapping both with
/// the ground truth's bounding box onto the unit cube (uniform scale by the
/// longest side): the average of the two mean nearest-neighbour distances.
pub fn chamfer_between(samples: &[Vector3<f64>], ground_truth: &[Vector3<f64>]) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyAbstraction);
    }
    if ground_truth.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let (lo, hi) = bounding_box(ground_truth);
    let scale = (hi - lo).max();
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let norm = |p: &Vector3<f64>| (p - lo) / scale;
    let a: Vec<Vector3<f64>> = samples.iter().map(norm).collect();
    let b: Vec<Vector3<f64>> = ground_truth.iter().map(norm).collect();
    Ok(0.5 * (mean_nearest_distance(&a, &b) + mean_nearest_distance(&b, &a)))
}

/// Chamfer distance between `n_samples` area-weighted samples of the
/// abstraction and the ground-truth points, in normalized units.
pub fn chamfer_l1<R: Rng + ?Sized>(
    result: &AbstractionResult,
    ground_truth: &[Vector3<f64>],
    n_samples: usize,
    rng: &mut R,
) -> Result<f64, MetricsError> {
    if result.components.is_empty() || n_samples == 0 {
        return Err(MetricsError::EmptyAbstraction);
    }
    let thetas: Vec<SuperquadricParams> = result.components.iter().map(|c| c.theta).collect();
    chamfer_between(&sample_abstraction(&thetas, n_samples, rng), ground_truth)
}

/// Final labels re-indexed densely so that label 0 is the largest cluster.
/// Ties keep the original component order.
pub fn segmentation_labels(result: &AbstractionResult) -> Vec<usize> {
    let counts = result.counts();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut rank = vec![0; counts.len()];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r;
    }
    result.labels.iter().map(|&l| rank[l]).collect()
}

/// Fraction of points whose predicted label maps to their true label under
/// the best one-to-one matching of label values.
pub fn label_agreement(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    if predicted.is_empty() {
        return 1.0;
    }
    let kp = predicted.iter().max().map_or(0, |m| m + 1);
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kt]; kp];
    for (&p, &t) in predicted.iter().zip(truth) {
        table[p][t] += 1;
    }
    // the smaller side indexes the bitmask
    let (rows, cols) = if kt <= kp { (table, kt) } else { (transpose(&table, kt), kp) };
    let matched = if cols <= 16 {
        best_matching(&rows, cols)
    } else {
        greedy_matching(&rows)
    };
    matched as f64 / predicted.len() as f64
}

fn transpose(table: &[Vec<usize>], cols: usize) -> Vec<Vec<usize>> {
    (0..cols).map(|c| table.iter().map(|row| row[c]).collect()).collect()
}

/// Exact maximum-weight matching by DP over subsets of columns.
fn best_matching(rows: &[Vec<usize>], cols: usize) -> usize {
    let full = 1usize << cols;
    let mut best = vec![0usize; full];
    for row in rows {
        let mut next = best.clone();
        for mask in 0..full {
            for (c, &w) in row.iter().enumerate() {
                if mask & (1 << c) == 0 {
                    let m = mask | (1 << c);
                    next[m] = next[m].max(best[mask] + w);
                }
            }
        }
        best = next;
    }
    best.into_iter().max().unwrap_or(0)
}

fn greedy_matching(rows: &[Vec<usize>]) -> usize {
    let mut cells: Vec<(usize, usize, usize)> = rows
        .iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, &w)| (w, r, c)))
        .collect();
    cells.sort_by(|a, b| b.cmp(a));
    let mut used_r = vec![false; rows.len()];
    let mut used_c = vec![false; rows.first().map_or(0, Vec::len)];
    let mut total = 0;
    for (w, r, c) in cells {
        if !used_r[r] && !used_c[c] {
            used_r[r] = true;
            used_c[c] = true;
            total += w;
        }
    }
    total
}

/// Metrics as emitted by the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub chamfer_l1: f64,
    pub iou: f64,
    pub k: usize,
    pub per_cluster_counts: Vec<usize>,
}

/// Chamfer distance, IoU on a `iou_resolution³` grid over the ground truth's
/// bounding box inflated by 5%, and cluster sizes.
pub fn evaluate<R: Rng + ?Sized>(
    result: &AbstractionResult,
    ground_truth: &[Vector3<f64>],
    iou_resolution: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<MetricsReport, MetricsError> {
    if ground_truth.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let chamfer = chamfer_l1(result, ground_truth, n_samples, rng)?;
    let grid = OccupancyGrid::around(ground_truth, iou_resolution, 0.05).solid_from_surface(ground_truth);
    let mut counts = result.counts();
    counts.sort_by(|a, b| b.cmp(a));
    Ok(MetricsReport {
        chamfer_l1: chamfer,
        iou: iou(result, &grid)?,
        k: result.k(),
        per_cluster_counts: counts,
    })
}

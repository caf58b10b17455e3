//! Self-supervised training samples along LiDAR rays, PCA normals, and the
//! replay pool of recent scans.

use std::collections::VecDeque;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::geometry::Point3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledSample {
    /// World position, meters.
    pub position: Point3,
    /// Signed distance along the ray to its endpoint, meters. Positive on the
    /// sensor side.
    pub gt_sdf: f64,
    pub surface_band: bool,
    /// Unit surface normal of the ray's endpoint (surface samples only).
    pub normal: Option<Vector3<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub surface_samples: usize,
    pub free_samples: usize,
    /// Half-width of the surface band and margin kept free in front of it.
    pub band: f64,
    pub min_range: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            surface_samples: 4,
            free_samples: 2,
            band: 0.3,
            min_range: 0.5,
        }
    }
}

impl SamplerConfig {
    pub fn samples_per_ray(&self) -> usize {
        self.surface_samples + self.free_samples
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.band > 0.0) || !(self.min_range >= 0.0) {
            return Err(Error::InvalidParameter("band must be positive and min range non-negative".into()));
        }
        Ok(())
    }
}

/// Samples one ray. Returns `None` when the ray is too short to hold both
/// zones, i.e. `range <= min_range + band`.
pub fn sample_ray<R: Rng + ?Sized>(
    origin: &Point3,
    endpoint: &Point3,
    normal: Option<Vector3<f64>>,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Option<Vec<LabeledSample>> {
    let ray = endpoint - origin;
    let range = ray.norm();
    if !(range > cfg.min_range + cfg.band) {
        return None;
    }
    let dir = ray / range;
    let mut out = Vec::with_capacity(cfg.samples_per_ray());
    for _ in 0..cfg.surface_samples {
        let u = rng.random_range(-cfg.band..cfg.band);
        out.push(LabeledSample {
            position: endpoint + dir * u,
            gt_sdf: -u,
            surface_band: true,
            normal,
        });
    }
    for _ in 0..cfg.free_samples {
        let t = rng.random_range(cfg.min_range..range - cfg.band);
        out.push(LabeledSample {
            position: origin + dir * t,
            gt_sdf: range - t,
            surface_band: false,
            normal: None,
        });
    }
    Some(out)
}

/// Samples every ray from `origin` to the given world-frame endpoints.
/// Returns the samples and the number of skipped rays.
pub fn sample_scan<R: Rng + ?Sized>(
    origin: &Point3,
    endpoints: &[Point3],
    normals: &[Option<Vector3<f64>>],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> (Vec<LabeledSample>, usize) {
    debug_assert_eq!(endpoints.len(), normals.len());
    let mut samples = Vec::with_capacity(endpoints.len() * cfg.samples_per_ray());
    let mut skipped = 0;
    for (e, n) in endpoints.iter().zip(normals) {
        match sample_ray(origin, e, *n, cfg, rng) {
            Some(s) => samples.extend(s),
            None => skipped += 1,
        }
    }
    (samples, skipped)
}

/// Uniform-grid spatial hash for k-nearest-neighbor queries.
pub struct SpatialHash<'a> {
    points: &'a [Point3],
    cell: f64,
    cells: FxHashMap<[i64; 3], Vec<u32>>,
}

impl<'a> SpatialHash<'a> {
    pub fn new(points: &'a [Point3], cell: f64) -> Self {
        let mut cells: FxHashMap<[i64; 3], Vec<u32>> = FxHashMap::default();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i as u32);
        }
        Self { points, cell, cells }
    }

    fn key(p: &Point3, cell: f64) -> [i64; 3] {
        [
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        ]
    }

    /// Indices of the `k` nearest points to `q` (including `q` itself if it
    /// is in the set), nearest first. Ties break by index. Gives up after
    /// `max_rings` shells and returns what it found.
    pub fn knn(&self, q: &Point3, k: usize, max_rings: i64) -> Vec<u32> {
        let c = Self::key(q, self.cell);
        let mut found: Vec<(f64, u32)> = Vec::new();
        for r in 0..=max_rings {
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            for &i in ids {
                                found.push(((self.points[i as usize] - q).norm_squared(), i));
                            }
                        }
                    }
                }
            }
            // Anything in ring r+1 is at least r cells away.
            if found.len() >= k {
                found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let reach = r as f64 * self.cell;
                if found[k - 1].0 <= reach * reach {
                    break;
                }
            }
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found.truncate(k);
        found.into_iter().map(|(_, i)| i).collect()
    }
}

/// PCA normals from `k` nearest neighbors, oriented towards `sensor_origin`.
///
/// A normal is `None` when the neighborhood has rank below 2 (collinear or
/// coincident points).
pub fn estimate_normals(points: &[Point3], k: usize, sensor_origin: &Point3) -> Result<Vec<Option<Vector3<f64>>>> {
    if k < 3 || points.len() < k {
        return Err(Error::InvalidParameter(format!(
            "normal estimation needs k >= 3 and at least k points (k = {k}, {} points)",
            points.len()
        )));
    }
    let cell = neighbor_cell_size(points, k);
    let hash = SpatialHash::new(points, cell);
    let normals = points
        .iter()
        .map(|p| {
            let nn = hash.knn(p, k, 64);
            if nn.len() < 3 {
                return None;
            }
            let mean = nn.iter().map(|&i| points[i as usize]).sum::<Vector3<f64>>() / nn.len() as f64;
            let mut cov = Matrix3::zeros();
            for &i in &nn {
                let d = points[i as usize] - mean;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let mut order = [0usize, 1, 2];
            order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
            let (l1, l2) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
            if !(l2 > 0.0) || l1 <= 1e-10 * l2 {
                return None;
            }
            let mut n: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
            n.normalize_mut();
            if n.dot(&(sensor_origin - p)) < 0.0 {
                n = -n;
            }
            Some(n)
        })
        .collect();
    Ok(normals)
}

/// Cell edge giving roughly `k` points per cell at the cloud's mean density.
fn neighbor_cell_size(points: &[Point3], k: usize) -> f64 {
    let (mut lo, mut hi) = (points[0], points[0]);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let ext = hi - lo;
    // Scans are closer to surfaces than volumes, so use the area of the two
    // largest box extents.
    let mut e = [ext.x, ext.y, ext.z];
    e.sort_by(f64::total_cmp);
    let area = (e[1] * e[2]).max(1e-12);
    (area * k as f64 / points.len() as f64).sqrt().max(1e-6)
}

/// Sliding window of the last `window` scans' samples.
#[derive(Debug, Clone)]
pub struct ReplayPool {
    window: usize,
    scans: VecDeque<Vec<LabeledSample>>,
    total: usize,
}

impl ReplayPool {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            scans: VecDeque::with_capacity(window + 1),
            total: 0,
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Number of scans held.
    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn sample_count(&self) -> usize {
        self.total
    }

    pub fn scans(&self) -> impl Iterator<Item = &[LabeledSample]> {
        self.scans.iter().map(Vec::as_slice)
    }

    /// Adds one scan's samples, evicting the oldest scans beyond the window.
    pub fn push(&mut self, samples: Vec<LabeledSample>) {
        self.total += samples.len();
        self.scans.push_back(samples);
        while self.scans.len() > self.window {
            if let Some(old) = self.scans.pop_front() {
                self.total -= old.len();
            }
        }
    }

    pub fn clear(&mut self) {
        self.scans.clear();
        self.total = 0;
    }

    /// Sample by flat index over all held scans, oldest first.
    pub fn get(&self, mut index: usize) -> Option<&LabeledSample> {
        for s in &self.scans {
            if index < s.len() {
                return Some(&s[index]);
            }
            index -= s.len();
        }
        None
    }

    fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<LabeledSample> {
        if self.total == 0 {
            return Vec::new();
        }
        // Sorted draws let one pass over the scans resolve every index.
        let mut idx: Vec<(usize, usize)> = (0..n).map(|slot| (rng.random_range(0..self.total), slot)).collect();
        idx.sort_unstable();
        let mut out = vec![None; n];
        let mut offset = 0;
        let mut it = idx.into_iter().peekable();
        for s in &self.scans {
            while let Some(&(i, slot)) = it.peek() {
                if i >= offset + s.len() {
                    break;
                }
                out[slot] = Some(s[i - offset]);
                it.next();
            }
            offset += s.len();
        }
        out.into_iter().map(|s| s.expect("index within pool")).collect()
    }
}

/// Builds one training batch: `ceil(mix_ratio * batch_size)` samples from the
/// current scan and the rest from the pool, all drawn uniformly with
/// replacement. With an empty pool the whole batch comes from the current scan.
pub fn assemble_training_batch<R: Rng + ?Sized>(
    pool: &ReplayPool,
    current: &[LabeledSample],
    batch_size: usize,
    mix_ratio: f64,
    rng: &mut R,
) -> Vec<LabeledSample> {
    let n_current = if pool.is_empty() {
        batch_size
    } else if current.is_empty() {
        0
    } else {
        ((mix_ratio.clamp(0.0, 1.0) * batch_size as f64).ceil() as usize).min(batch_size)
    };
    let mut batch = Vec::with_capacity(batch_size);
    if !current.is_empty() {
        for _ in 0..n_current {
            batch.push(current[rng.random_range(0..current.len())]);
        }
    }
    batch.extend(pool.draw(batch_size - n_current, rng));
    batch
}

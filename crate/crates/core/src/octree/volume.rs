use arrayvec::ArrayVec;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustc_hash::{FxHashMap, FxHashSet};

use super::morton::{morton_decode, morton_encode_unchecked, MAX_COORD};
use crate::error::{Error, Result};
use crate::geometry::Point3;

pub const FEATURE_DIM: usize = 12;
pub const MAX_FEATURE_LEVELS: usize = 3;
pub const FEATURE_INIT_STD: f32 = 0.01;

pub type FeatureVector = [f32; FEATURE_DIM];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeParams {
    /// Total octree depth `L`.
    pub levels: u32,
    /// Edge length of a finest-level node, meters.
    pub leaf_size: f64,
    /// How many of the finest levels carry features (1 to 3).
    pub feature_levels: u32,
    /// World position mapped to the center of the `[-1, 1]` cube.
    pub origin: Vector3<f64>,
}

impl Default for VolumeParams {
    fn default() -> Self {
        Self {
            levels: 10,
            leaf_size: 0.2,
            feature_levels: 3,
            origin: Vector3::zeros(),
        }
    }
}

impl VolumeParams {
    pub fn validate(&self) -> Result<()> {
        if !(3..=21).contains(&self.levels) {
            return Err(Error::InvalidParameter(format!(
                "octree levels must lie in [3, 21], got {}",
                self.levels
            )));
        }
        if !(self.leaf_size > 0.0 && self.leaf_size.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "leaf size must be positive, got {}",
                self.leaf_size
            )));
        }
        if !(1..=MAX_FEATURE_LEVELS as u32).contains(&self.feature_levels) {
            return Err(Error::InvalidParameter(format!(
                "feature levels must lie in [1, 3], got {}",
                self.feature_levels
            )));
        }
        if !self.origin.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("origin must be finite".into()));
        }
        Ok(())
    }

    /// `1 / (L_f * 2^(L-1))`: maps meters to the unit cube.
    pub fn scale(&self) -> f64 {
        1.0 / (self.leaf_size * (1u64 << (self.levels - 1)) as f64)
    }

    /// Half-width of the representable cube, meters.
    pub fn half_extent(&self) -> f64 {
        1.0 / self.scale()
    }
}

/// Node and corner tables of one octree level.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LevelTable {
    pub level: u32,
    /// Node Morton code -> Morton codes of its 8 corners.
    pub nodes: FxHashMap<u64, [u64; 8]>,
    /// Corner Morton code -> row of the feature table.
    pub corners: FxHashMap<u64, u32>,
}

impl LevelTable {
    fn new(level: u32) -> Self {
        Self {
            level,
            ..Default::default()
        }
    }

    /// Cells per unit of scaled coordinate, `2^level`.
    pub fn resolution(&self) -> f64 {
        (1u64 << self.level) as f64
    }

    pub fn sorted_node_keys(&self) -> Vec<u64> {
        let mut keys: Vec<u64> = self.nodes.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    pub fn sorted_corner_keys(&self) -> Vec<u64> {
        let mut keys: Vec<u64> = self.corners.keys().copied().collect();
        keys.sort_unstable();
        keys
    }
}

/// Trilinear interpolation bookkeeping for one level.
#[derive(Debug, Clone, Copy)]
pub struct LevelInterp {
    pub level: u32,
    pub rows: [u32; 8],
    pub weights: [f64; 8],
    /// Gradient of each weight with respect to the scaled query position.
    pub weight_grads: [[f64; 3]; 8],
}

#[derive(Debug, Clone)]
pub struct FeatureQuery {
    /// Sum over levels of the interpolated features.
    pub combined: FeatureVector,
    pub levels: ArrayVec<LevelInterp, MAX_FEATURE_LEVELS>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InsertReport {
    pub new_nodes: usize,
    pub new_features: Vec<u32>,
    /// Points outside the representable cube.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MergeReport {
    pub nodes_added: usize,
    pub corners_added: usize,
}

/// Hierarchical latent feature store: per-level node table `N`, corner table `G`
/// and a shared feature table `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    params: VolumeParams,
    scale: f64,
    /// Active levels, finest first.
    tables: Vec<LevelTable>,
    features: Vec<FeatureVector>,
}

/// Corner `c` offsets by `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
#[inline]
fn corner_offset(c: usize) -> [u32; 3] {
    [(c & 1) as u32, ((c >> 1) & 1) as u32, ((c >> 2) & 1) as u32]
}

impl FeatureVolume {
    pub fn new(params: VolumeParams) -> Result<Self> {
        params.validate()?;
        let tables = (0..params.feature_levels)
            .map(|k| LevelTable::new(params.levels - 1 - k))
            .collect();
        Ok(Self {
            scale: params.scale(),
            params,
            tables,
            features: Vec::new(),
        })
    }

    pub fn params(&self) -> &VolumeParams {
        &self.params
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn origin(&self) -> &Vector3<f64> {
        &self.params.origin
    }

    /// Active level tables, finest level first.
    pub fn tables(&self) -> &[LevelTable] {
        &self.tables
    }

    pub fn level_table(&self, level: u32) -> Option<&LevelTable> {
        self.tables.iter().find(|t| t.level == level)
    }

    pub fn features(&self) -> &[FeatureVector] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [FeatureVector] {
        &mut self.features
    }

    pub fn feature_count(&self) -> usize {
        self.features.len()
    }

    pub fn node_count(&self) -> usize {
        self.tables.iter().map(|t| t.nodes.len()).sum()
    }

    pub fn corner_count(&self) -> usize {
        self.tables.iter().map(|t| t.corners.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.iter().all(|t| t.nodes.is_empty())
    }

    /// Drops every node, corner and feature.
    pub fn clear(&mut self) {
        for t in &mut self.tables {
            t.nodes.clear();
            t.corners.clear();
        }
        self.features.clear();
    }

    /// Maps a world point to scaled coordinates in `[-1, 1]`.
    pub fn scale_to_unit(&self, p_world: &Point3) -> Result<Vector3<f64>> {
        let s = (p_world - self.params.origin) * self.scale;
        if s.iter().all(|v| (-1.0..=1.0).contains(v)) {
            Ok(s)
        } else {
            Err(Error::OutOfBounds)
        }
    }

    pub fn unit_to_world(&self, s: &Vector3<f64>) -> Point3 {
        s / self.scale + self.params.origin
    }

    /// Integer node coordinates containing `s` at `level`, if inside the grid.
    #[inline]
    fn node_coords(s: &Vector3<f64>, level: u32) -> Option<[u32; 3]> {
        let res = (1u64 << level) as f64;
        let cells = 1u64 << (level + 1);
        let mut out = [0u32; 3];
        for k in 0..3 {
            let v = ((s[k] + 1.0) * res).floor();
            if !(v >= 0.0 && (v as u64) < cells) {
                return None;
            }
            out[k] = v as u32;
        }
        Some(out)
    }

    /// World-space bounds `(min, max)` of a node.
    pub fn node_bounds(&self, level: u32, code: u64) -> (Point3, Point3) {
        let [ix, iy, iz] = morton_decode(code);
        let cell = 1.0 / (1u64 << level) as f64;
        let min = Vector3::new(ix as f64, iy as f64, iz as f64) * cell - Vector3::repeat(1.0);
        let max = min + Vector3::repeat(cell);
        (self.unit_to_world(&min), self.unit_to_world(&max))
    }

    /// World position of a corner.
    pub fn corner_position(&self, level: u32, code: u64) -> Point3 {
        let [ix, iy, iz] = morton_decode(code);
        let cell = 1.0 / (1u64 << level) as f64;
        let s = Vector3::new(ix as f64, iy as f64, iz as f64) * cell - Vector3::repeat(1.0);
        self.unit_to_world(&s)
    }

    /// Node coordinates at every active level, or `None` when the point or one
    /// of its corners cannot be encoded.
    fn locate_all(&self, p_world: &Point3) -> Option<ArrayVec<[u32; 3], MAX_FEATURE_LEVELS>> {
        let s = self.scale_to_unit(p_world).ok()?;
        let mut out = ArrayVec::new();
        for t in &self.tables {
            let c = Self::node_coords(&s, t.level)?;
            if c.iter().any(|&v| v + 1 > MAX_COORD) {
                return None;
            }
            out.push(c);
        }
        Some(out)
    }

    /// Allocates nodes and corners for every point at each active level.
    ///
    /// New feature rows are drawn from N(0, 0.01^2) with a generator seeded by
    /// `seed`. Existing entries are never modified.
    pub fn insert_points(&mut self, points: &[Point3], seed: u64) -> InsertReport {
        self.insert_points_with_prior(points, seed, None)
    }

    /// Like [`insert_points`](Self::insert_points), but a new corner that also
    /// exists in `prior` copies the prior's feature instead of a random draw.
    pub fn insert_points_with_prior(
        &mut self,
        points: &[Point3],
        seed: u64,
        prior: Option<&FeatureVolume>,
    ) -> InsertReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, FEATURE_INIT_STD).expect("valid std");
        let mut report = InsertReport::default();

        for p in points {
            let Some(coords) = self.locate_all(p) else {
                report.skipped += 1;
                continue;
            };
            for (k, c) in coords.iter().enumerate() {
                let table = &mut self.tables[k];
                let node = morton_encode_unchecked(c[0], c[1], c[2]);
                if table.nodes.contains_key(&node) {
                    continue;
                }
                let mut corner_keys = [0u64; 8];
                for (ci, key) in corner_keys.iter_mut().enumerate() {
                    let o = corner_offset(ci);
                    *key = morton_encode_unchecked(c[0] + o[0], c[1] + o[1], c[2] + o[2]);
                    if table.corners.contains_key(key) {
                        continue;
                    }
                    let prior_row = prior.and_then(|pv| {
                        pv.tables
                            .get(k)
                            .filter(|pt| pt.level == table.level)
                            .and_then(|pt| pt.corners.get(key))
                            .map(|&row| pv.features[row as usize])
                    });
                    let feature = prior_row.unwrap_or_else(|| {
                        let mut f = [0f32; FEATURE_DIM];
                        for v in &mut f {
                            *v = normal.sample(&mut rng);
                        }
                        f
                    });
                    let row = self.features.len() as u32;
                    self.features.push(feature);
                    table.corners.insert(*key, row);
                    report.new_features.push(row);
                }
                table.nodes.insert(node, corner_keys);
                report.new_nodes += 1;
            }
        }
        report
    }

    /// Looks up the node containing `s` at each active level and trilinearly
    /// interpolates its corner features; the per-level results are summed.
    pub fn query_combined_feature(&self, s: &Vector3<f64>) -> Result<FeatureQuery> {
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::OutsideMap);
        }
        let mut combined = [0f64; FEATURE_DIM];
        let mut levels = ArrayVec::new();
        for table in &self.tables {
            let c = Self::node_coords(s, table.level).ok_or(Error::OutsideMap)?;
            let node = morton_encode_unchecked(c[0], c[1], c[2]);
            let corners = table.nodes.get(&node).ok_or(Error::OutsideMap)?;

            let res = table.resolution();
            let mut t = [0f64; 3];
            for k in 0..3 {
                t[k] = (s[k] + 1.0) * res - c[k] as f64;
            }
            let mut interp = LevelInterp {
                level: table.level,
                rows: [0; 8],
                weights: [0.0; 8],
                weight_grads: [[0.0; 3]; 8],
            };
            for ci in 0..8 {
                let o = corner_offset(ci);
                let mut f = [0f64; 3];
                let mut df = [0f64; 3];
                for k in 0..3 {
                    if o[k] == 1 {
                        f[k] = t[k];
                        df[k] = res;
                    } else {
                        f[k] = 1.0 - t[k];
                        df[k] = -res;
                    }
                }
                let w = f[0] * f[1] * f[2];
                interp.weights[ci] = w;
                interp.weight_grads[ci] = [df[0] * f[1] * f[2], f[0] * df[1] * f[2], f[0] * f[1] * df[2]];
                let row = *table.corners.get(&corners[ci]).ok_or(Error::OutsideMap)?;
                interp.rows[ci] = row;
                let feat = &self.features[row as usize];
                for (acc, v) in combined.iter_mut().zip(feat) {
                    *acc += w * *v as f64;
                }
            }
            levels.push(interp);
        }
        let mut out = [0f32; FEATURE_DIM];
        for (o, v) in out.iter_mut().zip(combined) {
            *o = v as f32;
        }
        Ok(FeatureQuery {
            combined: out,
            levels,
        })
    }

    /// Merges a submap into this (global) volume.
    ///
    /// Nodes and corners already present here are kept as they are; absent ones
    /// are inserted and their feature rows appended. The submap is emptied.
    pub fn merge_submap(&mut self, submap: &mut FeatureVolume) -> Result<MergeReport> {
        if submap.params != self.params {
            return Err(Error::InvalidMerge(format!(
                "parameter mismatch: global {:?} vs submap {:?}",
                self.params, submap.params
            )));
        }
        let mut report = MergeReport::default();
        for (global, sub) in self.tables.iter_mut().zip(&submap.tables) {
            for key in sub.sorted_node_keys() {
                if let std::collections::hash_map::Entry::Vacant(e) = global.nodes.entry(key) {
                    e.insert(sub.nodes[&key]);
                    report.nodes_added += 1;
                }
            }
            for key in sub.sorted_corner_keys() {
                if global.corners.contains_key(&key) {
                    continue;
                }
                let row = self.features.len() as u32;
                self.features.push(submap.features[sub.corners[&key] as usize]);
                global.corners.insert(key, row);
                report.corners_added += 1;
            }
        }
        submap.clear();
        Ok(report)
    }

    /// Full referential-integrity audit of the three tables.
    pub fn audit(&self) -> Result<(), String> {
        let mut referenced = FxHashSet::default();
        for t in &self.tables {
            let cells = 1u64 << (t.level + 1);
            for (node, corners) in &t.nodes {
                let c = morton_decode(*node);
                if c.iter().any(|&v| v as u64 >= cells) {
                    return Err(format!("node {node:#x} out of range at level {}", t.level));
                }
                for (ci, key) in corners.iter().enumerate() {
                    let o = corner_offset(ci);
                    let expected = morton_encode_unchecked(c[0] + o[0], c[1] + o[1], c[2] + o[2]);
                    if *key != expected {
                        return Err(format!("node {node:#x} corner {ci} has wrong key"));
                    }
                    if !t.corners.contains_key(key) {
                        return Err(format!("node {node:#x} corner {key:#x} missing from G"));
                    }
                }
            }
            for (key, row) in &t.corners {
                if *row as usize >= self.features.len() {
                    return Err(format!("corner {key:#x} points past F ({row})"));
                }
                if !referenced.insert(*row) {
                    return Err(format!("feature row {row} shared by two corners"));
                }
            }
        }
        if let Some(bad) = self.features.iter().position(|f| f.iter().any(|v| !v.is_finite())) {
            return Err(format!("feature row {bad} is not finite"));
        }
        Ok(())
    }

    /// Rebuilds a volume from raw tables (used by snapshot loading).
    pub(crate) fn from_parts(
        params: VolumeParams,
        tables: Vec<LevelTable>,
        features: Vec<FeatureVector>,
    ) -> Result<Self> {
        params.validate()?;
        if tables.len() != params.feature_levels as usize {
            return Err(Error::InvalidParameter("table count does not match feature levels".into()));
        }
        for (k, t) in tables.iter().enumerate() {
            if t.level != params.levels - 1 - k as u32 {
                return Err(Error::InvalidParameter(format!("unexpected level {}", t.level)));
            }
        }
        let v = Self {
            scale: params.scale(),
            params,
            tables,
            features,
        };
        v.audit().map_err(Error::InvalidParameter)?;
        Ok(v)
    }
}

//! Iso-surface extraction from the implicit map.

pub mod ply;
pub mod tables;

use nalgebra::Vector3;
use rustc_hash::FxHashMap;

use crate::decoder::{NeuralField, SdfDecoder, SdfField};
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::octree::FeatureVolume;
use tables::{CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE};

/// Triangles with less area than this are dropped.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn contains(&self, p: &Point3, tol: f64) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] - tol && p[k] <= self.max[k] + tol)
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains(&other.min, 0.0) && self.contains(&other.max, 0.0)
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i as usize]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    /// Checks index bounds, normal count and triangle areas.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(Error::InvalidParameter(format!("{} normals for {n} vertices", normals.len())));
            }
        }
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v as usize >= n) {
                return Err(Error::InvalidParameter(format!("triangle {i} indexes past {n} vertices")));
            }
            if self.triangle_area(t) < MIN_TRIANGLE_AREA {
                return Err(Error::InvalidParameter(format!("triangle {i} is degenerate")));
            }
        }
        Ok(())
    }
}

/// Bounds of the occupied leaf nodes, padded by one leaf on every side.
pub fn compute_map_bounds(volume: &FeatureVolume) -> Result<Aabb> {
    let leaves = volume.tables().first().ok_or(Error::EmptyMap)?;
    if leaves.nodes.is_empty() {
        return Err(Error::EmptyMap);
    }
    let mut min = Vector3::repeat(f64::INFINITY);
    let mut max = Vector3::repeat(f64::NEG_INFINITY);
    for &code in leaves.nodes.keys() {
        let (lo, hi) = volume.node_bounds(leaves.level, code);
        min = min.inf(&lo);
        max = max.sup(&hi);
    }
    let pad = Vector3::repeat(volume.params().leaf_size);
    Ok(Aabb {
        min: min - pad,
        max: max + pad,
    })
}

/// Marching Cubes over the mapped region of a neural map. An empty map gives
/// an empty mesh.
pub fn extract_mesh(
    volume: &FeatureVolume,
    decoder: &SdfDecoder,
    resolution: f64,
    with_normals: bool,
) -> Result<TriangleMesh> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::InvalidParameter(format!("mesh resolution must be positive, got {resolution}")));
    }
    let bounds = match compute_map_bounds(volume) {
        Ok(b) => b,
        Err(Error::EmptyMap) => return Ok(TriangleMesh::default()),
        Err(e) => return Err(e),
    };
    extract_field_mesh(&NeuralField { volume, decoder }, &bounds, resolution, with_normals)
}

/// Marching Cubes at iso-level 0 on a regular grid anchored at `bounds.min`.
///
/// Grid points where the field reports an error are treated as unmapped and
/// every cell touching one is skipped. Triangles are wound so that their
/// normals point toward positive values. Vertices are emitted in z-major
/// grid order.
pub fn extract_field_mesh<F: SdfField + ?Sized>(
    field: &F,
    bounds: &Aabb,
    resolution: f64,
    with_normals: bool,
) -> Result<TriangleMesh> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::InvalidParameter(format!("mesh resolution must be positive, got {resolution}")));
    }
    let ext = bounds.extent();
    if ext.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidParameter("mesh bounds are inverted".into()));
    }
    let dims: [usize; 3] = std::array::from_fn(|k| (ext[k] / resolution + 1e-9).floor() as usize + 1);
    if dims.iter().any(|&d| d < 2) {
        return Ok(TriangleMesh::default());
    }
    let [nx, ny, _] = dims;
    let layer = nx * ny;
    let point = |i: usize, j: usize, k: usize| {
        bounds.min + Vector3::new(i as f64, j as f64, k as f64) * resolution
    };
    let sample_layer = |k: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(layer);
        for j in 0..ny {
            for i in 0..nx {
                out.push(field.value(&point(i, j, k)).unwrap_or(f64::NAN));
            }
        }
        out
    };

    let mut mesh = TriangleMesh::default();
    // Grid edge id -> vertex index. Edge id = 3 * (linear index of its lower
    // corner) + axis.
    let mut edge_vertex: FxHashMap<u64, u32> = FxHashMap::default();
    let mut lower = sample_layer(0);
    for k in 0..dims[2] - 1 {
        let upper = sample_layer(k + 1);
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let mut vals = [0.0; 8];
                let mut case = 0usize;
                let mut unmapped = false;
                for (c, off) in CORNER_OFFSETS.iter().enumerate() {
                    let slab = if off[2] == 0 { &lower } else { &upper };
                    let v = slab[(j + off[1]) * nx + i + off[0]];
                    if v.is_nan() {
                        unmapped = true;
                        break;
                    }
                    vals[c] = v;
                    if v < 0.0 {
                        case |= 1 << c;
                    }
                }
                if unmapped || EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut ids = [u32::MAX; 12];
                for (e, corners) in EDGE_CORNERS.iter().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    let [a, b] = *corners;
                    let (oa, ob) = (CORNER_OFFSETS[a], CORNER_OFFSETS[b]);
                    let axis = (0..3).find(|&d| oa[d] != ob[d]).expect("edge spans one axis");
                    let base = if oa[axis] < ob[axis] { oa } else { ob };
                    let lin = ((k + base[2]) * layer + (j + base[1]) * nx + i + base[0]) as u64;
                    let key = lin * 3 + axis as u64;
                    ids[e] = *edge_vertex.entry(key).or_insert_with(|| {
                        let pa = point(i + oa[0], j + oa[1], k + oa[2]);
                        let pb = point(i + ob[0], j + ob[1], k + ob[2]);
                        let t = vals[a] / (vals[a] - vals[b]);
                        mesh.vertices.push(pa + (pb - pa) * t);
                        (mesh.vertices.len() - 1) as u32
                    });
                }
                for tri in TRI_TABLE[case].chunks_exact(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    // The table winds triangles toward the inside.
                    let t = [ids[tri[0] as usize], ids[tri[2] as usize], ids[tri[1] as usize]];
                    if mesh.triangle_area(&t) >= MIN_TRIANGLE_AREA {
                        mesh.triangles.push(t);
                    }
                }
            }
        }
        lower = upper;
    }

    if with_normals {
        let normals = mesh
            .vertices
            .iter()
            .map(|v| match field.evaluate(v) {
                Ok((_, g)) if g.norm() > 0.0 => g.normalize(),
                _ => Vector3::zeros(),
            })
            .collect();
        mesh.normals = Some(normals);
    }
    Ok(mesh)
}

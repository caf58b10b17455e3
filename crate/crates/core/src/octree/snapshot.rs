//! Binary map snapshots (volume plus decoder), little-endian.
//!
//! ```text
//! magic            8 bytes  "NSDFSNAP"
//! version          u32      1
//! levels           u32
//! feature_levels   u32
//! leaf_size        f64
//! origin           3 x f64
//! feature_dim      u32
//! per active level (finest first):
//!   level          u32
//!   node_count     u64
//!   nodes          node_count x (key u64, 8 x corner key u64), sorted by key
//!   corner_count   u64
//!   corners        corner_count x (key u64, row u32), sorted by key
//! feature_rows     u64
//! features         feature_rows x feature_dim x f32
//! layer_count      u32
//! widths           layer_count x u32
//! param_count      u64
//! params           param_count x f32 (per layer: row-major weights, then bias)
//! ```

use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use super::volume::{FeatureVector, FeatureVolume, LevelTable, VolumeParams, FEATURE_DIM};
use crate::decoder::{SdfDecoder, LAYER_WIDTHS};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NSDFSNAP";
pub const VERSION: u32 = 1;

pub fn encode_snapshot(volume: &FeatureVolume, decoder: &SdfDecoder) -> Vec<u8> {
    let p = volume.params();
    let mut out = Vec::with_capacity(64 + volume.feature_count() * FEATURE_DIM * 4);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, p.levels);
    put_u32(&mut out, p.feature_levels);
    put_f64(&mut out, p.leaf_size);
    for v in p.origin.iter() {
        put_f64(&mut out, *v);
    }
    put_u32(&mut out, FEATURE_DIM as u32);
    for t in volume.tables() {
        put_u32(&mut out, t.level);
        put_u64(&mut out, t.nodes.len() as u64);
        for key in t.sorted_node_keys() {
            put_u64(&mut out, key);
            for c in &t.nodes[&key] {
                put_u64(&mut out, *c);
            }
        }
        put_u64(&mut out, t.corners.len() as u64);
        for key in t.sorted_corner_keys() {
            put_u64(&mut out, key);
            put_u32(&mut out, t.corners[&key]);
        }
    }
    put_u64(&mut out, volume.feature_count() as u64);
    for row in volume.features() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_u32(&mut out, LAYER_WIDTHS.len() as u32);
    for w in LAYER_WIDTHS {
        put_u32(&mut out, w as u32);
    }
    put_u64(&mut out, decoder.params().len() as u64);
    for v in decoder.params() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<(FeatureVolume, SdfDecoder)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(r.err_at(0, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let levels = r.u32()?;
    let feature_levels = r.u32()?;
    let leaf_size = r.f64()?;
    let origin = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
    let dim = r.u32()?;
    if dim as usize != FEATURE_DIM {
        return Err(r.err(format!("feature dimension {dim}, expected {FEATURE_DIM}")));
    }
    let params = VolumeParams {
        levels,
        leaf_size,
        feature_levels,
        origin,
    };
    params.validate().map_err(|e| r.err(e.to_string()))?;

    let mut tables = Vec::with_capacity(feature_levels as usize);
    for _ in 0..feature_levels {
        let mut t = LevelTable {
            level: r.u32()?,
            ..Default::default()
        };
        let n = r.count(72)?;
        t.nodes.reserve(n);
        for _ in 0..n {
            let key = r.u64()?;
            let mut corners = [0u64; 8];
            for c in &mut corners {
                *c = r.u64()?;
            }
            t.nodes.insert(key, corners);
        }
        let n = r.count(12)?;
        t.corners.reserve(n);
        for _ in 0..n {
            let key = r.u64()?;
            t.corners.insert(key, r.u32()?);
        }
        tables.push(t);
    }
    let rows = r.count(4 * FEATURE_DIM)?;
    let mut features: Vec<FeatureVector> = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut f = [0f32; FEATURE_DIM];
        for v in &mut f {
            *v = r.f32()?;
        }
        features.push(f);
    }
    let layers = r.u32()? as usize;
    if layers != LAYER_WIDTHS.len() {
        return Err(r.err(format!("decoder has {layers} layers, expected {}", LAYER_WIDTHS.len())));
    }
    for expected in LAYER_WIDTHS {
        let w = r.u32()? as usize;
        if w != expected {
            return Err(r.err(format!("decoder width {w}, expected {expected}")));
        }
    }
    let n = r.count(4)?;
    let mut dparams = Vec::with_capacity(n);
    for _ in 0..n {
        dparams.push(r.f32()?);
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }
    let decoder = SdfDecoder::from_params(dparams).map_err(|e| r.err(e.to_string()))?;
    let volume = FeatureVolume::from_parts(params, tables, features).map_err(|e| r.err(e.to_string()))?;
    Ok((volume, decoder))
}

pub fn write_snapshot(path: &Path, volume: &FeatureVolume, decoder: &SdfDecoder) -> Result<()> {
    fs::write(path, encode_snapshot(volume, decoder))?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<(FeatureVolume, SdfDecoder)> {
    decode_snapshot(&fs::read(path)?)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err_at(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        self.err_at(self.pos, message)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("unexpected end of snapshot"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// Reads an element count and checks the remaining bytes can hold it.
    fn count(&mut self, elem_size: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64()?;
        let remaining = (self.bytes.len() - self.pos) as u64;
        if n.checked_mul(elem_size as u64).is_none_or(|b| b > remaining) {
            return Err(self.err_at(at, format!("count {n} exceeds remaining data")));
        }
        Ok(n as usize)
    }
}

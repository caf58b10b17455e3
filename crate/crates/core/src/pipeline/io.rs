//! Scan readers and trajectory files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform};

use super::config::DatasetFormat;

/// One estimated or reference pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub index: usize,
    pub timestamp: f64,
    pub pose: RigidTransform,
}

impl TrajectoryRecord {
    pub fn new(index: usize, pose: RigidTransform) -> Self {
        Self {
            index,
            timestamp: index as f64,
            pose,
        }
    }
}

/// Builds records `0..n` from a list of poses.
pub fn records_from_poses(poses: &[RigidTransform]) -> Vec<TrajectoryRecord> {
    poses
        .iter()
        .enumerate()
        .map(|(i, p)| TrajectoryRecord::new(i, *p))
        .collect()
}

/// Parses KITTI velodyne bytes: little-endian `f32` records of
/// `x y z intensity`. Intensity is dropped.
pub fn parse_kitti_scan(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::Parse {
            offset: bytes.len() - bytes.len() % 16,
            message: format!("{} bytes is not a whole number of 16-byte records", bytes.len()),
        });
    }
    let points = bytes
        .chunks_exact(16)
        .map(|r| {
            let f = |i: usize| f32::from_le_bytes(r[4 * i..4 * i + 4].try_into().expect("4 bytes")) as f64;
            Vector3::new(f(0), f(1), f(2))
        })
        .collect();
    Ok(PointCloud::sensor(points))
}

pub fn read_kitti_scan(path: &Path) -> Result<PointCloud> {
    parse_kitti_scan(&fs::read(path)?)
}

/// Encodes a cloud as KITTI velodyne bytes with zero intensity.
pub fn encode_kitti_scan(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x as f32, p.y as f32, p.z as f32, 0.0] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_kitti_scan(cloud: &PointCloud, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_kitti_scan(cloud))?)
}

/// Parses whitespace- or comma-separated text with at least three numbers
/// per line. Extra columns are ignored; `#` starts a comment.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.split('#').next().unwrap_or("");
        let mut it = body
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty());
        let fields: Vec<&str> = it.by_ref().take(3).collect();
        match fields.len() {
            0 => {}
            3 => {
                let mut v = [0.0; 3];
                for (k, s) in fields.iter().enumerate() {
                    v[k] = s.parse().map_err(|_| Error::Parse {
                        offset,
                        message: format!("bad number '{s}'"),
                    })?;
                }
                points.push(Vector3::from(v));
            }
            _ => {
                return Err(Error::Parse {
                    offset,
                    message: "expected at least three values".into(),
                })
            }
        }
        offset += line.len();
    }
    Ok(PointCloud::sensor(points))
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    parse_xyz(&fs::read_to_string(path)?)
}

/// Random access to the scans of a sequence.
pub trait ScanSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sensor-frame points of scan `index`.
    fn scan(&mut self, index: usize) -> Result<PointCloud>;

    fn timestamp(&self, index: usize) -> f64 {
        index as f64
    }
}

/// Scan files of one directory in file-name order.
#[derive(Debug, Clone)]
pub struct DirectorySource {
    files: Vec<PathBuf>,
    format: DatasetFormat,
}

impl DirectorySource {
    /// Lists `*.bin` (KITTI) or `*.xyz`/`*.txt` (xyz) files. A KITTI
    /// sequence directory with a `velodyne/` subdirectory is also accepted.
    pub fn open(dir: &Path, format: DatasetFormat) -> Result<Self> {
        let dir = if format == DatasetFormat::Kitti && dir.join("velodyne").is_dir() {
            dir.join("velodyne")
        } else {
            dir.to_path_buf()
        };
        let exts: &[&str] = match format {
            DatasetFormat::Kitti => &["bin"],
            DatasetFormat::Xyz => &["xyz", "txt"],
            DatasetFormat::Synthetic => {
                return Err(Error::Config("synthetic sequences have no directory".into()))
            }
        };
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| exts.contains(&e)))
            .collect();
        files.sort();
        Ok(Self { files, format })
    }
}

impl ScanSource for DirectorySource {
    fn len(&self) -> usize {
        self.files.len()
    }

    fn scan(&mut self, index: usize) -> Result<PointCloud> {
        let path = self
            .files
            .get(index)
            .ok_or_else(|| Error::InvalidParameter(format!("scan {index} out of range")))?;
        match self.format {
            DatasetFormat::Kitti => read_kitti_scan(path),
            _ => read_xyz(path),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryFormat {
    /// 12 numbers per line, row-major `[R | t]`.
    Kitti,
    /// `timestamp tx ty tz qx qy qz qw`.
    Tum,
}

impl std::str::FromStr for TrajectoryFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kitti" => Ok(Self::Kitti),
            "tum" => Ok(Self::Tum),
            _ => Err(Error::Config(format!("unknown trajectory format '{s}'"))),
        }
    }
}

pub fn format_trajectory(records: &[TrajectoryRecord], format: TrajectoryFormat) -> String {
    let mut s = String::new();
    for r in records {
        match format {
            TrajectoryFormat::Kitti => {
                let v = r.pose.to_row_major_3x4();
                let line: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                let _ = writeln!(s, "{}", line.join(" "));
            }
            TrajectoryFormat::Tum => {
                let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r.pose.rotation));
                let t = r.pose.translation;
                let _ = writeln!(
                    s,
                    "{} {} {} {} {} {} {} {}",
                    r.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
                );
            }
        }
    }
    s
}

pub fn export_trajectory(records: &[TrajectoryRecord], format: TrajectoryFormat, path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidParameter("no trajectory records to export".into()));
    }
    fs::write(path, format_trajectory(records, format))?;
    Ok(())
}

/// Parses a trajectory file. KITTI lines get index and timestamp from their
/// line number; TUM lines are indexed in order.
pub fn parse_trajectory(text: &str, format: TrajectoryFormat) -> Result<Vec<TrajectoryRecord>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim();
        let start = offset;
        offset += line.len();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = body
            .split_whitespace()
            .map(|s| {
                s.parse().map_err(|_| Error::Parse {
                    offset: start,
                    message: format!("bad number '{s}'"),
                })
            })
            .collect::<Result<_>>()?;
        let index = out.len();
        let record = match (format, vals.len()) {
            (TrajectoryFormat::Kitti, 12) => {
                let v: [f64; 12] = vals.try_into().expect("12 values");
                TrajectoryRecord::new(index, RigidTransform::from_row_major_3x4(&v))
            }
            (TrajectoryFormat::Tum, 8) => {
                let q = UnitQuaternion::from_quaternion(Quaternion::new(vals[7], vals[4], vals[5], vals[6]));
                TrajectoryRecord {
                    index,
                    timestamp: vals[0],
                    pose: RigidTransform::new(*q.to_rotation_matrix().matrix(), Vector3::new(vals[1], vals[2], vals[3])),
                }
            }
            (_, n) => {
                return Err(Error::Parse {
                    offset: start,
                    message: format!("unexpected {n} values on a trajectory line"),
                })
            }
        };
        out.push(record);
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path, format: TrajectoryFormat) -> Result<Vec<TrajectoryRecord>> {
    parse_trajectory(&fs::read_to_string(path)?, format)
}

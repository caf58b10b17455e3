//! Run configuration: flat `key = value` text with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::odometry::LmConfig;
use crate::octree::VolumeParams;
use crate::sampler::SamplerConfig;
use crate::trainer::{AdamConfig, LossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// Directory of KITTI `.bin` scans, read in file-name order.
    Kitti,
    /// Directory of ASCII `x y z [...]` files, read in file-name order.
    Xyz,
    /// Built-in synthetic room sequence.
    Synthetic,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kitti" => Ok(Self::Kitti),
            "xyz" => Ok(Self::Xyz),
            "synthetic" => Ok(Self::Synthetic),
            _ => Err(Error::Config(format!("unknown dataset format '{s}'"))),
        }
    }
}

impl std::fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Kitti => "kitti",
            Self::Xyz => "xyz",
            Self::Synthetic => "synthetic",
        })
    }
}

/// What to do when registration fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailurePolicy {
    /// Keep the constant-motion prediction and count the failure.
    Fallback,
    Halt,
}

impl FromStr for FailurePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fallback" => Ok(Self::Fallback),
            "halt" => Ok(Self::Halt),
            _ => Err(Error::Config(format!("unknown failure policy '{s}'"))),
        }
    }
}

impl std::fmt::Display for FailurePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fallback => "fallback",
            Self::Halt => "halt",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceConfig {
    pub dataset: Option<PathBuf>,
    pub format: DatasetFormat,
    /// Process at most this many frames (0 = all). Also the length of the
    /// synthetic sequence.
    pub max_frames: usize,
    pub levels: u32,
    pub leaf_size: f64,
    pub feature_levels: u32,
    /// A new submap is started every `submap_size` frames.
    pub submap_size: usize,
    pub surface_samples: usize,
    pub free_samples: usize,
    pub band: f64,
    pub min_range: f64,
    pub replay_window: usize,
    pub mix_ratio: f64,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub lr: f64,
    pub mapping_iterations: usize,
    pub lm_iterations: usize,
    pub mapping_voxel: f64,
    pub odometry_voxel: f64,
    /// Points farther than this from the sensor are dropped, meters.
    pub trim_radius: f64,
    pub normal_k: usize,
    /// Direction of travel for the second-scan initialization.
    pub initial_direction: Vector3<f64>,
    pub failure_policy: FailurePolicy,
    pub mesh_resolution: f64,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        let sampler = SamplerConfig::default();
        let weights = LossWeights::default();
        Self {
            dataset: None,
            format: DatasetFormat::Synthetic,
            max_frames: 100,
            levels: 10,
            leaf_size: 0.2,
            feature_levels: 3,
            submap_size: 50,
            surface_samples: sampler.surface_samples,
            free_samples: sampler.free_samples,
            band: sampler.band,
            min_range: sampler.min_range,
            replay_window: 20,
            mix_ratio: 0.5,
            batch_size: 2048,
            lambda1: weights.lambda1,
            lambda2: weights.lambda2,
            alpha: weights.alpha,
            lr: 1e-4,
            mapping_iterations: 100,
            lm_iterations: 100,
            mapping_voxel: 0.1,
            odometry_voxel: 0.2,
            trim_radius: 12.0,
            normal_k: 20,
            initial_direction: Vector3::x(),
            failure_policy: FailurePolicy::Fallback,
            mesh_resolution: 0.1,
            seed: 0,
            output_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

impl SequenceConfig {
    /// Named parameter sets: `desk` (the default), `kitti` and `kitti-large`.
    pub fn preset(name: &str) -> Result<Self> {
        let desk = Self::default();
        match name {
            "desk" => Ok(desk),
            "kitti" => Ok(Self {
                format: DatasetFormat::Kitti,
                max_frames: 0,
                levels: 13,
                submap_size: 200,
                trim_radius: 50.0,
                ..desk
            }),
            "kitti-large" => Ok(Self {
                format: DatasetFormat::Kitti,
                max_frames: 0,
                levels: 15,
                submap_size: 200,
                trim_radius: 50.0,
                ..desk
            }),
            _ => Err(Error::Config(format!("unknown preset '{name}'"))),
        }
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dataset" => self.dataset = Some(PathBuf::from(v)),
            "format" => self.format = parse(key, v)?,
            "max_frames" => self.max_frames = parse(key, v)?,
            "levels" => self.levels = parse(key, v)?,
            "leaf_size" => self.leaf_size = parse(key, v)?,
            "feature_levels" => self.feature_levels = parse(key, v)?,
            "submap_size" => self.submap_size = parse(key, v)?,
            "surface_samples" => self.surface_samples = parse(key, v)?,
            "free_samples" => self.free_samples = parse(key, v)?,
            "band" => self.band = parse(key, v)?,
            "min_range" => self.min_range = parse(key, v)?,
            "replay_window" => self.replay_window = parse(key, v)?,
            "mix_ratio" => self.mix_ratio = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lambda1" => self.lambda1 = parse(key, v)?,
            "lambda2" => self.lambda2 = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "mapping_iterations" => self.mapping_iterations = parse(key, v)?,
            "lm_iterations" => self.lm_iterations = parse(key, v)?,
            "mapping_voxel" => self.mapping_voxel = parse(key, v)?,
            "odometry_voxel" => self.odometry_voxel = parse(key, v)?,
            "trim_radius" => self.trim_radius = parse(key, v)?,
            "normal_k" => self.normal_k = parse(key, v)?,
            "initial_direction" => {
                let c: Vec<f64> = v
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?;
                let [x, y, z] = c[..] else {
                    return Err(Error::Config(format!("'{key}' needs three components")));
                };
                self.initial_direction = Vector3::new(x, y, z);
            }
            "failure_policy" => self.failure_policy = parse(key, v)?,
            "mesh_resolution" => self.mesh_resolution = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "output_dir" => self.output_dir = Some(PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(d) = &self.dataset {
            kv("dataset", d.display().to_string());
        }
        kv("format", self.format.to_string());
        kv("max_frames", self.max_frames.to_string());
        kv("levels", self.levels.to_string());
        kv("leaf_size", self.leaf_size.to_string());
        kv("feature_levels", self.feature_levels.to_string());
        kv("submap_size", self.submap_size.to_string());
        kv("surface_samples", self.surface_samples.to_string());
        kv("free_samples", self.free_samples.to_string());
        kv("band", self.band.to_string());
        kv("min_range", self.min_range.to_string());
        kv("replay_window", self.replay_window.to_string());
        kv("mix_ratio", self.mix_ratio.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lambda1", self.lambda1.to_string());
        kv("lambda2", self.lambda2.to_string());
        kv("alpha", self.alpha.to_string());
        kv("lr", self.lr.to_string());
        kv("mapping_iterations", self.mapping_iterations.to_string());
        kv("lm_iterations", self.lm_iterations.to_string());
        kv("mapping_voxel", self.mapping_voxel.to_string());
        kv("odometry_voxel", self.odometry_voxel.to_string());
        kv("trim_radius", self.trim_radius.to_string());
        kv("normal_k", self.normal_k.to_string());
        let d = self.initial_direction;
        kv("initial_direction", format!("{},{},{}", d.x, d.y, d.z));
        kv("failure_policy", self.failure_policy.to_string());
        kv("mesh_resolution", self.mesh_resolution.to_string());
        kv("seed", self.seed.to_string());
        if let Some(d) = &self.output_dir {
            kv("output_dir", d.display().to_string());
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(8..=21).contains(&self.levels) {
            return bad(format!("levels must lie in [8, 21], got {}", self.levels));
        }
        let positive = [
            ("leaf_size", self.leaf_size),
            ("band", self.band),
            ("alpha", self.alpha),
            ("mapping_voxel", self.mapping_voxel),
            ("odometry_voxel", self.odometry_voxel),
            ("trim_radius", self.trim_radius),
            ("mesh_resolution", self.mesh_resolution),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("lr", self.lr),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("min_range", self.min_range),
        ];
        for (k, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return bad(format!("mix_ratio must lie in [0, 1], got {}", self.mix_ratio));
        }
        let counts = [
            ("submap_size", self.submap_size),
            ("replay_window", self.replay_window),
            ("batch_size", self.batch_size),
            ("surface_samples", self.surface_samples),
            ("lm_iterations", self.lm_iterations),
        ];
        for (k, v) in counts {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if self.normal_k < 3 {
            return bad(format!("normal_k must be at least 3, got {}", self.normal_k));
        }
        if !(self.initial_direction.norm() > 0.0) {
            return bad("initial_direction must be nonzero".into());
        }
        self.volume_params(Vector3::zeros()).validate()?;
        if self.format != DatasetFormat::Synthetic && self.dataset.is_none() {
            return bad(format!("format {} needs a dataset path", self.format));
        }
        Ok(())
    }

    pub fn volume_params(&self, origin: Vector3<f64>) -> VolumeParams {
        VolumeParams {
            levels: self.levels,
            leaf_size: self.leaf_size,
            feature_levels: self.feature_levels,
            origin,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            surface_samples: self.surface_samples,
            free_samples: self.free_samples,
            band: self.band,
            min_range: self.min_range,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            alpha: self.alpha,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn lm(&self) -> LmConfig {
        LmConfig {
            max_iterations: self.lm_iterations,
            ..LmConfig::default()
        }
    }
}

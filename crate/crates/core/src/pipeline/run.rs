//! The sequential odometry and mapping loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{NeuralField, SdfDecoder};
use crate::error::{Error, Result};
use crate::geometry::{apply_transform, voxel_downsample, Point3, PointCloud, RigidTransform};
use crate::mesh::{extract_mesh, ply::write_ply_file};
use crate::octree::snapshot::write_snapshot;
use crate::octree::FeatureVolume;
use crate::odometry::{predict_initial_pose, register_scan, second_scan_init, PoseEstimate};
use crate::sampler::{assemble_training_batch, estimate_normals, sample_scan, LabeledSample, ReplayPool};
use crate::trainer::{train_frame, write_loss_trace, LossRecord, OptimizerState};

use super::config::{FailurePolicy, SequenceConfig};
use super::io::{export_trajectory, ScanSource, TrajectoryFormat, TrajectoryRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTiming {
    pub frame: usize,
    pub odometry_s: f64,
    pub mapping_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub frame: usize,
    /// Points left after trimming.
    pub points: usize,
    pub registration: Option<PoseEstimate>,
    /// Registration failed and the prediction was kept.
    pub fallback: Option<String>,
    pub samples: usize,
    pub skipped_rays: usize,
    pub new_features: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub frames: Vec<FrameReport>,
    pub fallbacks: usize,
    pub merges: usize,
    pub skipped_rays: usize,
    /// Points outside the representable cube, never inserted.
    pub skipped_points: usize,
}

#[derive(Debug, Clone)]
pub struct SequenceOutput {
    pub trajectory: Vec<TrajectoryRecord>,
    /// Global map after the last submap was merged into it.
    pub volume: FeatureVolume,
    pub decoder: SdfDecoder,
    pub diagnostics: Diagnostics,
    pub timings: Vec<FrameTiming>,
    pub loss_trace: Vec<(usize, LossRecord)>,
}

fn derived_seed(seed: u64, stream: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.rotate_left(48) ^ index
}

/// Runs odometry and mapping over every scan of `source` (up to
/// `max_frames`). Frame 0 defines the world frame.
pub fn run_sequence(config: &SequenceConfig, source: &mut dyn ScanSource) -> Result<SequenceOutput> {
    Runner::new(config, source, None)?.run()
}

/// Mapping only: scans are placed with the given poses.
pub fn run_mapping(config: &SequenceConfig, source: &mut dyn ScanSource, poses: &[RigidTransform]) -> Result<SequenceOutput> {
    Runner::new(config, source, Some(poses))?.run()
}

struct Runner<'a> {
    cfg: &'a SequenceConfig,
    source: &'a mut dyn ScanSource,
    given: Option<&'a [RigidTransform]>,
    frames: usize,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a SequenceConfig, source: &'a mut dyn ScanSource, given: Option<&'a [RigidTransform]>) -> Result<Self> {
        cfg.validate()?;
        let mut frames = source.len();
        if cfg.max_frames > 0 {
            frames = frames.min(cfg.max_frames);
        }
        if frames < 2 {
            return Err(Error::InvalidParameter(format!("a sequence needs at least 2 scans, got {frames}")));
        }
        if let Some(p) = given {
            if p.len() < frames {
                return Err(Error::InvalidParameter(format!("{} poses for {frames} scans", p.len())));
            }
        }
        Ok(Self { cfg, source, given, frames })
    }

    fn run(self) -> Result<SequenceOutput> {
        let cfg = self.cfg;
        let first_pose = self.given.map_or_else(RigidTransform::identity, |p| p[0]);
        let params = cfg.volume_params(first_pose.translation);
        let mut global = FeatureVolume::new(params)?;
        let mut submap = FeatureVolume::new(params)?;
        let mut decoder = SdfDecoder::new(derived_seed(cfg.seed, 1, 0));
        let mut adam_state = OptimizerState::new();
        let mut pool = ReplayPool::new(cfg.replay_window);
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, 2, 0));
        let weights = cfg.loss_weights();
        let adam = cfg.adam();
        let lm = cfg.lm();

        let mut poses: Vec<RigidTransform> = Vec::with_capacity(self.frames);
        let mut diag = Diagnostics::default();
        let mut timings = Vec::with_capacity(self.frames);
        let mut loss_trace = Vec::new();

        for t in 0..self.frames {
            let raw = self.source.scan(t)?;
            let scan = raw.trimmed(cfg.min_range, cfg.trim_radius);
            let mut report = FrameReport {
                frame: t,
                points: scan.len(),
                registration: None,
                fallback: None,
                samples: 0,
                skipped_rays: 0,
                new_features: 0,
            };

            let odo_start = Instant::now();
            let pose = if let Some(given) = self.given {
                given[t]
            } else if t == 0 {
                first_pose
            } else {
                let init = if t == 1 {
                    poses[0].compose(&second_scan_init(2.0 * cfg.trim_radius, &cfg.initial_direction)?)
                } else {
                    predict_initial_pose(&poses[t - 1], &poses[t - 2])
                };
                let odo_cloud = voxel_downsample(&scan, cfg.odometry_voxel)?;
                let field = NeuralField::new(&submap, &decoder);
                match register_scan(&odo_cloud.points, &field, &init, &lm) {
                    Ok(est) => {
                        report.registration = Some(est);
                        est.pose
                    }
                    Err(e @ (Error::RegistrationInfeasible { .. } | Error::StepFailure { .. } | Error::Diverged { .. })) => {
                        if cfg.failure_policy == FailurePolicy::Halt {
                            return Err(e);
                        }
                        diag.fallbacks += 1;
                        report.fallback = Some(e.to_string());
                        init
                    }
                    Err(e) => return Err(e),
                }
            };
            let odometry_s = odo_start.elapsed().as_secs_f64();
            poses.push(pose);

            let map_start = Instant::now();
            let map_cloud = voxel_downsample(&scan, cfg.mapping_voxel)?;
            let samples = self.sample_frame(&pose, &map_cloud, &mut rng, &mut report)?;
            let mut insert: Vec<Point3> = samples.iter().filter(|s| s.surface_band).map(|s| s.position).collect();
            insert.extend(apply_transform(&pose, &map_cloud).points);
            let ins = submap.insert_points_with_prior(&insert, derived_seed(cfg.seed, 3, t as u64), Some(&global));
            report.new_features = ins.new_features.len();
            diag.skipped_points += ins.skipped;

            if !samples.is_empty() && cfg.mapping_iterations > 0 {
                let trace = train_frame(
                    &mut submap,
                    &mut decoder,
                    &mut adam_state,
                    &weights,
                    &adam,
                    cfg.mapping_iterations,
                    |_| assemble_training_batch(&pool, &samples, cfg.batch_size, cfg.mix_ratio, &mut rng),
                );
                match trace {
                    Ok(trace) => loss_trace.extend(trace.into_iter().map(|r| (t, r))),
                    // Nothing of this frame landed in the map.
                    Err(Error::EmptyBatch) => {}
                    Err(e) => return Err(e),
                }
            }
            pool.push(samples);

            if (t + 1) % cfg.submap_size == 0 && t + 1 < self.frames {
                global.merge_submap(&mut submap)?;
                diag.merges += 1;
                // The next submap starts from the recent scans, with the
                // features the global map holds for them.
                let recent: Vec<Point3> = pool
                    .scans()
                    .flat_map(|s| s.iter().filter(|x| x.surface_band).map(|x| x.position))
                    .collect();
                submap.insert_points_with_prior(&recent, derived_seed(cfg.seed, 4, t as u64), Some(&global));
                adam_state.reset();
            }
            timings.push(FrameTiming {
                frame: t,
                odometry_s,
                mapping_s: map_start.elapsed().as_secs_f64(),
            });
            diag.skipped_rays += report.skipped_rays;
            diag.frames.push(report);
        }
        global.merge_submap(&mut submap)?;
        diag.merges += 1;

        let trajectory = poses
            .iter()
            .enumerate()
            .map(|(i, p)| TrajectoryRecord {
                index: i,
                timestamp: self.source.timestamp(i),
                pose: *p,
            })
            .collect();
        Ok(SequenceOutput {
            trajectory,
            volume: global,
            decoder,
            diagnostics: diag,
            timings,
            loss_trace,
        })
    }

    fn sample_frame(
        &self,
        pose: &RigidTransform,
        map_cloud: &PointCloud,
        rng: &mut ChaCha8Rng,
        report: &mut FrameReport,
    ) -> Result<Vec<LabeledSample>> {
        let world = apply_transform(pose, map_cloud);
        let origin = pose.translation;
        let normals = if world.len() >= self.cfg.normal_k {
            estimate_normals(&world.points, self.cfg.normal_k, &origin)?
        } else {
            vec![None; world.len()]
        };
        let (samples, skipped) = sample_scan(&origin, &world.points, &normals, &self.cfg.sampler(), rng);
        report.samples = samples.len();
        report.skipped_rays = skipped;
        Ok(samples)
    }
}

/// CSV with header `frame,odometry_s,mapping_s`.
pub fn timing_csv(timings: &[FrameTiming]) -> String {
    let mut s = String::from("frame,odometry_s,mapping_s\n");
    for t in timings {
        let _ = writeln!(s, "{},{:.6},{:.6}", t.frame, t.odometry_s, t.mapping_s);
    }
    s
}

impl SequenceOutput {
    /// Writes trajectories (KITTI and TUM), timing and loss CSVs, the map
    /// snapshot and, with `mesh_resolution`, a PLY mesh into `dir`.
    pub fn write(&self, dir: &Path, mesh_resolution: Option<f64>) -> Result<()> {
        fs::create_dir_all(dir)?;
        export_trajectory(&self.trajectory, TrajectoryFormat::Kitti, &dir.join("poses_kitti.txt"))?;
        export_trajectory(&self.trajectory, TrajectoryFormat::Tum, &dir.join("poses_tum.txt"))?;
        fs::write(dir.join("timing.csv"), timing_csv(&self.timings))?;
        write_loss_trace(&dir.join("loss.csv"), &self.loss_trace)?;
        write_snapshot(&dir.join("map.nsdf"), &self.volume, &self.decoder)?;
        if let Some(res) = mesh_resolution {
            let mesh = extract_mesh(&self.volume, &self.decoder, res, true)?;
            write_ply_file(&mesh, &dir.join("mesh.ply"))?;
        }
        Ok(())
    }
}

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use nsdf_loam::mesh::extract_mesh;
use nsdf_loam::mesh::ply::write_ply_file;
use nsdf_loam::octree::snapshot::read_snapshot;
use nsdf_loam::pipeline::eval::{evaluate_ate, evaluate_relative_drift};
use nsdf_loam::pipeline::io::{
    export_trajectory, read_trajectory, records_from_poses, write_kitti_scan, DirectorySource, ScanSource,
};
use nsdf_loam::pipeline::synth::SyntheticSource;
use nsdf_loam::pipeline::{run_sequence, DatasetFormat, SequenceConfig, TrajectoryFormat};

#[derive(Parser)]
#[command(name = "nsdf-loam", version, about = "LiDAR odometry and mapping on a neural SDF")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run odometry and mapping over a sequence.
    Run {
        /// Starting parameter set: desk, kitti or kitti-large.
        #[arg(long, default_value = "desk")]
        preset: String,
        /// key = value config file applied on top of the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Individual overrides, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Scan directory; implies the dataset key.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output directory; defaults to the output_dir key.
        #[arg(long, short)]
        output: Option<PathBuf>,
        /// Skip mesh extraction.
        #[arg(long)]
        no_mesh: bool,
        /// Ground-truth trajectory (KITTI format) to report ATE against.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Extract a PLY mesh from a saved map.
    Mesh {
        map: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        resolution: f64,
        #[arg(long)]
        no_normals: bool,
    },
    /// Compare an estimated trajectory with ground truth.
    Eval {
        estimate: PathBuf,
        ground_truth: PathBuf,
        #[arg(long, default_value = "kitti")]
        format: TrajectoryFormat,
        /// Segment lengths in meters for relative drift.
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<f64>,
    },
    /// Render the synthetic room sequence as a KITTI-style directory.
    Synth {
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, default_value_t = 100)]
        frames: usize,
    },
    /// Print a summary of a saved map.
    Info { map: PathBuf },
}

fn resolve_config(
    preset: &str,
    config: Option<&PathBuf>,
    overrides: &[String],
    dataset: Option<&PathBuf>,
) -> Result<SequenceConfig> {
    let mut cfg = SequenceConfig::preset(preset)?;
    if let Some(path) = config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    if let Some(d) = dataset {
        cfg.dataset = Some(d.clone());
        if cfg.format == DatasetFormat::Synthetic {
            cfg.format = DatasetFormat::Kitti;
        }
    }
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!("override '{o}' is not KEY=VALUE");
        };
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            preset,
            config,
            overrides,
            dataset,
            output,
            no_mesh,
            gt,
            print_config,
        } => {
            let cfg = resolve_config(&preset, config.as_ref(), &overrides, dataset.as_ref())?;
            if print_config {
                print!("{}", cfg.to_text());
                return Ok(());
            }
            let mut source: Box<dyn ScanSource> = match (&cfg.format, &cfg.dataset) {
                (DatasetFormat::Synthetic, _) => Box::new(SyntheticSource::room(cfg.max_frames.max(2))),
                (format, Some(dir)) => Box::new(DirectorySource::open(dir, *format)?),
                (format, None) => bail!("format {format} needs a dataset directory"),
            };
            let Some(output) = output.or_else(|| cfg.output_dir.clone()) else {
                bail!("no output directory: pass --output or set output_dir");
            };
            eprintln!("running {} scans", source.len());
            let out = run_sequence(&cfg, source.as_mut())?;
            let mesh = (!no_mesh).then_some(cfg.mesh_resolution);
            out.write(&output, mesh)?;
            fs::write(output.join("config.txt"), cfg.to_text())?;
            let d = &out.diagnostics;
            println!(
                "frames {} fallbacks {} merges {} features {}",
                out.trajectory.len(),
                d.fallbacks,
                d.merges,
                out.volume.feature_count()
            );
            if let Some(gt) = gt {
                let gt = read_trajectory(&gt, TrajectoryFormat::Kitti)?;
                let gt = &gt[..gt.len().min(out.trajectory.len())];
                println!("ate_rmse {:.6}", evaluate_ate(&out.trajectory[..gt.len()], gt)?);
            }
            println!("output {}", output.display());
        }
        Command::Mesh {
            map,
            output,
            resolution,
            no_normals,
        } => {
            let (volume, decoder) = read_snapshot(&map)?;
            let mesh = extract_mesh(&volume, &decoder, resolution, !no_normals)?;
            write_ply_file(&mesh, &output)?;
            println!("vertices {} triangles {}", mesh.vertices.len(), mesh.triangles.len());
        }
        Command::Eval {
            estimate,
            ground_truth,
            format,
            lengths,
        } => {
            let est = read_trajectory(&estimate, format)?;
            let gt = read_trajectory(&ground_truth, format)?;
            println!("ate_rmse {:.6}", evaluate_ate(&est, &gt)?);
            if !lengths.is_empty() {
                println!("drift_percent {:.4}", evaluate_relative_drift(&est, &gt, &lengths)?);
            }
        }
        Command::Synth { output, frames } => {
            let mut source = SyntheticSource::room(frames);
            let dir = output.join("velodyne");
            fs::create_dir_all(&dir)?;
            for i in 0..frames {
                write_kitti_scan(&source.scan(i)?, &dir.join(format!("{i:06}.bin")))?;
            }
            // Ground truth relative to the first scan, as the odometry reports it.
            let first = source.poses[0].inverse();
            let rel: Vec<_> = source.poses.iter().map(|p| first.compose(p)).collect();
            export_trajectory(&records_from_poses(&rel), TrajectoryFormat::Kitti, &output.join("poses.txt"))?;
            println!("wrote {frames} scans to {}", dir.display());
        }
        Command::Info { map } => {
            let (volume, decoder) = read_snapshot(&map)?;
            let p = volume.params();
            println!("levels {} leaf_size {} feature_levels {}", p.levels, p.leaf_size, p.feature_levels);
            println!("origin {} {} {}", p.origin.x, p.origin.y, p.origin.z);
            for t in volume.tables() {
                println!("level {} nodes {} corners {}", t.level, t.nodes.len(), t.corners.len());
            }
            println!("features {} decoder_params {}", volume.feature_count(), decoder.params().len());
        }
    }
    Ok(())
}

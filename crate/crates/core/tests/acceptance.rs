//! Acceptance checks. Every criterion prints one `PASS`/`FAIL` line to the
//! real stdout (bypassing test capture); the test fails if any criterion does.
//!
//! `ACCEPTANCE_ONLY=6,7` restricts the run to a subset while iterating.

use std::collections::HashSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nsdf_loam::decoder::{sdf_query, NeuralField, SdfDecoder, SdfField, PARAM_COUNT};
use nsdf_loam::geometry::{apply_transform, voxel_downsample, Point3, PointCloud, RigidTransform};
use nsdf_loam::mesh::ply::{validate_ply, write_ply};
use nsdf_loam::mesh::{extract_mesh, TriangleMesh};
use nsdf_loam::octree::snapshot::encode_snapshot;
use nsdf_loam::octree::{morton_decode, morton_encode, FeatureVolume, MortonKey, VolumeParams, FEATURE_DIM};
use nsdf_loam::odometry::{apply_increment, register_scan, residual_and_jacobian};
use nsdf_loam::pipeline::eval::{chamfer_l1, evaluate_ate};
use nsdf_loam::pipeline::io::{
    encode_kitti_scan, format_trajectory, parse_kitti_scan, parse_trajectory, records_from_poses, ScanSource,
};
use nsdf_loam::pipeline::synth::{scene_distance, synth_scan, LidarModel, SyntheticSource};
use nsdf_loam::pipeline::{run_mapping, run_sequence, SequenceConfig, SequenceOutput, TrajectoryFormat};
use nsdf_loam::sampler::{sample_ray, sample_scan, LabeledSample, SamplerConfig};
use nsdf_loam::trainer::{bce_loss, total_loss, LossWeights};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn emit(id: u32, name: &str, o: &Outcome) {
    let mut out = std::io::stdout().lock();
    let tag = if o.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(out, "{tag} C{id:02} {name}: {}", o.detail);
}

// ---------------------------------------------------------------- C1

fn oracle_interleave(x: u32, y: u32, z: u32) -> u64 {
    let mut code = 0u64;
    for b in 0..21 {
        code |= (((x >> b) & 1) as u64) << (3 * b);
        code |= (((y >> b) & 1) as u64) << (3 * b + 1);
        code |= (((z >> b) & 1) as u64) << (3 * b + 2);
    }
    code
}

fn c01_morton() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bad = 0usize;
    for level in 1..=21u32 {
        let hi = 1u32 << level;
        for _ in 0..100_000 {
            let c = [rng.random_range(0..hi), rng.random_range(0..hi), rng.random_range(0..hi)];
            let code = morton_encode(c[0], c[1], c[2]).expect("in range");
            let key = MortonKey::new(c[0], c[1], c[2], level).expect("in range");
            if code != oracle_interleave(c[0], c[1], c[2]) || morton_decode(code) != c || key.coords() != c {
                bad += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        bad == 0 && secs < 1.0,
        format!("21 levels x 1e5 triples, {bad} mismatches, {secs:.3} s (limit 1 s)"),
    )
}

// ---------------------------------------------------------------- C2

fn random_volume(params: VolumeParams, seed: u64, n: usize, half: f64) -> (FeatureVolume, Vec<Point3>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Point3> = (0..n)
        .map(|_| {
            Vector3::new(
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                rng.random_range(-half..half),
            )
        })
        .collect();
    let mut v = FeatureVolume::new(params).unwrap();
    v.insert_points(&pts, seed);
    (v, pts)
}

fn c02_partition_of_unity() -> Outcome {
    let (v, pts) = random_volume(VolumeParams::default(), 2, 300, 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0f64;
    let mut queries = 0;
    while queries < 10_000 {
        let base = pts[rng.random_range(0..pts.len())];
        let p = base + Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
        let s = v.scale_to_unit(&p).unwrap();
        let Ok(q) = v.query_combined_feature(&s) else { continue };
        for lv in &q.levels {
            worst = worst.max((lv.weights.iter().sum::<f64>() - 1.0).abs());
            if lv.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
                worst = f64::INFINITY;
            }
        }
        queries += 1;
    }

    // Corner queries: on a single-level volume the combined feature is the
    // corner's own row, bit for bit. On three levels the finest level puts
    // weight exactly 1 on that corner.
    let mut corner_mismatch = 0;
    let mut corner_checks = 0;
    for levels in [1u32, 3] {
        let params = VolumeParams {
            feature_levels: levels,
            ..VolumeParams::default()
        };
        let (v, _) = random_volume(params, 4, 100, 3.0);
        let finest = &v.tables()[0];
        for (node, corners) in finest.nodes.iter().take(500) {
            let p = v.corner_position(finest.level, corners[0]);
            let s = v.scale_to_unit(&p).unwrap();
            let q = v.query_combined_feature(&s).unwrap();
            let row = finest.corners[&corners[0]];
            let lv = &q.levels[0];
            let hit = lv.rows.iter().zip(&lv.weights).any(|(r, w)| *r == row && *w == 1.0);
            let exact = levels > 1 || q.combined == v.features()[row as usize];
            if !(hit && exact) {
                corner_mismatch += 1;
            }
            corner_checks += 1;
            let _ = node;
        }
    }
    outcome(
        worst < 1e-12 && corner_mismatch == 0,
        format!(
            "max |sum w - 1| {worst:.2e} over {queries} queries (tol 1e-12); {corner_mismatch}/{corner_checks} corner queries off"
        ),
    )
}

// ---------------------------------------------------------------- C3

fn perturb_decoder(d: &mut SdfDecoder, rng: &mut ChaCha8Rng, out_scale: f32) {
    for range in [384..416, 1440..1472] {
        for b in &mut d.params_mut()[range] {
            *b = rng.random_range(0.05..0.3);
        }
    }
    for w in &mut d.params_mut()[1472..1504] {
        *w = rng.random_range(-out_scale..out_scale);
    }
}

fn relu_pattern(v: &FeatureVolume, d: &SdfDecoder, p: &Point3) -> Vec<bool> {
    let s = v.scale_to_unit(p).unwrap();
    let t = d.forward(&v.query_combined_feature(&s).unwrap().combined);
    t.a1.iter().chain(&t.a2).map(|a| *a > 0.0).collect()
}

fn c03_gradients() -> Outcome {
    // Point gradient. Depth 8 keeps the 1e-3 scaled stencil inside one finest
    // node, where the field is linear along each axis.
    let params = VolumeParams {
        levels: 8,
        ..VolumeParams::default()
    };
    let (mut v, pts) = random_volume(params, 5, 60, 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for f in v.features_mut() {
        for x in f.iter_mut() {
            *x = rng.random_range(-0.05..0.05);
        }
    }
    let mut d = SdfDecoder::new(7);
    perturb_decoder(&mut d, &mut rng, 0.5);
    let sigma = v.scale();
    let res = v.tables()[0].resolution();
    let h = 1e-3;
    let mut worst_point = 0f64;
    let mut checked = 0;
    while checked < 100 {
        let p = pts[rng.random_range(0..pts.len())]
            + Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
        let Ok(r) = sdf_query(&v, &d, &p, false) else { continue };
        let local = v.scale_to_unit(&p).unwrap().map(|x| ((x + 1.0) * res).fract());
        if local.iter().any(|t| !(0.15..0.85).contains(t)) {
            continue;
        }
        let pat = relu_pattern(&v, &d, &p);
        let mut fd = Vector3::zeros();
        let mut stable = true;
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = h / sigma;
            stable &= relu_pattern(&v, &d, &(p + e)) == pat && relu_pattern(&v, &d, &(p - e)) == pat;
            let yp = sdf_query(&v, &d, &(p + e), false).unwrap().epsilon;
            let ym = sdf_query(&v, &d, &(p - e), false).unwrap().epsilon;
            fd[k] = (yp - ym) / (2.0 * h);
        }
        if !stable {
            continue;
        }
        worst_point = worst_point.max((fd - r.grad_point).norm() / r.grad_point.norm().max(1e-2));
        checked += 1;
    }

    // Composite loss gradients on a plane-scene batch.
    let (mut v, mut d, batch) = loss_model(8);
    let w = LossWeights::default();
    let (_, g) = total_loss(&batch, &v, &d, &w, true).unwrap();
    let g = g.unwrap();
    let base = loss_kinks(&batch, &v, &d);
    let hf = 1e-3f32;
    let mut worst_loss = 0f64;
    let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-2);
    let mut params_checked = 0;
    while params_checked < 30 {
        let i = rng.random_range(0..PARAM_COUNT);
        let orig = d.params()[i];
        d.params_mut()[i] = orig + hf;
        let lp = total_loss(&batch, &v, &d, &w, false).unwrap().0.total;
        let smooth = loss_kinks(&batch, &v, &d) == base;
        d.params_mut()[i] = orig - hf;
        let lm = total_loss(&batch, &v, &d, &w, false).unwrap().0.total;
        let smooth = smooth && loss_kinks(&batch, &v, &d) == base;
        d.params_mut()[i] = orig;
        if smooth {
            worst_loss = worst_loss.max(rel((lp - lm) / (2.0 * hf as f64), g.decoder[i] as f64));
            params_checked += 1;
        }
    }
    let mut features_checked = 0;
    while features_checked < 30 {
        let (row, grad) = g.features[rng.random_range(0..g.features.len())];
        let k = rng.random_range(0..FEATURE_DIM);
        let orig = v.features()[row as usize][k];
        v.features_mut()[row as usize][k] = orig + hf;
        let lp = total_loss(&batch, &v, &d, &w, false).unwrap().0.total;
        let smooth = loss_kinks(&batch, &v, &d) == base;
        v.features_mut()[row as usize][k] = orig - hf;
        let lm = total_loss(&batch, &v, &d, &w, false).unwrap().0.total;
        let smooth = smooth && loss_kinks(&batch, &v, &d) == base;
        v.features_mut()[row as usize][k] = orig;
        if smooth {
            worst_loss = worst_loss.max(rel((lp - lm) / (2.0 * hf as f64), grad[k] as f64));
            features_checked += 1;
        }
    }
    outcome(
        worst_point < 1e-3 && worst_loss < 1e-2,
        format!(
            "point gradient max rel err {worst_point:.2e} at 100 points (tol 1e-3); loss gradient max rel err {worst_loss:.2e} over 30 params + 30 features (tol 1e-2)"
        ),
    )
}

fn plane_batch(seed: u64, rays: usize) -> Vec<LabeledSample> {
    let cfg = SamplerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let o = Vector3::new(1.0, 1.0, 2.5);
    let mut out = Vec::new();
    for _ in 0..rays {
        let e = Vector3::new(rng.random_range(0.2..1.8), rng.random_range(0.2..1.8), 0.5);
        out.extend(sample_ray(&o, &e, Some(Vector3::z()), &cfg, &mut rng).unwrap());
    }
    out
}

fn loss_model(seed: u64) -> (FeatureVolume, SdfDecoder, Vec<LabeledSample>) {
    let batch = plane_batch(seed, 40);
    let mut v = FeatureVolume::new(VolumeParams::default()).unwrap();
    let pts: Vec<_> = batch.iter().map(|s| s.position).collect();
    v.insert_points(&pts, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for f in v.features_mut() {
        for x in f.iter_mut() {
            *x = rng.random_range(-0.05..0.05);
        }
    }
    let mut d = SdfDecoder::new(seed);
    perturb_decoder(&mut d, &mut rng, 0.01);
    (v, d, batch)
}

/// ReLU patterns and Eikonal residual signs; the loss is smooth while these
/// stay fixed.
fn loss_kinks(batch: &[LabeledSample], v: &FeatureVolume, d: &SdfDecoder) -> Vec<bool> {
    let mut out = Vec::new();
    for s in batch {
        out.extend(relu_pattern(v, d, &s.position));
        out.push(sdf_query(v, d, &s.position, false).unwrap().grad_point.norm() > 1.0);
    }
    out
}

// ---------------------------------------------------------------- C4

fn c04_jacobian() -> Outcome {
    let (mut v, pts) = random_volume(VolumeParams::default(), 9, 80, 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for f in v.features_mut() {
        for x in f.iter_mut() {
            *x *= 3.0;
        }
    }
    let mut d = SdfDecoder::new(11);
    perturb_decoder(&mut d, &mut rng, 0.5);
    let field = NeuralField::new(&v, &d);
    let pose = RigidTransform::from_axis_angle(&Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.3, -0.1, 0.2));
    let inv = pose.inverse();
    // Sensor-frame points that land near mapped world points.
    let scan: Vec<Point3> = pts
        .iter()
        .take(70)
        .map(|p| inv.apply(&(p + Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0))))
        .collect();
    let lin = residual_and_jacobian(&scan, &pose, &field, 1).unwrap();
    let center = field.origin();
    // The decoder runs in single precision, so the step trades rounding
    // noise (~1e-6 / h) against curvature; stencils that cross a node face
    // or flip a ReLU are skipped.
    let h = 1e-3;
    let res = v.tables()[0].resolution();
    let node_of = |q: &Point3| v.scale_to_unit(q).unwrap().map(|x| ((x + 1.0) * res).floor());
    let mut worst = 0f64;
    let mut worst_swapped = 0f64;
    let mut rows = 0;
    let mut row = 0;
    for (p, inlier) in scan.iter().zip(&lin.inlier_mask) {
        if !inlier {
            continue;
        }
        let analytic = lin.jacobian[row];
        row += 1;
        let pw = pose.apply(p);
        let (_, grad) = field.evaluate(&pw).unwrap();
        let swapped = grad.cross(&(pw - center)) * field.scale();
        let (node, pat) = (node_of(&pw), relu_pattern(&v, &d, &pw));
        let mut smooth = true;
        let mut fd = [0.0; 6];
        for (k, fd) in fd.iter_mut().enumerate() {
            let mut delta = Vector6::zeros();
            delta[k] = h;
            let qp = apply_increment(&pose, &delta, &center).apply(p);
            let qm = apply_increment(&pose, &-delta, &center).apply(p);
            smooth &= [qp, qm].iter().all(|q| node_of(q) == node && relu_pattern(&v, &d, q) == pat);
            if !smooth {
                break;
            }
            *fd = (field.evaluate(&qp).unwrap().0 - field.evaluate(&qm).unwrap().0) / (2.0 * h);
        }
        if !smooth {
            continue;
        }
        for k in 0..6 {
            worst = worst.max((fd[k] - analytic[k]).abs());
            if k < 3 {
                worst_swapped = worst_swapped.max((fd[k] - swapped[k]).abs());
            }
        }
        rows += 1;
    }
    outcome(
        rows >= 50 && worst < 1e-3,
        format!("{rows} rows, max abs err {worst:.2e} (tol 1e-3); swapped cross product would give {worst_swapped:.2e}"),
    )
}

// ---------------------------------------------------------------- C5

fn key_sets(v: &FeatureVolume) -> Vec<(HashSet<u64>, HashSet<u64>)> {
    v.tables()
        .iter()
        .map(|t| (t.nodes.keys().copied().collect(), t.corners.keys().copied().collect()))
        .collect()
}

fn cloud(rng: &mut ChaCha8Rng, center: Vector3<f64>, n: usize) -> Vec<Point3> {
    (0..n)
        .map(|_| center + Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

fn c05_merge() -> Outcome {
    let params = VolumeParams::default();
    let dec = SdfDecoder::new(0);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut problems = Vec::new();

    // Disjoint: cardinalities equal the set union.
    let mut g = FeatureVolume::new(params).unwrap();
    let mut s = FeatureVolume::new(params).unwrap();
    g.insert_points(&cloud(&mut rng, Vector3::new(-3.0, 0.0, 0.0), 200), 1);
    s.insert_points(&cloud(&mut rng, Vector3::new(3.0, 0.0, 0.0), 200), 2);
    let expected: Vec<_> = key_sets(&g)
        .into_iter()
        .zip(key_sets(&s))
        .map(|((gn, gc), (sn, sc))| (gn.union(&sn).count(), gc.union(&sc).count()))
        .collect();
    g.merge_submap(&mut s).unwrap();
    let got: Vec<_> = g.tables().iter().map(|t| (t.nodes.len(), t.corners.len())).collect();
    if got != expected {
        problems.push(format!("disjoint cardinality {got:?} vs {expected:?}"));
    }

    // Overlapping: global rows survive untouched.
    let mut g = FeatureVolume::new(params).unwrap();
    let mut s = FeatureVolume::new(params).unwrap();
    g.insert_points(&cloud(&mut rng, Vector3::zeros(), 200), 3);
    s.insert_points(&cloud(&mut rng, Vector3::new(0.5, 0.0, 0.0), 200), 4);
    let before: Vec<Vec<(u64, [f32; FEATURE_DIM])>> = g
        .tables()
        .iter()
        .map(|t| t.corners.iter().map(|(k, r)| (*k, g.features()[*r as usize])).collect())
        .collect();
    let expected: Vec<_> = key_sets(&g)
        .into_iter()
        .zip(key_sets(&s))
        .map(|((gn, gc), (sn, sc))| (gn.union(&sn).count(), gc.union(&sc).count()))
        .collect();
    let sub_copy = s.clone();
    g.merge_submap(&mut s).unwrap();
    for (t, old) in g.tables().iter().zip(&before) {
        for (k, f) in old {
            if g.features()[t.corners[k] as usize] != *f {
                problems.push(format!("global corner {k:#x} changed"));
            }
        }
    }
    let got: Vec<_> = g.tables().iter().map(|t| (t.nodes.len(), t.corners.len())).collect();
    if got != expected {
        problems.push(format!("overlap cardinality {got:?} vs {expected:?}"));
    }

    // Merging the same submap again changes nothing.
    let once = encode_snapshot(&g, &dec);
    g.merge_submap(&mut sub_copy.clone()).unwrap();
    if encode_snapshot(&g, &dec) != once {
        problems.push("double merge differs from single merge".into());
    }

    // Random operation stream.
    let mut g = FeatureVolume::new(params).unwrap();
    let mut s = FeatureVolume::new(params).unwrap();
    let mut audits = 0;
    for op in 0..1000u64 {
        let c = Vector3::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-2.0..2.0));
        match rng.random_range(0..3) {
            0 => {
                let pts: Vec<_> = cloud(&mut rng, c, 5).into_iter().map(|p| p * 0.3 + c * 0.7).collect();
                g.insert_points(&pts, op);
            }
            1 => {
                let pts: Vec<_> = cloud(&mut rng, c, 5).into_iter().map(|p| p * 0.3 + c * 0.7).collect();
                s.insert_points_with_prior(&pts, op, Some(&g));
            }
            _ => {
                g.merge_submap(&mut s).unwrap();
            }
        }
        if op % 100 == 99 {
            for (name, vol) in [("global", &g), ("submap", &s)] {
                if let Err(e) = vol.audit() {
                    problems.push(format!("{name} audit after op {op}: {e}"));
                }
            }
            audits += 1;
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("union cardinality, global retention, idempotent merge, {audits} audits over 1000 random ops")
        } else {
            problems.join("; ")
        },
    )
}

// ---------------------------------------------------------------- C6, C7

struct MappedRoom {
    source: SyntheticSource,
    cfg: SequenceConfig,
    out: SequenceOutput,
    seconds: f64,
}

fn mapped_room() -> MappedRoom {
    let cfg = SequenceConfig {
        max_frames: 30,
        ..SequenceConfig::default()
    };
    let mut source = SyntheticSource::room(30);
    let poses = source.poses.clone();
    let start = Instant::now();
    let out = run_mapping(&cfg, &mut source, &poses).unwrap();
    MappedRoom {
        source,
        cfg,
        out,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn c06_mapping(room: &MappedRoom) -> Outcome {
    let start = Instant::now();
    let field = NeuralField::new(&room.out.volume, &room.out.decoder);
    let scene = &room.source.scene;
    let poses = &room.source.poses;
    let cfg = &room.cfg;
    // Held out: scans from poses halfway between training frames, with a
    // slightly different azimuth grid so no beam repeats a training beam.
    let lidar = LidarModel {
        azimuth_steps: 509,
        ..room.source.lidar
    };
    let sampler = SamplerConfig {
        min_range: cfg.min_range,
        ..SamplerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut err_label, mut err_true) = (Vec::new(), Vec::new());
    for i in (1..poses.len() - 1).step_by(3) {
        let pose = RigidTransform::new(poses[i].rotation, (poses[i].translation + poses[i + 1].translation) * 0.5);
        let scan = synth_scan(scene, &pose, &lidar).trimmed(cfg.min_range, cfg.trim_radius);
        let world = apply_transform(&pose, &voxel_downsample(&scan, cfg.mapping_voxel).unwrap());
        let normals = vec![None; world.len()];
        let (samples, _) = sample_scan(&pose.translation, &world.points, &normals, &sampler, &mut rng);
        for s in samples.iter().filter(|s| s.surface_band) {
            if let Ok(v) = field.metric_value(&s.position) {
                err_label.push((v - s.gt_sdf).abs());
                err_true.push((v - scene_distance(scene, &s.position) * s.gt_sdf.signum()).abs());
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let held_out = mean(&err_label);

    let mesh = extract_mesh(&room.out.volume, &room.out.decoder, 0.1, false).unwrap();
    let mut reference = Vec::new();
    for (i, pose) in poses.iter().enumerate() {
        let scan = room.source.clone().scan(i).unwrap().trimmed(cfg.min_range, cfg.trim_radius);
        reference.extend(apply_transform(pose, &scan).points);
    }
    let reference = voxel_downsample(&PointCloud::world(reference), 0.1).unwrap().points;
    let chamfer = chamfer_l1(&mesh, |p| scene_distance(scene, p), &reference, 50_000, 1.0, &mut rng).unwrap();
    let seconds = room.seconds + start.elapsed().as_secs_f64();
    outcome(
        held_out < 0.05 && chamfer.chamfer_l1 < 0.05 && seconds < 300.0,
        format!(
            "held-out mean |err| {held_out:.4} m over {} samples (tol 0.05; vs exact SDF {:.4}); mesh Chamfer-L1 {:.4} m (acc {:.4}, comp {:.4}; tol 0.05); {seconds:.0} s (limit 300)",
            err_label.len(),
            mean(&err_true),
            chamfer.chamfer_l1,
            chamfer.accuracy,
            chamfer.completeness,
        ),
    )
}

fn c07_basin(room: &MappedRoom) -> Outcome {
    let start = Instant::now();
    let field = NeuralField::new(&room.out.volume, &room.out.decoder);
    let lm = room.cfg.lm();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut source = room.source.clone();
    let unit = |rng: &mut ChaCha8Rng| loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if (0.1..1.0).contains(&v.norm()) {
            return v.normalize();
        }
    };
    let mut recovered = 0;
    let (mut worst_t, mut worst_r) = (0f64, 0f64);
    for trial in 0..50 {
        let frame = 5 + trial % 20;
        let gt = room.source.poses[frame];
        let scan = source.scan(frame).unwrap().trimmed(room.cfg.min_range, room.cfg.trim_radius);
        let scan = voxel_downsample(&scan, room.cfg.odometry_voxel).unwrap();
        // 5 cm and 2 degrees, in the sensor frame.
        let delta = RigidTransform::from_axis_angle(&(unit(&mut rng) * 2f64.to_radians()), unit(&mut rng) * 0.05);
        let init = gt.compose(&delta);
        let Ok(est) = register_scan(&scan.points, &field, &init, &lm) else { continue };
        let err = gt.inverse().compose(&est.pose);
        let (t, r) = (err.translation.norm(), err.angle().to_degrees());
        worst_t = worst_t.max(t);
        worst_r = worst_r.max(r);
        if t < 0.01 && r < 0.2 {
            recovered += 1;
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    outcome(
        recovered >= 48 && seconds < 120.0,
        format!(
            "{recovered}/50 recovered to (1 cm, 0.2 deg) (need 48); worst {:.2} cm, {worst_r:.3} deg; {seconds:.0} s (limit 120)",
            worst_t * 100.0
        ),
    )
}

// ---------------------------------------------------------------- C8, C10

fn odometry_run(feature_levels: u32) -> (SequenceOutput, f64, f64) {
    let cfg = SequenceConfig {
        feature_levels,
        ..SequenceConfig::default()
    };
    let mut source = SyntheticSource::room(cfg.max_frames);
    let first = source.poses[0].inverse();
    let gt: Vec<_> = source.poses.iter().map(|p| first.compose(p)).collect();
    let start = Instant::now();
    let out = run_sequence(&cfg, &mut source).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let ate = evaluate_ate(&out.trajectory, &records_from_poses(&gt)).unwrap();
    (out, ate, seconds)
}

fn c08_odometry(a: &(SequenceOutput, f64, f64)) -> Outcome {
    let (out, ate, seconds) = a;
    let (again, ate_again, _) = odometry_run(3);
    let same_traj = out.trajectory == again.trajectory;
    let same_map = encode_snapshot(&out.volume, &out.decoder) == encode_snapshot(&again.volume, &again.decoder);
    outcome(
        *ate < 0.05 && same_traj && same_map && *seconds < 600.0,
        format!(
            "100 frames, ATE RMSE {ate:.4} m (tol 0.05), {} fallbacks; rerun ATE {ate_again:.4}, trajectory identical {same_traj}, map identical {same_map}; {seconds:.0} s (limit 600)",
            out.diagnostics.fallbacks
        ),
    )
}

fn c10_hierarchy(three: f64) -> Outcome {
    let (out, one, _) = odometry_run(1);
    outcome(
        three <= one,
        format!(
            "ATE 3 levels {three:.4} m vs 1 level {one:.4} m ({} fallbacks)",
            out.diagnostics.fallbacks
        ),
    )
}

// ---------------------------------------------------------------- C9

fn c09_loss_analytics() -> Outcome {
    // Exact linear SDF along x on one level: features are the scaled x
    // coordinate of each corner, and the decoder passes feature 0 through.
    let params = VolumeParams {
        feature_levels: 1,
        ..VolumeParams::default()
    };
    let mut v = FeatureVolume::new(params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let pts = cloud(&mut rng, Vector3::zeros(), 50);
    v.insert_points(&pts, 1);
    let level = v.tables()[0].level;
    let corners: Vec<(u64, u32)> = v.tables()[0].corners.iter().map(|(k, r)| (*k, *r)).collect();
    for (key, row) in corners {
        let s = v.scale_to_unit(&v.corner_position(level, key)).unwrap();
        v.features_mut()[row as usize] = [0.0; FEATURE_DIM];
        v.features_mut()[row as usize][0] = s.x as f32;
    }
    let mut p = vec![0f32; PARAM_COUNT];
    p[0] = 1.0;
    p[384] = 1.0;
    p[416] = 1.0;
    p[1472] = 1.0;
    p[PARAM_COUNT - 1] = -1.0;
    let d = SdfDecoder::from_params(p).unwrap();
    let batch: Vec<LabeledSample> = pts
        .iter()
        .map(|p| LabeledSample {
            position: *p,
            gt_sdf: 0.0,
            surface_band: true,
            normal: Some(Vector3::x()),
        })
        .collect();
    let w = LossWeights::default();
    let (l, _) = total_loss(&batch, &v, &d, &w, false).unwrap();

    let bce0 = bce_loss(0.0, 0.0, w.alpha).unwrap();

    // Linearity in the weights: the component means do not move and the
    // total is their weighted sum.
    let (mv, md, model_batch) = loss_model(16);
    let (base, _) = total_loss(&model_batch, &mv, &md, &LossWeights { lambda1: 0.0, lambda2: 0.0, ..w }, false).unwrap();
    let mut linear = true;
    for (l1w, l2w) in [(0.1, 0.1), (1.0, 0.0), (0.0, 2.5), (0.37, 1.9)] {
        let (b, _) = total_loss(&model_batch, &mv, &md, &LossWeights { lambda1: l1w, lambda2: l2w, ..w }, false).unwrap();
        linear &= b.l1 == base.l1 && b.l2 == base.l2 && b.l3 == base.l3;
        linear &= b.total == base.l1 + l1w * base.l2 + l2w * base.l3;
    }
    outcome(
        l.l2 < 1e-12 && l.l3 < 1e-12 && l.in_map == batch.len() && (bce0 - std::f64::consts::LN_2).abs() < 1e-9 && linear,
        format!(
            "Eikonal {:.1e}, direction {:.1e} on {} samples (tol 1e-12); BCE(0,0) - ln 2 = {:.1e}; weight linearity exact {linear}",
            l.l2,
            l.l3,
            l.in_map,
            bce0 - std::f64::consts::LN_2
        ),
    )
}

// ---------------------------------------------------------------- C11

/// Independent reader for the binary PLY layout: header lines, then packed
/// little-endian vertices and `uchar`-counted `int` faces.
fn read_ply(bytes: &[u8]) -> Option<(Vec<[f32; 3]>, Vec<[i32; 3]>)> {
    let end = bytes.windows(11).position(|w| w == b"end_header\n")? + 11;
    let header = std::str::from_utf8(&bytes[..end]).ok()?;
    let mut lines = header.lines();
    if lines.next()? != "ply" || lines.next()? != "format binary_little_endian 1.0" {
        return None;
    }
    let (mut nv, mut nf, mut props) = (0usize, 0usize, 0usize);
    for l in header.lines() {
        let f: Vec<&str> = l.split_whitespace().collect();
        match f.as_slice() {
            ["element", "vertex", n] => nv = n.parse().ok()?,
            ["element", "face", n] => nf = n.parse().ok()?,
            ["property", "float", _] => props += 1,
            _ => {}
        }
    }
    let mut at = end;
    let f32_at = |b: &[u8], i: usize| f32::from_le_bytes(b[i..i + 4].try_into().unwrap());
    let mut verts = Vec::with_capacity(nv);
    for _ in 0..nv {
        verts.push([f32_at(bytes, at), f32_at(bytes, at + 4), f32_at(bytes, at + 8)]);
        at += 4 * props;
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        if bytes[at] != 3 {
            return None;
        }
        let i = |k: usize| i32::from_le_bytes(bytes[at + 1 + 4 * k..at + 5 + 4 * k].try_into().unwrap());
        faces.push([i(0), i(1), i(2)]);
        at += 13;
    }
    (at == bytes.len()).then_some((verts, faces))
}

fn c11_formats(mesh: &TriangleMesh) -> Outcome {
    let mut problems = Vec::new();

    let values = [1.5f32, -2.25, 0.125, 0.0, 10.0, 20.0, -30.5, 0.0, 3.0e-3, 7.75, -0.5, 0.0];
    let fixture: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let scan = parse_kitti_scan(&fixture).unwrap();
    let expect: Vec<Point3> = values.chunks(4).map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64)).collect();
    if scan.points != expect || encode_kitti_scan(&scan) != fixture {
        problems.push("KITTI fixture not byte exact".to_string());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let poses: Vec<RigidTransform> = (0..200)
        .map(|_| {
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            RigidTransform::from_axis_angle(
                &(axis.normalize() * rng.random_range(0.0..3.1)),
                Vector3::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0), rng.random_range(-50.0..50.0)),
            )
        })
        .collect();
    let records = records_from_poses(&poses);
    let mut worst = 0f64;
    for fmt in [TrajectoryFormat::Kitti, TrajectoryFormat::Tum] {
        let back = parse_trajectory(&format_trajectory(&records, fmt), fmt).unwrap();
        for (a, b) in records.iter().zip(&back) {
            worst = worst.max((a.pose.rotation - b.pose.rotation).abs().max());
            worst = worst.max((a.pose.translation - b.pose.translation).abs().max());
        }
        if back.len() != records.len() {
            problems.push(format!("{fmt:?} roundtrip lost records"));
        }
    }
    if worst >= 1e-9 {
        problems.push(format!("trajectory roundtrip error {worst:.2e}"));
    }

    let mut bytes = Vec::new();
    write_ply(mesh, &mut bytes).unwrap();
    let info = validate_ply(&bytes);
    let parsed = read_ply(&bytes);
    let ply_ok = match (&info, &parsed) {
        (Ok(info), Some((v, f))) => {
            info.vertices == mesh.vertices.len()
                && info.faces == mesh.triangles.len()
                && v.len() == mesh.vertices.len()
                && v.iter().zip(&mesh.vertices).all(|(a, b)| (0..3).all(|k| a[k] == b[k] as f32))
                && f.iter().zip(&mesh.triangles).all(|(a, b)| (0..3).all(|k| a[k] as u32 == b[k]))
        }
        _ => false,
    };
    if !ply_ok {
        problems.push(format!("PLY check failed: {info:?}"));
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "KITTI fixture byte exact; trajectory roundtrip max err {worst:.1e}; PLY with {} vertices / {} faces validated and re-read",
                mesh.vertices.len(),
                mesh.triangles.len()
            )
        } else {
            problems.join("; ")
        },
    )
}

// ----------------------------------------------------------------

fn selected() -> Option<Vec<u32>> {
    std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
}

#[test]
fn acceptance_criteria() {
    let only = selected();
    let want = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut failed = Vec::new();
    let mut check = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !want(id) {
            return;
        }
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        emit(id, name, &o);
        if !o.pass {
            failed.push(id);
        }
    };

    check(1, "morton roundtrip", &mut c01_morton);
    check(2, "trilinear partition of unity", &mut c02_partition_of_unity);
    check(3, "gradient fidelity", &mut c03_gradients);
    check(4, "odometry jacobian", &mut c04_jacobian);
    check(5, "submap merge", &mut c05_merge);

    let room = (want(6) || want(7) || want(11)).then(mapped_room);
    check(6, "mapping convergence", &mut || c06_mapping(room.as_ref().unwrap()));
    check(7, "pose recovery basin", &mut || c07_basin(room.as_ref().unwrap()));

    let run = (want(8) || want(10)).then(|| odometry_run(3));
    check(8, "end-to-end odometry", &mut || c08_odometry(run.as_ref().unwrap()));
    check(9, "loss analytics", &mut c09_loss_analytics);
    check(10, "hierarchy ablation", &mut || c10_hierarchy(run.as_ref().unwrap().1));
    check(11, "format fidelity", &mut || {
        let r = room.as_ref().unwrap();
        c11_formats(&extract_mesh(&r.out.volume, &r.out.decoder, 0.1, true).unwrap())
    });

    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

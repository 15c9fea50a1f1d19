use super::*;
use crate::tensor::warp;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn textures(seed: u64) -> Textures {
    sample_textures(&mut rng(seed), &TextureSpec::default())
}

fn still_config() -> GenConfig {
    GenConfig {
        max_joint_delta: 0.0,
        max_root_motion: 0.0,
        max_root_rotation: 0.0,
        max_background_motion: 0.0,
        ..GenConfig::default()
    }
}

#[test]
fn zero_deltas_repeat_the_pose() {
    let (a, b) = sample_pose_pair(&mut rng(1), &still_config());
    assert_eq!(a, b);
}

#[test]
fn pose_pairs_are_seeded() {
    let c = GenConfig::default();
    assert_eq!(
        sample_pose_pair(&mut rng(4), &c),
        sample_pose_pair(&mut rng(4), &c)
    );
    assert_ne!(
        sample_pose_pair(&mut rng(4), &c),
        sample_pose_pair(&mut rng(5), &c)
    );
}

#[test]
fn joint_angles_stay_in_range() {
    let c = GenConfig::default();
    let mut r = rng(2);
    for _ in 0..1000 {
        let (a, b) = sample_pose_pair(&mut r, &c);
        for pose in [&a, &b] {
            for (j, &(lo, hi)) in pose.joints.iter().zip(&c.joint_ranges) {
                assert!(*j >= lo && *j <= hi);
            }
        }
        for (ja, jb) in a.joints.iter().zip(&b.joints) {
            assert!((ja - jb).abs() <= c.max_joint_delta + 1e-12);
        }
        let d = ((b.root.0 - a.root.0).powi(2) + (b.root.1 - a.root.1).powi(2)).sqrt();
        assert!(d <= c.max_root_motion + 1e-12);
    }
}

#[test]
fn integer_translation_shifts_the_figure() {
    let sk = Skeleton::humanoid(64);
    let tex = textures(3);
    let (pose, _) = sample_pose_pair(&mut rng(3), &GenConfig::default());
    let (dx, dy) = (3i64, -2i64);
    let mut moved = pose.clone();
    moved.root = (pose.root.0 + dx as f64, pose.root.1 + dy as f64);
    let a = render(&pose, &sk, &tex, (0.0, 0.0), 64, 64);
    let b = render(&moved, &sk, &tex, (0.0, 0.0), 64, 64);
    let mut checked = 0;
    for y in 1..63i64 {
        for x in 1..63i64 {
            let s = a.segment_map.at(x as usize, y as usize);
            // Interior figure pixels: all 4-neighbours owned by the same segment.
            let interior = s >= 0
                && [(1, 0), (-1, 0), (0, 1), (0, -1)]
                    .iter()
                    .all(|&(ox, oy)| a.segment_map.at((x + ox) as usize, (y + oy) as usize) == s);
            let (tx, ty) = (x + dx, y + dy);
            if !interior || !(0..64).contains(&tx) || !(0..64).contains(&ty) {
                continue;
            }
            assert_eq!(b.segment_map.at(tx as usize, ty as usize), s);
            for c in 0..3 {
                let (va, vb) = (
                    a.image.at(c, y as usize, x as usize),
                    b.image.at(c, ty as usize, tx as usize),
                );
                assert!((va - vb).abs() < 1e-6, "({x},{y}) c{c}: {va} vs {vb}");
            }
            checked += 1;
        }
    }
    assert!(checked > 100, "only {checked} interior pixels");
}

#[test]
fn background_exactly_where_no_capsule() {
    let sk = Skeleton::humanoid(64);
    let (pose, _) = sample_pose_pair(&mut rng(6), &GenConfig::default());
    let r = render(&pose, &sk, &textures(6), (10.0, 20.0), 64, 64);
    let t = sk.transforms(&pose);
    for y in 0..64 {
        for x in 0..64 {
            let covered = sk.segments.iter().zip(&t).any(|(s, tr)| {
                let (lx, ly) = tr.apply_inverse(x as f64, y as f64);
                skeleton::capsule_contains(s, lx, ly)
            });
            assert_eq!(r.segment_map.at(x, y) == -1, !covered);
        }
    }
}

#[test]
fn renders_are_deterministic() {
    let sk = Skeleton::humanoid(64);
    let (pose, _) = sample_pose_pair(&mut rng(7), &GenConfig::default());
    let a = render(&pose, &sk, &textures(7), (1.5, 2.5), 64, 64);
    let b = render(&pose, &sk, &textures(7), (1.5, 2.5), 64, 64);
    assert_eq!(a.image, b.image);
    assert_eq!(a.segment_map, b.segment_map);
}

#[test]
fn identical_frames_have_zero_flow() {
    let sk = Skeleton::humanoid(64);
    let (pose, _) = sample_pose_pair(&mut rng(8), &GenConfig::default());
    let r = render(&pose, &sk, &textures(8), (5.0, 5.0), 64, 64);
    let (flow, mask) = ground_truth_flow(
        &pose,
        &pose,
        &sk,
        &r.segment_map,
        &r.local_coords,
        (5.0, 5.0),
        (5.0, 5.0),
    )
    .unwrap();
    assert!(flow.data().iter().all(|&v| v == 0.0));
    assert!(mask.data().iter().all(|&m| m == 1.0));
}

#[test]
fn rigid_translation_gives_constant_flow() {
    let sk = Skeleton::humanoid(64);
    let (pose, _) = sample_pose_pair(&mut rng(9), &GenConfig::default());
    let mut moved = pose.clone();
    moved.root.0 += 2.25;
    moved.root.1 -= 1.5;
    let r = render(&pose, &sk, &textures(9), (0.0, 0.0), 64, 64);
    let (flow, _) = ground_truth_flow(
        &pose,
        &moved,
        &sk,
        &r.segment_map,
        &r.local_coords,
        (0.0, 0.0),
        (2.25, -1.5),
    )
    .unwrap();
    assert!(flow.u().iter().all(|&u| (u - 2.25).abs() < 1e-5));
    assert!(flow.v().iter().all(|&v| (v + 1.5).abs() < 1e-5));
}

/// Elbow position written out by hand: pelvis, then torso, then upper arm.
fn left_elbow(pose: &Pose, sk: &Skeleton) -> (f64, f64) {
    let torso_angle = pose.root_angle + pose.joints[0];
    let (ax, ay) = sk.segments[2].attach;
    let shoulder = (
        pose.root.0 + torso_angle.cos() * ax - torso_angle.sin() * ay,
        pose.root.1 + torso_angle.sin() * ax + torso_angle.cos() * ay,
    );
    let arm_angle = torso_angle + pose.joints[2];
    let len = sk.segments[2].length;
    (
        shoulder.0 + arm_angle.cos() * len,
        shoulder.1 + arm_angle.sin() * len,
    )
}

#[test]
fn single_joint_rotation_matches_rotation_about_pivot() {
    let sk = Skeleton::humanoid(64);
    let (pose, _) = sample_pose_pair(&mut rng(10), &still_config());
    let theta = 0.13;
    let mut bent = pose.clone();
    bent.joints[3] += theta;
    let r = render(&pose, &sk, &textures(10), (0.0, 0.0), 64, 64);
    let (flow, _) = ground_truth_flow(
        &pose,
        &bent,
        &sk,
        &r.segment_map,
        &r.local_coords,
        (0.0, 0.0),
        (0.0, 0.0),
    )
    .unwrap();
    let pivot = left_elbow(&pose, &sk);
    let (c, s) = (theta.cos(), theta.sin());
    let mut forearm_pixels = 0;
    for y in 0..64 {
        for x in 0..64 {
            let p = y * 64 + x;
            let (want_u, want_v) = if r.segment_map.at(x, y) == 3 {
                forearm_pixels += 1;
                let (rx, ry) = (x as f64 - pivot.0, y as f64 - pivot.1);
                (
                    c * rx - s * ry + pivot.0 - x as f64,
                    s * rx + c * ry + pivot.1 - y as f64,
                )
            } else {
                (0.0, 0.0)
            };
            assert!((flow.u()[p] as f64 - want_u).abs() < 1e-4, "u at ({x},{y})");
            assert!((flow.v()[p] as f64 - want_v).abs() < 1e-4, "v at ({x},{y})");
        }
    }
    assert!(forearm_pixels > 10);
}

#[test]
fn ground_truth_rejects_mismatched_maps() {
    let sk = Skeleton::humanoid(64);
    let (pose, other) = sample_pose_pair(&mut rng(11), &GenConfig::default());
    let r = render(&pose, &sk, &textures(11), (0.0, 0.0), 64, 64);
    assert!(ground_truth_flow(
        &pose,
        &pose,
        &sk,
        &r.segment_map,
        &r.local_coords[1..],
        (0.0, 0.0),
        (0.0, 0.0)
    )
    .is_err());
    let mut moved = pose.clone();
    moved.root.0 += 5.0;
    let err = ground_truth_flow(
        &moved,
        &other,
        &sk,
        &r.segment_map,
        &r.local_coords,
        (0.0, 0.0),
        (0.0, 0.0),
    );
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn brightness_constancy_on_visible_pixels() {
    let config = GenConfig::default();
    let sk = Skeleton::humanoid(64);
    for i in 0..5 {
        let s = generate_sample(&config, &sk, i).unwrap();
        // Replay the stream until the accepted scene reproduces image 2.
        let mut r = sample_rng(&config, i);
        let seg2 = loop {
            let sc = draw_scene(&mut r, &config);
            let r2 = render(&sc.pose2, &sk, &sc.textures, sc.bg2, 64, 64);
            if r2.image == s.image2 {
                break r2.segment_map;
            }
        };
        let visible = unoccluded_mask(&s.gt_flow, &s.segment_map, &seg2);
        let warped = warp(&s.image2, &s.gt_flow).unwrap();
        let (mut sum, mut n) = (0.0f64, 0usize);
        for p in 0..64 * 64 {
            if visible[p] && s.valid_mask.data()[p] == 1.0 {
                for c in 0..3 {
                    sum += (warped.plane(c)[p] - s.image1.plane(c)[p]).abs() as f64;
                    n += 1;
                }
            }
        }
        let mae = sum / n as f64;
        assert!(n > 3 * 2000, "sample {i}: only {} visible pixels", n / 3);
        assert!(mae < 0.05, "sample {i}: MAE {mae}");
    }
}

#[test]
fn flow_respects_displacement_bound() {
    let config = GenConfig {
        samples: 20,
        ..GenConfig::default()
    };
    for s in generate_samples(&config).unwrap() {
        let max = s.gt_flow.magnitudes().into_iter().fold(0.0f32, f32::max);
        assert!(max as f64 <= config.displacement_bound());
        assert!(s.gt_flow.is_finite());
    }
}

#[test]
fn segments_move_rigidly() {
    let config = GenConfig {
        samples: 3,
        ..GenConfig::default()
    };
    for s in generate_samples(&config).unwrap() {
        for seg in -1..NUM_SEGMENTS as i32 {
            let pts: Vec<((f64, f64), (f64, f64))> = (0..64 * 64)
                .filter(|&p| s.segment_map.ids[p] == seg)
                .map(|p| {
                    let (x, y) = ((p % 64) as f64, (p / 64) as f64);
                    (
                        (x, y),
                        (x + s.gt_flow.u()[p] as f64, y + s.gt_flow.v()[p] as f64),
                    )
                })
                .collect();
            if pts.len() < 3 {
                continue;
            }
            // Closed-form 2-D Procrustes fit.
            let n = pts.len() as f64;
            let (mut sx, mut sy, mut tx, mut ty) = (0.0, 0.0, 0.0, 0.0);
            for ((a, b), (c, d)) in &pts {
                sx += a;
                sy += b;
                tx += c;
                ty += d;
            }
            let (sx, sy, tx, ty) = (sx / n, sy / n, tx / n, ty / n);
            let (mut num, mut den) = (0.0, 0.0);
            for ((a, b), (c, d)) in &pts {
                let (px, py, qx, qy) = (a - sx, b - sy, c - tx, d - ty);
                num += px * qy - py * qx;
                den += px * qx + py * qy;
            }
            let ang = num.atan2(den);
            let (co, si) = (ang.cos(), ang.sin());
            let worst = pts
                .iter()
                .map(|((a, b), (c, d))| {
                    let (px, py) = (a - sx, b - sy);
                    let (fx, fy) = (co * px - si * py + tx, si * px + co * py + ty);
                    ((fx - c).powi(2) + (fy - d).powi(2)).sqrt()
                })
                .fold(0.0, f64::max);
            assert!(worst < 1e-3, "segment {seg}: residual {worst}");
        }
    }
}

#[test]
fn translation_mode_has_constant_flow() {
    let config = GenConfig {
        mode: MotionMode::Translation,
        samples: 5,
        ..GenConfig::default()
    };
    for s in generate_samples(&config).unwrap() {
        let (u0, v0) = (s.gt_flow.u()[0], s.gt_flow.v()[0]);
        assert!((u0 * u0 + v0 * v0).sqrt() <= 6.0 + 1e-5);
        assert!(s.gt_flow.u().iter().all(|&u| (u - u0).abs() < 1e-4));
        assert!(s.gt_flow.v().iter().all(|&v| (v - v0).abs() < 1e-4));
    }
}

#[test]
fn config_validation() {
    assert!(GenConfig::default().validate().is_ok());
    let c = GenConfig {
        max_displacement: Some(20.0),
        ..GenConfig::default()
    };
    assert!(c.validate().is_err());
    let c = GenConfig {
        joint_ranges: vec![(0.0, 1.0); 3],
        ..GenConfig::default()
    };
    assert!(c.validate().is_err());
    let c = GenConfig {
        mode: MotionMode::Translation,
        max_translation: 17.0,
        ..GenConfig::default()
    };
    assert!(c.validate().is_err());
}

fn dir_listing(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn dataset_files_are_deterministic() {
    let config = GenConfig {
        samples: 4,
        seed: 17,
        ..GenConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&config, a.path()).unwrap();
    crate::parallel::with_enabled(true, || generate_dataset(&config, b.path())).unwrap();
    let (la, lb) = (dir_listing(a.path()), dir_listing(b.path()));
    assert_eq!(la, lb);
    assert_eq!((la.len() - 1) / 5, 4);
    assert_eq!(la.len() % 5, 1);
}

#[test]
fn empty_dataset_is_just_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = GenConfig {
        samples: 0,
        ..GenConfig::default()
    };
    let m = generate_dataset(&config, dir.path()).unwrap();
    assert!(m.samples.is_empty());
    let names: Vec<String> = dir_listing(dir.path())
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    assert_eq!(names, vec![dataset::MANIFEST_NAME.to_string()]);
    assert!(load_dataset(dir.path()).unwrap().samples.is_empty());
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let config = GenConfig {
        samples: 2,
        seed: 3,
        ..GenConfig::default()
    };
    generate_dataset(&config, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    let fresh = generate_samples(&config).unwrap();
    assert_eq!(loaded.manifest.config, config);
    for (l, f) in loaded.samples.iter().zip(&fresh) {
        assert_eq!(l.gt_flow.data(), f.gt_flow.data());
        assert_eq!(l.valid_mask, f.valid_mask);
        assert_eq!(l.segment_map, f.segment_map);
        // 8-bit quantization of the images.
        assert!(l.image1.max_abs_diff(&f.image1) <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn failed_generation_leaves_nothing_behind() {
    let parent = tempfile::tempdir().unwrap();
    let dir = parent.path().join("out");
    let config = GenConfig {
        samples: 2,
        max_displacement: Some(1e-3),
        max_root_motion: 0.0,
        max_background_motion: 0.0,
        ..GenConfig::default()
    };
    assert!(generate_dataset(&config, &dir).is_err());
    assert!(!dir.exists());
}

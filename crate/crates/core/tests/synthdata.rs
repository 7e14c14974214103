use std::collections::BTreeMap;
use std::path::Path;

use dn4dgs::synthdata::{
    chamfer, chamfer_brute_force, generate, generate_with_noise, load_dataset, positions_at, read_manifest,
    ClusterMotion, ImageFormat, SceneConfig, MANIFEST_FILE,
};
use proptest::prelude::*;

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_seed_writes_identical_files() {
    let cfg = SceneConfig::preset("tiny").unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(42, &cfg).unwrap().write(a.path()).unwrap();
    generate(42, &cfg).unwrap().write(&b.path().join("nested/out")).unwrap();
    let ta = read_tree(a.path());
    assert_eq!(ta, read_tree(&b.path().join("nested/out")));
    assert_eq!(ta.keys().filter(|k| k.starts_with("frames")).count(), cfg.frame_count());
    let c = tempfile::tempdir().unwrap();
    generate(43, &cfg).unwrap().write(c.path()).unwrap();
    assert_ne!(ta[MANIFEST_FILE], read_tree(c.path())[MANIFEST_FILE]);
}

#[test]
fn toy_preset_has_forty_frames_at_32px() {
    let cfg = SceneConfig::preset("toy").unwrap();
    assert_eq!(
        (cfg.n_gaussians, cfg.n_clusters, cfg.n_times, cfg.n_cameras, cfg.width, cfg.height),
        (200, 2, 10, 4, 32, 32)
    );
    let g = generate(0, &cfg).unwrap();
    assert_eq!(g.manifest.frames.len(), 40);
    assert_eq!(g.manifest.holdout.len() + g.manifest.train.len(), 40);
    assert!(g.manifest.holdout.iter().all(|&i| g.manifest.frames[i].camera == 3));
    for img in &g.images {
        assert_eq!(img.shape(), &[32, 32, 3]);
    }
}

#[test]
fn static_scene_frames_repeat_per_camera() {
    let g = generate(3, &SceneConfig::preset("static").unwrap()).unwrap();
    for (f, img) in g.manifest.frames.iter().zip(&g.images) {
        let first = g
            .manifest
            .frames
            .iter()
            .position(|o| o.camera == f.camera)
            .unwrap();
        assert_eq!(img, &g.images[first]);
    }
    assert_ne!(g.images[0], g.images[g.manifest.n_times()]);
}

#[test]
fn positions_follow_the_closed_form() {
    let g = generate(7, &SceneConfig::preset("tiny").unwrap()).unwrap();
    let truth = &g.truth;
    let base = truth.base.positions();
    for t in [0.0, 0.25, 0.5, 1.0] {
        let got = positions_at(truth, t).unwrap();
        for (i, p) in got.iter().enumerate() {
            let m = &truth.motions[truth.cluster[i]];
            let s = (2.0 * std::f64::consts::PI * m.frequency * t + m.phase).sin();
            for k in 0..3 {
                let want = base[i][k] + (m.velocity[k] * t + m.amplitude[k] * s);
                assert_eq!(p[k], want);
            }
        }
    }
    assert!(positions_at(truth, 1.5).is_err());
    assert!(positions_at(truth, -0.1).is_err());
}

#[test]
fn motion_examples() {
    let still = ClusterMotion {
        amplitude: [0.3, 0.1, 0.2],
        frequency: 1.0,
        ..ClusterMotion::still([1.0, 2.0, 3.0])
    };
    assert_eq!(still.offset(0.0), [0.0; 3]);
    let linear = ClusterMotion {
        velocity: [1.0, 0.0, 0.0],
        ..ClusterMotion::still([0.0; 3])
    };
    assert_eq!(linear.offset(0.5), [0.5, 0.0, 0.0]);
}

#[test]
fn injected_noise_matches_expected_jitter_norm() {
    let cfg = SceneConfig::preset("toy").unwrap();
    // E|X| for X ~ N(0, σ²I₃)
    let factor = 2.0 * (2.0 / std::f64::consts::PI).sqrt();
    for seed in 0..10 {
        let g = generate_with_noise(seed, &cfg, 0.02).unwrap();
        let truth = g.truth.positions_at(0.0).unwrap();
        let d = chamfer(&g.init.positions(), &truth).unwrap();
        let ratio = d / (factor * g.noise_sigma);
        assert!((ratio - 1.0).abs() <= 0.2, "seed {seed}: ratio {ratio}");
        assert!((g.noise_sigma - 0.02 * g.truth.extent()).abs() < 1e-15);
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    for format in [ImageFormat::Ppm, ImageFormat::Png] {
        let cfg = SceneConfig {
            image_format: format,
            sh_degree: 1,
            ..SceneConfig::preset("tiny").unwrap()
        };
        let g = generate(9, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        g.write(dir.path()).unwrap();
        let ds = load_dataset::<f64>(dir.path()).unwrap();
        assert_eq!(ds.manifest, g.manifest);
        assert_eq!(read_manifest(dir.path()).unwrap(), g.manifest);
        let mem = g.train_data::<f64>().unwrap();
        assert_eq!(ds.data.train, mem.train);
        assert_eq!(ds.data.holdout, mem.holdout);
        assert_eq!(ds.data.cameras, mem.cameras);
        assert_eq!(ds.init.unwrap(), g.init);
        let truth = ds.truth.unwrap();
        assert_eq!(truth, g.truth);
        for (f, img) in g.manifest.frames.iter().zip(&g.images) {
            assert_eq!(&truth.render_frame(f.camera, f.t).unwrap(), img);
        }
    }
}

#[test]
fn missing_manifest_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset::<f32>(dir.path()), Err(dn4dgs::Error::Io(_))));
}

fn points() -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 1..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn chamfer_matches_brute_force(a in points(), b in points()) {
        prop_assert_eq!(chamfer(&a, &b).unwrap(), chamfer_brute_force(&a, &b).unwrap());
    }

    #[test]
    fn chamfer_is_symmetric_and_zero_on_itself(a in points(), b in points()) {
        prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
    }
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dn4dgs::imageio::{quantize, read_image};
use dn4dgs::rasterizer::render;
use dn4dgs::training::{psnr, ssim};
use dn4dgs_cli::ablate::{cells, run_cells, Grid};
use dn4dgs_cli::run::{evaluate, load_run, load_source, train, Split, EVAL_HEADER};
use dn4dgs_cli::RunConfig;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dn4dgs"))
        .args(args)
        .env("DN4DGS_THREADS", "1")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
[scene]
preset = "tiny"
seed = 4

[train]
log_every = 4

[train.schedule]
total_iters = 12
stage1_iters = 6

[model.dsam]
k = 4
"#;

fn tiny_config() -> RunConfig {
    RunConfig::from_toml(TINY).unwrap()
}

#[test]
fn gen_data_writes_forty_frames_with_a_stable_hash() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("x/a"), dir.path().join("b"), dir.path().join("c"));
    let runs: Vec<String> = [(&a, "3"), (&b, "3"), (&c, "4")]
        .iter()
        .map(|(p, seed)| {
            let o = bin(&["gen-data", "--seed", seed, "--out", path(p)]);
            assert!(o.status.success());
            stdout(&o)
        })
        .collect();
    assert_eq!(fs::read_dir(a.join("frames")).unwrap().count(), 40);
    assert!(runs[0].starts_with("manifest_sha256="));
    assert_eq!(runs[0], runs[1]);
    assert_ne!(runs[0], runs[2]);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[train.schedule]\ntotal_iterations = 5\n").unwrap();
    let o = bin(&["train", "--config", path(&cfg), "--out", path(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin(&["gen-data", "--preset", "huge", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(bin(&["grad-check", "--scope", "everything"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three_and_keeps_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, format!("{TINY}\n[train.gaussian_lr]\nposition = 1e38\n")).unwrap();
    let run = dir.path().join("r");
    let o = bin(&["train", "--config", path(&cfg), "--out", path(&run)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(run.join("diverged.ckpt").exists());
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, TINY).unwrap();
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    assert!(bin(&["train", "--config", path(&cfg), "--out", path(&r1)]).status.success());
    let echo = r1.join("config.toml");
    assert!(bin(&["train", "--config", path(&echo), "--out", path(&r2)]).status.success());
    for f in ["log.csv", "final.ckpt", "config.toml", "init.toml", "run.toml"] {
        assert_eq!(fs::read(r1.join(f)).unwrap(), fs::read(r2.join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(r1.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn untrained_eval_equals_static_canonical_render() {
    let mut cfg = tiny_config();
    cfg.train.schedule.total_iters = 0;
    cfg.train.schedule.stage1_iters = 0;
    let dir = tempfile::tempdir().unwrap();
    let source = load_source::<f32>(&cfg, None).unwrap();
    train(&cfg, &source, dir.path()).unwrap();
    let run = load_run::<f32>(&dir.path().join("final.ckpt")).unwrap();
    let report = evaluate(&run, &source, Split::All).unwrap();
    let canonical = run.model.canonical();
    assert_eq!(canonical.mu, source.init.mu);
    let data = &source.data;
    let frames = data.train.iter().chain(&data.holdout).count();
    assert_eq!(report.frames.len(), frames);
    for row in &report.frames {
        let f = data.train.iter().chain(&data.holdout).find(|f| f.id == row.frame).unwrap();
        let img = render(&canonical, &data.cameras[f.camera], data.background_t()).unwrap().rgb;
        assert_eq!(row.psnr, psnr(&img, &f.image).unwrap());
        assert_eq!(row.ssim, ssim(&img, &f.image).unwrap());
    }
}

#[test]
fn render_reproduces_the_logged_holdout_psnr() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let source = load_source::<f32>(&cfg, None).unwrap();
    let summary = train(&cfg, &source, dir.path()).unwrap();
    let logged = summary.rows.last().unwrap().psnr_holdout;
    let ckpt = dir.path().join("final.ckpt");
    let run = load_run::<f32>(&ckpt).unwrap();
    let holdout = &source.data.holdout;
    let mut total = 0.0;
    for f in holdout {
        let img = run.render_view(f.camera, f.t).unwrap();
        total += psnr(&img, &f.image).unwrap();
    }
    let mean = total / holdout.len() as f64;
    assert!((mean - logged).abs() < 1e-4, "{mean} vs {logged}");

    let f = &holdout[0];
    let out = dir.path().join("views/v.ppm");
    let t = f.t.to_string();
    let cam = f.camera.to_string();
    let o = bin(&["render", "--ckpt", path(&ckpt), "--camera", &cam, "--t", &t, "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let written = read_image::<f32>(&out).unwrap();
    let direct = run.render_view(f.camera, f.t).unwrap();
    assert_eq!(quantize(&written).unwrap(), quantize(&direct).unwrap());

    let o = bin(&["render", "--ckpt", path(&ckpt), "--camera", "0", "--t", "1.01", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_prints_fixed_columns_and_chamfer() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(bin(&["gen-data", "--preset", "tiny", "--seed", "4", "--out", path(&data)]).status.success());
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("r");
    let o = bin(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&run)]);
    assert!(o.status.success());
    let ckpt = run.join("final.ckpt");
    let o = bin(&["eval", "--ckpt", path(&ckpt), "--data", path(&data)]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], EVAL_HEADER);
    // tiny preset: 3 times from the single holdout camera
    assert!(lines[4].starts_with("mean,,"));
    assert_eq!(lines[6], "t,chamfer_canonical,chamfer_stage1,chamfer_deformed");
    assert_eq!(lines.len(), 10);

    // in-memory generation of the same scene gives the same table
    let o = bin(&["eval", "--ckpt", path(&ckpt)]);
    assert_eq!(stdout(&o), text);

    let meta = run.join("run.toml");
    let bumped = fs::read_to_string(&meta).unwrap().replacen("version = 1", "version = 2", 1);
    fs::write(&meta, bumped).unwrap();
    assert_eq!(bin(&["eval", "--ckpt", path(&ckpt)]).status.code(), Some(2));
}

#[test]
fn design_row_without_modules_is_the_single_stage_baseline() {
    let mut base = tiny_config();
    base.train.schedule.total_iters = 6;
    base.train.schedule.stage1_iters = 3;
    let source = load_source::<f32>(&base, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let grid = cells(&base, &[Grid::Design]);
    let rows = run_cells(&grid[..1], &source, dir.path(), |_| {}).unwrap();

    let mut plain = base.clone();
    plain.model.nss = false;
    plain.model.tam.enabled = false;
    plain.model.dsam.enabled = false;
    let s = train(&plain, &source, &dir.path().join("plain")).unwrap();
    assert_eq!((rows[0].psnr, rows[0].ssim), (s.holdout_psnr, s.holdout_ssim));
    let log_a = fs::read(dir.path().join("design_00/log.csv")).unwrap();
    assert_eq!(log_a, fs::read(dir.path().join("plain/log.csv")).unwrap());
    assert!(String::from_utf8(log_a).unwrap().lines().skip(1).all(|l| l.contains(",stage1,")));
}

#[test]
fn grad_check_on_the_rasterizer_passes() {
    let o = bin(&["grad-check", "--scope", "rasterizer"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("scope,group,max_rel_err,status"));
    assert!(lines.all(|l| l.starts_with("rasterizer,") && l.ends_with(",ok")));
}

use dn4dgs::deformnet::{DeformModel, DsamConfig, HeadConfig, ModelConfig, Phase, TamConfig};
use dn4dgs::encoders::EncoderConfig;
use dn4dgs::nn::ParamKind;
use dn4dgs::synthdata::{generate, SceneConfig};
use dn4dgs::training::checkpoint::{load_store, read_arrays};
use dn4dgs::training::{
    decayed_lr, loss_value, psnr, ssim, ssim_value, LossConfig, Schedule, SsimParams, TrainConfig,
    TrainData, Trainer, LOG_HEADER,
};
use dn4dgs::{Array, Error};
use proptest::prelude::*;

fn data() -> (TrainData<f64>, dn4dgs::GaussianCloud<f64>) {
    let g = generate(2, &SceneConfig::preset("tiny").unwrap()).unwrap();
    (g.train_data().unwrap(), g.init)
}

fn small_model_config() -> ModelConfig {
    let enc = EncoderConfig {
        c1: 8,
        width: 16,
        depth: 1,
        resolution: 6,
        channels: 4,
        ..EncoderConfig::default()
    };
    ModelConfig {
        encoder: enc.clone(),
        encoder2: enc,
        tam: TamConfig {
            c2: 8,
            embed_dim: 4,
            ..TamConfig::default()
        },
        dsam: DsamConfig {
            k: 4,
            c3: 8,
            knn_refresh: 3,
            ..DsamConfig::default()
        },
        head: HeadConfig { width: 16, depth: 1 },
        ..ModelConfig::default()
    }
}

fn trainer(total: usize, stage1: usize) -> (Trainer<f64>, TrainData<f64>) {
    let (data, init) = data();
    let model = DeformModel::new(&small_model_config(), &init, data.n_times, 0).unwrap();
    let cfg = TrainConfig {
        schedule: Schedule {
            total_iters: total,
            stage1_iters: stage1,
            seed: 11,
            ..Schedule::default()
        },
        log_every: 5,
        ..TrainConfig::default()
    };
    (Trainer::new(model, cfg, &data).unwrap(), data)
}

fn stage2_values(t: &Trainer<f64>) -> Vec<Array<f64>> {
    t.model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("stage2."))
        .map(|(_, p)| p.value.clone())
        .collect()
}

#[test]
fn stage2_stays_at_init_when_stage1_covers_the_run() {
    let (mut tr, data) = trainer(12, 12);
    let before = stage2_values(&tr);
    let canon = tr.model.canonical();
    assert!(!before.is_empty());
    tr.run(&data, &mut Vec::new(), None).unwrap();
    assert_eq!(stage2_values(&tr), before);
    assert_ne!(tr.model.canonical().mu, canon.mu);
}

#[test]
fn stage2_moves_after_the_switch() {
    let (mut tr, data) = trainer(12, 6);
    let before = stage2_values(&tr);
    tr.run(&data, &mut Vec::new(), None).unwrap();
    assert_ne!(stage2_values(&tr), before);
}

#[test]
fn fixed_seed_gives_identical_logs() {
    let run = || {
        let (mut tr, data) = trainer(15, 8);
        let mut log = Vec::new();
        tr.run(&data, &mut log, None).unwrap();
        String::from_utf8(log).unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("5,stage1,"));
    assert!(lines[3].starts_with("15,two_stage,"));
}

#[test]
fn stage2_gradients_vanish_before_the_switch() {
    let (mut tr, data) = trainer(10, 5);
    for _ in 0..5 {
        tr.step(&data).unwrap();
    }
    let names: Vec<String> = tr.model.store.iter().map(|(_, p)| p.name.clone()).collect();
    for frame in &data.train {
        let (_, grads) = tr.gradients(&data, frame, Phase::Stage1Only).unwrap();
        for (name, g) in names.iter().zip(&grads) {
            if name.starts_with("stage2.") {
                assert!(g.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let (_, grads) = tr.gradients(&data, frame, Phase::TwoStage).unwrap();
        let head_live = names
            .iter()
            .zip(&grads)
            .any(|(n, g)| n.starts_with("stage2.head") && g.data().iter().any(|&v| v != 0.0));
        assert!(head_live);
    }
}

#[test]
fn loss_is_continuous_at_the_switch() {
    let (mut tr, data) = trainer(20, 8);
    for _ in 0..8 {
        tr.step(&data).unwrap();
    }
    assert_eq!(tr.phase_at(7), Phase::Stage1Only);
    assert_eq!(tr.phase_at(8), Phase::TwoStage);
    for frame in data.train.iter().chain(&data.holdout) {
        let a = tr.frame_loss(&data, frame, Phase::Stage1Only).unwrap();
        let b = tr.frame_loss(&data, frame, Phase::TwoStage).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn divergence_aborts_with_a_checkpoint() {
    let (mut tr, data) = trainer(10, 5);
    let id = tr.model.store.find("cloud.sigma_logit").unwrap();
    tr.model.store.value_mut(id).data_mut()[0] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    let err = tr.run(&data, &mut Vec::new(), Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::DivergedLoss { iter: 0 }));
    let saved = read_arrays::<f64>(&dir.path().join("diverged.ckpt")).unwrap();
    assert_eq!(saved.len(), tr.model.store.len());
    assert!(!dir.path().join("final.ckpt").exists());
}

#[test]
fn checkpoints_reload_into_a_fresh_model() {
    let (mut tr, data) = trainer(6, 3);
    tr.cfg.checkpoint_every = 2;
    let dir = tempfile::tempdir().unwrap();
    tr.run(&data, &mut Vec::new(), Some(dir.path())).unwrap();
    for f in ["iter_000002.ckpt", "iter_000004.ckpt", "final.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let (fresh_data, init) = self::data();
    let mut fresh = DeformModel::new(&small_model_config(), &init, fresh_data.n_times, 0).unwrap();
    load_store(&dir.path().join("final.ckpt"), &mut fresh.store).unwrap();
    for ((_, a), (_, b)) in fresh.store.iter().zip(tr.model.store.iter()) {
        assert_eq!(a.name, b.name);
        let narrowed = b.value.map(|v| v as f32 as f64);
        assert_eq!(a.value, narrowed);
    }
}

#[test]
fn learning_rates_follow_the_closed_form() {
    let (tr, data) = trainer(3000, 1000);
    let s = &tr.cfg.schedule;
    for i in [0, 1, 999, 1000, 1500, 2999, 3000] {
        let want = s.lr0 * (s.lr_final / s.lr0).powf(i as f64 / 3000.0);
        assert_eq!(tr.lr(ParamKind::Network, i), want);
        let grid = s.grid_lr0 * (s.grid_lr_final / s.grid_lr0).powf(i as f64 / 3000.0);
        assert_eq!(tr.lr(ParamKind::Grid, i), grid);
    }
    assert_eq!(tr.lr(ParamKind::Network, 3000), s.lr_final);
    let extent = data.camera_extent();
    assert!((tr.lr(ParamKind::Position, 0) - 1.6e-4 * extent).abs() < 1e-18);
}

#[test]
fn constant_images_match_hand_ssim() {
    let (a, b) = (0.6, 0.5);
    let x = Array::full(vec![16, 16, 3], a);
    let y = Array::full(vec![16, 16, 3], b);
    let c1: f64 = 0.01f64.powi(2);
    let s = (2.0 * a * b + c1) / (a * a + b * b + c1);
    assert!((ssim(&x, &y).unwrap() - s).abs() < 1e-12);
    let cfg = LossConfig::default();
    let want = 0.9 * 0.1 + 0.1 * (1.0 - s) / 2.0;
    assert!((loss_value(&x, &y, 0.0, &cfg).unwrap() - want).abs() < 1e-12);
    let tv = 0.25;
    assert!((loss_value(&x, &y, tv, &cfg).unwrap() - want - tv).abs() < 1e-12);
}

#[test]
fn psnr_of_mse_one_hundredth_is_twenty_db() {
    let a = Array::<f64>::zeros(vec![5, 5, 4]);
    let b = Array::from_fn(vec![5, 5, 4], |i| if i % 25 == 7 { 0.5 } else { 0.0 });
    assert_eq!(psnr(&a, &b).unwrap(), 20.0);
    assert_eq!(psnr(&b, &b).unwrap(), 99.0);
    assert_eq!(ssim(&b, &b).unwrap(), 1.0);
}

fn image(seed: u64, h: usize, w: usize) -> Array<f64> {
    Array::from_fn(vec![h, w, 3], |i| {
        let v = ((i as u64 + 1).wrapping_mul(seed.wrapping_mul(2654435761) | 1) % 1009) as f64;
        v / 1008.0
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lr_decay_is_monotone_between_endpoints(
        lr0 in 1e-6f64..1e-1, ratio in 1e-4f64..1.0, total in 1usize..10_000, i in 0usize..10_000,
    ) {
        let lr_final = lr0 * ratio;
        let i = i % (total + 1);
        let v = decayed_lr(lr0, lr_final, i, total);
        prop_assert_eq!(v, lr0 * (lr_final / lr0).powf(i as f64 / total as f64));
        prop_assert!(v <= lr0 * (1.0 + 1e-12) && v >= lr_final * (1.0 - 1e-12));
        prop_assert_eq!(decayed_lr(lr0, lr_final, 0, total), lr0);
    }

    #[test]
    fn loss_is_nonnegative_and_zero_only_on_equal_images(
        sa in 1u64..1000, sb in 1u64..1000, lambda in 0.0f64..=1.0, tv in 0.0f64..1.0,
    ) {
        let (a, b) = (image(sa, 12, 13), image(sb, 12, 13));
        let cfg = LossConfig { lambda, ..LossConfig::default() };
        let l = loss_value(&a, &b, tv, &cfg).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(loss_value(&a, &a, 0.0, &cfg).unwrap(), 0.0);
        if a != b && lambda > 0.0 {
            prop_assert!(loss_value(&a, &b, 0.0, &cfg).unwrap() > 0.0);
        }
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(sa in 1u64..1000, sb in 1u64..1000, h in 3usize..20, w in 3usize..20) {
        let (a, b) = (image(sa, h, w), image(sb, h, w));
        let p = SsimParams::default();
        let ab = ssim_value(&a, &b, &p).unwrap();
        let ba = ssim_value(&b, &a, &p).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9);
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((ssim_value(&a, &a, &p).unwrap() - 1.0).abs() <= 1e-12);
    }
}

use cloudfill_core::cloudsim::{CloudMask, Provenance};
use cloudfill_core::dataio::{synth_scene, tile_scene, TileSample, DEFAULT_MSI_DAYS, N_MSI_BANDS, T_MSI};
use cloudfill_core::evalmetrics::*;
use cloudfill_core::gradsuite::tiny_config;
use cloudfill_core::render::{png_bytes, render_mosaic, RenderRow, RenderSpec};
use cloudfill_core::tensor::Tensor;
use cloudfill_core::trainer::*;
use cloudfill_core::vit::{ModelParams, Variant};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

mod common;
use common::{checkerboard, ssim_reference};

#[test]
fn ssim_matches_reference_on_checkerboard() {
    let t = checkerboard();
    let p = t.map(|v| 1.0 - v);
    let got = ssim(&p, &t).unwrap();
    let want = ssim_reference(p.data(), t.data(), 32);
    assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    assert!(got < 0.2 && got > -1.0);
    assert!((got - PINNED_SSIM).abs() <= 1e-9, "{got}");
    let q = t.map(|v| (v * 0.9 + 0.03).sqrt());
    assert!((ssim(&q, &t).unwrap() - ssim_reference(q.data(), t.data(), 32)).abs() <= 1e-6);
}

const PINNED_SSIM: f64 = -0.9370721913971654;

#[test]
fn ssim_identities() {
    let t = checkerboard();
    assert!((ssim(&t, &t).unwrap() - 1.0).abs() <= 1e-6);
    let c = Tensor::<f64>::full([16, 16], 0.5);
    assert!((ssim(&c, &c).unwrap() - 1.0).abs() <= 1e-12);
    let small = Tensor::<f64>::from_fn([3, 6, 6], |i| (i % 7) as f64 / 7.0);
    assert!((ssim(&small, &small).unwrap() - 1.0).abs() <= 1e-6);
}

#[test]
fn psnr_examples() {
    assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-9);
    assert!((psnr_from_mse(0.009, 1.0) - 20.457_574_905_606_75).abs() < 1e-9);
    assert_eq!(psnr_from_mse(0.0, 1.0), f64::INFINITY);
    let ladder: Vec<f64> = [1e-4, 1e-3, 0.005, 0.01, 0.1, 0.5].iter().map(|&m| psnr_from_mse(m, 1.0)).collect();
    assert!(ladder.windows(2).all(|w| w[1] < w[0]));
}

fn tile60() -> TileSample {
    tile_scene(&synth_scene(11, 60, 60).unwrap(), 60).unwrap().remove(0)
}

fn flat(s: &TileSample) -> Tensor {
    s.msi.clone().reshape([66, 60, 60]).unwrap()
}

fn frame_mask(frames: &[usize]) -> CloudMask {
    let mut m = Tensor::zeros([6, 60, 60]);
    for &f in frames {
        m.data_mut()[f * 3600..(f + 1) * 3600].fill(1.0);
    }
    CloudMask::new(m, Provenance::Synthetic).unwrap()
}

#[test]
fn evaluate_tile_examples() {
    let s = tile60();
    let valid = s.validity();
    let m = frame_mask(&[2]);
    let r = evaluate_tile(&flat(&s), &s, &m, &valid).unwrap();
    let full = r.full.unwrap();
    assert_eq!((full.mse, full.sam), (0.0, 0.0));
    assert!((full.ssim - 1.0).abs() < 1e-6);
    assert_eq!(full.psnr, f64::INFINITY);

    let mut pred = flat(&s);
    pred.data_mut()[22 * 3600..33 * 3600].fill(0.0);
    let r = evaluate_tile(&pred, &s, &m, &valid).unwrap();
    let want: f64 = s.msi.data()[22 * 3600..33 * 3600].iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / (11.0 * 3600.0);
    let masked = r.masked.unwrap();
    assert!((masked.mse - want).abs() < 1e-9);
    assert!((r.full.unwrap().mse - masked.mse / 6.0).abs() < 1e-9);
    let clear = evaluate_tile(&pred, &s, &CloudMask::zeros(6, 60, 60, Provenance::Synthetic), &valid).unwrap();
    assert!(clear.masked.is_none());
}

#[test]
fn interp_baseline_examples() {
    let s = tile60();
    assert!(interp_baseline(&s, &frame_mask(&[])).unwrap().bit_eq(&flat(&s)));

    let mut lin = s.clone();
    lin.msi = Tensor::from_fn([6, 11, 60, 60], |i| {
        let (t, rest) = (i / (11 * 3600), i % (11 * 3600));
        0.1 + 0.0005 * rest as f32 / 100.0 + 0.004 * (DEFAULT_MSI_DAYS[t] - 126) as f32
    });
    let out = interp_baseline(&lin, &frame_mask(&[1, 2, 4])).unwrap();
    let worst = out.data().iter().zip(lin.msi.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(worst <= 1e-6, "{worst}");

    let mut mid = s.clone();
    mid.msi = Tensor::from_fn([6, 11, 60, 60], |i| [0.5, 0.1, 0.2, 0.9, 0.4, 0.7][i / (11 * 3600)]);
    let out = interp_baseline(&mid, &frame_mask(&[2])).unwrap();
    assert!((out.data()[2 * 11 * 3600] - 0.5).abs() < 1e-7);
    let out = interp_baseline(&mid, &frame_mask(&[0, 1, 2, 3, 4])).unwrap();
    assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-7));
    let out = interp_baseline(&mid, &frame_mask(&[0, 1, 2, 3, 4, 5])).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

fn metrics(mse: f64, psnr: f64) -> Metrics {
    Metrics { mse, sam: mse * 2.0, psnr, ssim: 1.0 - mse }
}

fn key(seed: &str) -> ReportKey {
    ReportKey { model: "M".into(), variant: "m".into(), seed: seed.into(), cloud_count: Some(20), split: "val".into() }
}

#[test]
fn aggregation_examples() {
    let rec = |id: &str, m: Metrics| TileRecord { tile_id: id.into(), full: Some(m), masked: Some(m) };
    let one = aggregate(&[rec("a", metrics(0.01, 20.0))], key("1")).unwrap();
    assert_eq!(one.full, metrics(0.01, 20.0));
    let two = aggregate(&[rec("a", metrics(0.01, 20.0)), rec("b", metrics(0.03, f64::INFINITY))], key("1")).unwrap();
    assert!((two.full.mse - 0.02).abs() < 1e-15);
    assert_eq!((two.full.psnr, two.n_psnr_inf), (20.0, 1));
    assert!(aggregate(&[], key("1")).is_err());
    let runs: Vec<EvalReport> = [0.01, 0.02, 0.06]
        .iter()
        .enumerate()
        .map(|(i, &m)| aggregate(&[rec("a", metrics(m, 10.0 + i as f64))], key(&i.to_string())).unwrap())
        .collect();
    let avg = average_reports(&runs, key("AVG")).unwrap();
    assert!((avg.full.mse - 0.03).abs() < 1e-15);
    assert!((avg.full.psnr - 11.0).abs() < 1e-12);
    assert_eq!(avg.n_tiles, 3);
}

#[test]
fn metrics_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let rec = TileRecord { tile_id: "a".into(), full: Some(metrics(0.01, 20.0)), masked: None };
    let r = aggregate(&[rec], key("3")).unwrap();
    save_metrics_csv(&path, &[r.clone()]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    let rows = read_metrics_csv(&path).unwrap();
    assert_eq!(rows, vec![MetricsRow::from(&r)]);
    assert_eq!(rows[0].mse_masked, None);
}

fn overfit_tiles() -> Vec<TileSample> {
    tile_scene(&synth_scene(7, 60, 60).unwrap(), 10).unwrap().into_iter().step_by(4).collect()
}

fn tiny_run(epochs: usize) -> RunConfig {
    RunConfig {
        epochs,
        validate_each_epoch: false,
        eval_cloud_counts: vec![0, 3],
        vit: tiny_config(Variant::SmtsVit),
        ..Default::default()
    }
}

#[test]
fn training_is_bit_reproducible() {
    let tiles = overfit_tiles();
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let cfg = RunConfig { output_dir: Some(dir.path().join(sub)), ..tiny_run(2) };
        (train(&cfg, &tiles, &tiles[..2]).unwrap(), cfg.run_dir().unwrap())
    };
    let ((a, da), (b, db)) = (run("a"), run("b"));
    assert_eq!(a.log.steps, b.log.steps);
    assert_eq!(a.log.epochs, b.log.epochs);
    assert_eq!(a.params, b.params);
    for f in ["index.json", "patch.kernel.tsr", "decoder.weight.tsr"] {
        let read = |d: &std::path::Path| std::fs::read(d.join("epoch-001").join(f)).unwrap();
        assert_eq!(read(&da), read(&db), "{f}");
    }
    assert_eq!(std::fs::read(da.join("train_log.csv")).unwrap(), std::fs::read(db.join("train_log.csv")).unwrap());
}

#[test]
fn zero_learning_rate_keeps_init() {
    let tiles = overfit_tiles();
    let cfg = RunConfig { lr: 0.0, ..tiny_run(1) };
    let out = train(&cfg, &tiles, &[]).unwrap();
    assert_eq!(out.params, ModelParams::init(&cfg.vit, cfg.seed).unwrap());
}

#[test]
fn training_leaves_targets_untouched() {
    let tiles = overfit_tiles();
    let before = tiles.clone();
    train(&tiny_run(1), &tiles, &tiles[..1]).unwrap();
    for (a, b) in tiles.iter().zip(&before) {
        assert!(a.msi.bit_eq(&b.msi) && a.sar.bit_eq(&b.sar) && a.real_cloud.bit_eq(&b.real_cloud));
    }
}

#[test]
fn smoothed_loss_trends_down_over_first_fifty_steps() {
    let tiles = overfit_tiles();
    let out = train(&tiny_run(25), &tiles, &[]).unwrap();
    let losses: Vec<f64> = out.log.steps.iter().take(50).map(|s| s.loss).collect();
    assert_eq!(losses.len(), 50);
    let windows: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
    assert!(windows.windows(2).all(|w| w[1] <= w[0]), "{windows:?}");
}

#[test]
fn checkpoint_round_trip_reproduces_eval_report() {
    let tiles = overfit_tiles();
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { output_dir: Some(dir.path().to_path_buf()), ..tiny_run(1) };
    let out = train(&cfg, &tiles, &[]).unwrap();
    let loaded = load_checkpoint(&cfg.run_dir().unwrap().join("final"), Some(&cfg.vit)).unwrap();
    let a = evaluate(&out.params, &cfg, &tiles, 3, "val").unwrap();
    let b = evaluate(&loaded, &cfg, &tiles, 3, "val").unwrap();
    assert_eq!(a, b);
    assert_eq!(a, evaluate(&out.params, &cfg, &tiles, 3, "val").unwrap());
    assert!(a.masked.is_some());
    let zero = evaluate(&out.params, &cfg, &tiles, 0, "val").unwrap();
    assert!(zero.masked.is_none() && zero.full.mse.is_finite());
    let base = evaluate_baseline(&cfg, &tiles, 3, "val").unwrap();
    assert_eq!((base.key.model.as_str(), base.n_tiles), ("Interp", tiles.len()));
}

#[test]
fn eval_masks_do_not_depend_on_the_run() {
    let t = &overfit_tiles()[0];
    let cloud = tiny_run(1).cloud;
    assert_eq!(eval_mask(&cloud, 3, t).unwrap(), eval_mask(&cloud, 3, t).unwrap());
    assert_ne!(train_mask(&cloud, 1, 1, t).unwrap(), train_mask(&cloud, 1, 2, t).unwrap());
    assert_ne!(train_mask(&cloud, 1, 1, t).unwrap(), train_mask(&cloud, 2, 1, t).unwrap());
}

#[test]
fn run_matrix_rows_and_averages() {
    let tiles = overfit_tiles();
    let base = RunConfig { eval_cloud_counts: vec![2, 3, 4], ..tiny_run(1) };
    let sets = [EvalSet { split: "val".into(), tiles: tiles[..3].to_vec() }];
    let rows = run_matrix(&base, &Variant::ALL, &[5], &tiles[3..], &sets).unwrap();
    assert_eq!(rows.len(), 12);
    for (v, chunk) in Variant::ALL.iter().zip(rows.chunks(4)) {
        let avg = &chunk[3];
        assert_eq!(avg.key.model, format!("{v} (AVG)"));
        assert_eq!((avg.key.seed.as_str(), avg.key.cloud_count), ("AVG", None));
        let mean = chunk[..3].iter().map(|r| r.full.mse).sum::<f64>() / 3.0;
        assert!((avg.full.mse - mean).abs() < 1e-15);
        assert!(chunk[..3].iter().all(|r| r.key.variant == v.key() && r.key.seed == "5"));
    }
}

#[test]
fn run_config_defaults_and_toml() {
    let d = RunConfig::default();
    assert_eq!((d.epochs, d.lr, d.batch_size, d.seed, d.n_seeds), (100, 1e-4, 8, 42, 3));
    assert_eq!(d.eval_cloud_counts, vec![20, 30, 40]);
    assert_eq!(d.seeds(), vec![42, 43, 44]);
    let back: RunConfig = toml::from_str(&d.to_toml().unwrap()).unwrap();
    assert_eq!(back, d);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.toml");
    std::fs::write(&p, "epochs = 3\nmanifest = \"data/manifest.json\"\n[vit]\nvariant = \"mts_vit\"\n").unwrap();
    let cfg = RunConfig::load(&p).unwrap();
    assert_eq!((cfg.epochs, cfg.vit.variant), (3, Variant::MtsVit));
    assert_eq!(cfg.manifest.unwrap(), dir.path().join("data/manifest.json"));
    std::fs::write(&p, "epochs = 3\nbogus = 1\n").unwrap();
    assert!(RunConfig::load(&p).is_err());
}

#[test]
fn render_golden_hash() {
    let s = tile_scene(&synth_scene(3, 60, 60).unwrap(), 20).unwrap().remove(4);
    let mut black = Tensor::zeros([T_MSI, 20, 20]);
    black.data_mut()[2 * 400..2 * 400 + 60].fill(1.0);
    let dim = s.msi.map(|v| v * 0.5);
    let rows = [
        RenderRow { label: "Inputs".into(), frames: dim, black: None },
        RenderRow { label: "Targets".into(), frames: s.msi.clone(), black: Some(black) },
    ];
    let img = render_mosaic(&RenderSpec::default(), &rows, &DEFAULT_MSI_DAYS).unwrap();
    assert_eq!((img.width(), img.height()), (7 * 8 + 4 + 6 * 42 + 2, 12 + 2 * 42 + 2));
    let bytes = png_bytes(&img).unwrap();
    assert_eq!(bytes, png_bytes(&img).unwrap());
    assert_eq!(hex::encode(Sha256::digest(&bytes)), PINNED_PNG);
    assert_eq!(s.msi.shape()[1], N_MSI_BANDS);
}

const PINNED_PNG: &str = "9f872a37a3a154dd19a825b40602528c1117b759c6edf686e10d169f57d297d3";

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_is_reflexive_and_symmetric(seed in any::<u64>(), n in 4usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::from_fn([2, n, n], |_| rng.gen());
        let b = Tensor::<f64>::from_fn([2, n, n], |_| rng.gen());
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-6);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-6);
    }

    #[test]
    fn masked_mse_scales_to_full(seed in any::<u64>(), n in 1usize..30) {
        let s = tile60();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = cloudfill_core::cloudsim::generate_mask(
            &cloudfill_core::cloudsim::CloudGenConfig { n_clouds: n, seed, ..Default::default() }, 6, 60, 60).unwrap();
        let mut pred = flat(&s);
        for t in 0..6 {
            for b in 0..11 {
                for p in 0..3600 {
                    if mask.tensor().data()[t * 3600 + p] != 0.0 {
                        pred.data_mut()[(t * 11 + b) * 3600 + p] = rng.gen();
                    }
                }
            }
        }
        let r = evaluate_tile(&pred, &s, &mask, &s.validity()).unwrap();
        let frac = mask.tensor().data().iter().map(|&v| v as f64).sum::<f64>() / (6.0 * 3600.0);
        if let Some(m) = r.masked {
            prop_assert!(m.mse >= 0.0);
            prop_assert!((r.full.unwrap().mse - m.mse * frac).abs() <= 1e-9);
        }
    }
}

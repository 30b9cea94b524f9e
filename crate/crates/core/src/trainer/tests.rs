use super::*;
use crate::image_ops::Image;
use crate::template_memory::TileMode;
use proptest::prelude::*;

fn ramp(h: usize, w: usize) -> Image {
    Image::from_fn(1, h, w, |_, _, x| -1.0 + 2.0 * x as f32 / (w - 1) as f32).unwrap()
}

fn checker(h: usize, w: usize, period: usize) -> Image {
    Image::from_fn(3, h, w, |c, y, x| {
        let on = (y / (period / 2) + x / (period / 2)) % 2 == 0;
        match (on, c) {
            (true, _) => 0.8,
            (false, 0) => -0.6,
            (false, _) => -0.2,
        }
    })
    .unwrap()
}

fn tiny(kind: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("unet.depth", "2"),
        ("unet.base_channels", "4"),
        ("unet.noise_channels", "2"),
        ("disc.layers", "2"),
        ("disc.base_channels", "4"),
        ("memory.n", "2"),
        ("train.patch", "16"),
        ("train.batch", "2"),
        ("train.snapshot_every", "0"),
        ("train.seed", "11"),
        ("loss.kind", kind),
        ("loss.w_ent_a", "0.1"),
        ("loss.w_tv_alpha", "0.1"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn trainer(cfg: RunConfig) -> Trainer {
    Trainer::new(cfg, vec![ramp(24, 24)], vec![checker(20, 20, 4)]).unwrap()
}

fn softmax_field(s: Shape, logits: impl Fn(usize, usize, usize, usize) -> f32) -> Tensor {
    let mut t = Tensor::from_fn(s, &logits);
    for b in 0..s.n() {
        for y in 0..s.h() {
            for x in 0..s.w() {
                let z: f32 = (0..s.c()).map(|k| t.at(b, k, y, x).exp()).sum();
                for k in 0..s.c() {
                    let v = t.at(b, k, y, x).exp() / z;
                    *t.at_mut(b, k, y, x) = v;
                }
            }
        }
    }
    t
}

use crate::tensor::Shape;

#[test]
fn one_hot_mixture_collapses_low() {
    let s = Shape::new(2, 4, 3, 3);
    let m = Tensor::from_fn(s, |_, k, _, _| if k == 1 { 1.0 } else { 0.0 });
    let r = monitor_collapse(Some(&m), 10);
    assert_eq!(r.verdict, Verdict::CollapseLow);
    assert_eq!(r.mean_entropy, 0.0);
    assert_eq!(r.usage, vec![0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn uniform_mixture_collapses_high_after_warmup() {
    let m = Tensor::full(Shape::new(1, 4, 2, 2), 0.25);
    assert_eq!(monitor_collapse(Some(&m), COLLAPSE_WARMUP).verdict, Verdict::Healthy);
    let r = monitor_collapse(Some(&m), COLLAPSE_WARMUP + 1);
    assert_eq!(r.verdict, Verdict::CollapseHigh);
    assert!((r.mean_entropy - 4f64.ln()).abs() < 1e-6);
}

#[test]
fn half_entropy_is_healthy() {
    // two of four templates at 1/2 each: entropy ln 2 = 0.5 ln 4
    let m = Tensor::from_fn(Shape::new(1, 4, 2, 2), |_, k, _, _| if k < 2 { 0.5 } else { 0.0 });
    let r = monitor_collapse(Some(&m), 1000);
    assert!((r.mean_entropy - 0.5 * 4f64.ln()).abs() < 1e-6);
    assert_eq!(r.verdict, Verdict::Healthy);
}

#[test]
fn no_memory_is_healthy() {
    assert_eq!(monitor_collapse(None, 500).verdict, Verdict::Healthy);
}

proptest! {
    #[test]
    fn usage_is_mean_mixture_and_sums_to_one(seed in 0u64..1000, n in 2usize..6) {
        let mut rng = RngState::new(seed);
        let s = Shape::new(2, n, 3, 4);
        let noise: Vec<f32> = (0..s.len()).map(|_| rng.uniform_range(-3.0, 3.0) as f32).collect();
        let m = softmax_field(s, |b, k, y, x| noise[s.index(b, k, y, x)]);
        let r = monitor_collapse(Some(&m), 0);
        prop_assert!((r.usage.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        for k in 0..n {
            let mut acc = 0.0f64;
            for b in 0..2 { for y in 0..3 { for x in 0..4 { acc += m.at(b, k, y, x) as f64; } } }
            prop_assert!((r.usage[k] - acc / 24.0).abs() < 1e-5);
        }
    }
}

fn memory_for(h: usize, w: usize) -> Memory {
    let bank = build_memory(&[checker(12, 12, 4)], 2, (h, w), TileMode::Mirror, &mut RngState::new(3)).unwrap();
    Memory::new(Some(bank), (h, w))
}

#[test]
fn aligned_crops_share_coordinates() {
    let contents = vec![ramp(40, 40).to_rgb()];
    let styles = vec![checker(20, 20, 4)];
    let memory = memory_for(40, 40);
    let b = sample_batch(&contents, &styles, &memory, 16, 6, CropMode::Aligned, &mut RngState::new(1)).unwrap();
    for (c, m) in b.content_at.iter().zip(&b.memory_at) {
        assert_eq!((c.1, c.2), *m);
    }
    // the ψ crop is the restriction of the global field
    let (r, c) = b.memory_at[0];
    let want = memory.bank().unwrap().coords().crop(r, c, 16, 16).unwrap();
    assert_eq!(b.coords.sample(0), want.tensor().data());
    assert_eq!(b.templates.as_ref().unwrap().shape(), Shape::new(6, 6, 16, 16));
}

#[test]
fn independent_crops_pass_chi_square() {
    // content 80x80, patch 16: 65 positions per axis, binned into 4 bins of
    // the content row and 4 of the memory row
    let contents = vec![ramp(80, 80).to_rgb()];
    let styles = vec![checker(20, 20, 4)];
    let memory = memory_for(80, 80);
    let mut rng = RngState::new(2024);
    let mut table = [[0f64; 4]; 4];
    let bin = |r: usize| (r * 4 / 65).min(3);
    for _ in 0..1000 {
        let b = sample_batch(&contents, &styles, &memory, 16, 1, CropMode::Independent, &mut rng).unwrap();
        table[bin(b.content_at[0].1)][bin(b.memory_at[0].0)] += 1.0;
    }
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..4).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut chi2 = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            let e = rows[i] * cols[j] / 1000.0;
            chi2 += (table[i][j] - e).powi(2) / e;
        }
    }
    // 0.99 quantile of chi-square with 9 degrees of freedom
    assert!(chi2 < 21.666, "chi2 = {chi2}");
}

#[test]
fn sampling_is_deterministic() {
    let contents = vec![ramp(40, 40).to_rgb()];
    let styles = vec![checker(20, 20, 4)];
    let memory = memory_for(40, 40);
    let draw = || {
        let b = sample_batch(&contents, &styles, &memory, 16, 3, CropMode::Independent, &mut RngState::new(9)).unwrap();
        (b.content_at, b.style_at, b.memory_at, b.content)
    };
    assert_eq!(draw(), draw());
}

#[test]
fn undersized_images_skipped_then_rejected() {
    let styles = vec![checker(20, 20, 4)];
    let memory = memory_for(40, 40);
    let contents = vec![ramp(8, 8).to_rgb(), ramp(40, 40).to_rgb()];
    let b = sample_batch(&contents, &styles, &memory, 16, 8, CropMode::Aligned, &mut RngState::new(1)).unwrap();
    assert!(b.content_at.iter().all(|c| c.0 == 1));
    let err = sample_batch(&contents[..1], &styles, &memory, 16, 1, CropMode::Aligned, &mut RngState::new(1));
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn same_seed_same_metrics() {
    let run = |cfg| trainer(cfg).fit(4, None, |_| {}).unwrap();
    let a = run(tiny("dcgan"));
    let b = run(tiny("dcgan"));
    assert_eq!(a, b);
    assert_eq!(a.iter().map(|m| m.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert!(a.iter().all(|m| m.loss_d.is_finite() && m.content.is_finite()));
}

#[test]
fn parametric_only_runs() {
    let mut cfg = tiny("dcgan");
    cfg.set("memory.n", "0").unwrap();
    let m = trainer(cfg).fit(2, None, |_| {}).unwrap();
    assert_eq!(m[1].ent_a, 0.0);
    assert!(m[1].collapse.usage.is_empty());
}

fn resume_matches(kind: &str) {
    let full = trainer(tiny(kind)).fit(6, None, |_| {}).unwrap();
    let mut first = trainer(tiny(kind));
    let mut head = first.fit(3, None, |_| {}).unwrap();
    let bytes = first.checkpoint().to_bytes();
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    let mut second = trainer(checkpoint_config(&ckpt).unwrap());
    second.resume(&ckpt).unwrap();
    assert_eq!(second.step(), 3);
    head.extend(second.fit(6, None, |_| {}).unwrap());
    assert_eq!(head, full);
}

#[test]
fn resume_is_bit_identical_dcgan() {
    resume_matches("dcgan");
}

#[test]
fn resume_is_bit_identical_wgan_gp() {
    resume_matches("wgan_gp");
}

#[test]
fn checkpoint_file_round_trip_is_byte_identical() {
    let mut cfg = tiny("dcgan");
    cfg.set("loss.correspondence", "learned_reconstruction").unwrap();
    let mut t = trainer(cfg);
    t.fit(1, None, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.famo");
    t.checkpoint().save(&p).unwrap();
    let loaded = Checkpoint::load(&p).unwrap();
    let q = dir.path().join("b.famo");
    loaded.save(&q).unwrap();
    assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    assert!(loaded.contains_prefix("rec/"));
}

#[test]
fn resume_rejects_other_architecture() {
    let t = trainer(tiny("dcgan"));
    let ckpt = t.checkpoint();
    let mut cfg = tiny("dcgan");
    cfg.set("unet.base_channels", "8").unwrap();
    let mut other = trainer(cfg);
    let err = other.resume(&ckpt).unwrap_err().to_string();
    assert!(err.contains("gen/enc0.weight") && err.contains("expected shape"), "{err}");
    assert_eq!(other.step(), 0);
}

#[test]
fn snapshots_follow_schedule() {
    let mut cfg = tiny("dcgan");
    cfg.set("train.snapshot_every", "2").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(cfg);
    t.fit(5, Some(dir.path()), |_| {}).unwrap();
    let snaps: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("snap_"))
        .collect();
    assert_eq!(snaps.len(), 5 * (5 / 2) + 5);
    let first = crate::image_ops::load_image(dir.path().join("snap_00000000_image.png")).unwrap();
    assert_eq!((first.height(), first.width()), (16, 16));
    assert!(dir.path().join("snap_00000004_entropy.png").exists());
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], StepMetrics::CSV_HEADER);
    assert_eq!(lines.len(), 6);
    assert!(lines[5].starts_with("5,"));
    assert!(dir.path().join("checkpoint.famo").exists());
}

#[test]
fn snapshot_failure_does_not_stop_training() {
    let mut cfg = tiny("dcgan");
    cfg.set("train.snapshot_every", "1").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(cfg);
    // a directory where the first snapshot file should go
    fs::create_dir_all(dir.path().join("snap_00000000_image.png")).unwrap();
    t.fit(1, Some(dir.path()), |_| {}).unwrap();
    assert_eq!(t.step(), 1);
}

#[test]
fn poisoned_generator_diverges_without_corrupting_state() {
    let mut cfg = tiny("dcgan");
    cfg.set("train.max_retries", "2").unwrap();
    let mut t = trainer(cfg);
    t.fit(1, None, |_| {}).unwrap();
    let p = &mut t.generator_mut().store_mut().params_mut()[0];
    p.value.data_mut()[0] = f32::NAN;
    let before = t.checkpoint();
    let err = t.train_step().unwrap_err();
    assert!(matches!(err, Error::Divergence(_)), "{err}");
    assert_eq!(t.step(), 1);
    assert_eq!(t.rollbacks(), 3);
    // everything except the random stream is as before
    let after = t.checkpoint();
    for (a, b) in before.entries().iter().zip(after.entries()) {
        if a.name != "rng" {
            assert_eq!(format!("{a:?}"), format!("{b:?}"), "{}", a.name);
        }
    }
}

#[test]
fn aligned_mode_needs_covering_memory() {
    let mut cfg = tiny("dcgan");
    cfg.set("memory.height", "16").unwrap();
    let err = Trainer::new(cfg, vec![ramp(24, 24)], vec![checker(20, 20, 4)]).err().unwrap();
    assert!(err.to_string().contains("does not cover"), "{err}");
}

use proptest::prelude::*;
use vitlite::io::data::{Dataset, DatasetSpec, Split};
use vitlite::train::*;
use vitlite::vit::{ViT, ViTConfig};
use vitlite::Tensor;

fn small_data(train: usize, test: usize) -> Dataset {
    Dataset::load(&DatasetSpec { image_size: 16, train_size: train, test_size: test, ..DatasetSpec::default() }).unwrap()
}

fn small_vit(classes: usize) -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 4,
        depth: 2,
        dim: 16,
        heads: 2,
        mlp_ratio: 2,
        num_classes: classes,
        ..ViTConfig::desk()
    }
}

#[test]
fn adamw_three_steps_match_hand_computation() {
    let cfg = AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
    let lr = 0.1;
    let grads = [0.5, -0.2, 0.1];
    let mut opt = AdamW::<f64>::new(cfg);
    let mut p = Tensor::new([1], vec![1.0]).unwrap();

    // written out step by step: p ← p(1 − lr·wd); m, v EMA; p ← p − lr·m̂/(√v̂ + eps)
    let (mut want, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for (t, g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        want *= 1.0 - lr * 0.01;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let m_hat = m / (1.0 - 0.9f64.powi(t));
        let v_hat = v / (1.0 - 0.999f64.powi(t));
        want -= lr * m_hat / (v_hat.sqrt() + 1e-8);

        opt.begin_step();
        opt.update("w", &mut p, &Tensor::new([1], vec![*g]).unwrap(), lr, true).unwrap();
        assert!((p.data()[0] - want).abs() < 1e-12, "step {t}: {} vs {want}", p.data()[0]);
    }
}

#[test]
fn adamw_exempt_parameters_skip_decay() {
    let mut opt = AdamW::<f64>::new(AdamWConfig { weight_decay: 0.5, ..Default::default() });
    let mut a = Tensor::new([1], vec![2.0]).unwrap();
    let mut b = a.clone();
    let zero = Tensor::new([1], vec![0.0]).unwrap();
    opt.begin_step();
    opt.update("decayed", &mut a, &zero, 0.1, true).unwrap();
    opt.update("exempt", &mut b, &zero, 0.1, false).unwrap();
    assert!((a.data()[0] - 2.0 * 0.95).abs() < 1e-15);
    assert_eq!(b.data()[0], 2.0);
    for name in ["blocks.0.attn.q.bias", "norm.weight", "blocks.1.norm2.bias", "cls_token", "mask_token", "pos_embed", "bn.weight"] {
        assert!(no_weight_decay(name), "{name}");
    }
    for name in ["blocks.0.attn.q.weight", "head.weight", "patch_embed.weight"] {
        assert!(!no_weight_decay(name), "{name}");
    }
}

#[test]
fn peak_lr_scales_with_batch() {
    let s = LrSchedule::new(1e-3, 1024, 5.0, 100.0, 10, 0.0).unwrap();
    assert!((s.peak() - 4e-3).abs() < 1e-18);
    assert_eq!(s.lr_at(0), 0.0);
    assert!((s.lr_at(50) - 4e-3).abs() < 1e-15);
    assert_eq!(s.lr_at(10_000), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_warms_up_then_decays(
        base in 1e-5f64..1e-1,
        batch in 1usize..512,
        warm in 0.0f64..5.0,
        extra in 0.5f64..20.0,
        spe in 1usize..20,
        min_frac in 0.0f64..0.5,
    ) {
        let total = warm + extra;
        let peak = base * batch as f64 / 256.0;
        let min_lr = peak * min_frac;
        let s = LrSchedule::new(base, batch, warm, total, spe, min_lr).unwrap();
        let steps = (total * spe as f64).ceil() as usize + 3;
        let warm_steps = warm * spe as f64;
        let mut prev = s.lr_at(0);
        for k in 1..steps {
            let lr = s.lr_at(k);
            prop_assert!(lr <= peak * (1.0 + 1e-12) && lr >= min_lr.min(prev) - 1e-15);
            if (k as f64) <= warm_steps {
                prop_assert!(lr >= prev);
            } else if (k as f64 - 1.0) >= warm_steps {
                prop_assert!(lr <= prev + 1e-15);
            }
            prev = lr;
        }
        prop_assert!((s.lr_at(steps) - min_lr).abs() <= 1e-12 * peak.max(1e-12));
    }

    #[test]
    fn layer_multipliers_are_geometric(decay in 0.05f64..1.0, depth in 1usize..16) {
        let m = layerwise_multipliers(decay, depth);
        prop_assert_eq!(m.len(), depth + 2);
        prop_assert_eq!(m[depth + 1], 1.0);
        for i in 0..=depth {
            prop_assert!((m[i] / m[i + 1] - decay).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_counts_agree_with_sorting(rows in prop::collection::vec(prop::collection::vec(-3i32..3, 6), 1..20), seed in any::<u64>()) {
        let n = rows.len();
        let labels: Vec<usize> = (0..n).map(|i| ((seed >> (i % 60)) as usize + i) % 6).collect();
        let data: Vec<f64> = rows.iter().flatten().map(|&v| v as f64).collect();
        let logits = Tensor::new([n, 6], data).unwrap();
        let (t1, t5) = topk_hits(&logits, &labels).unwrap();
        let mut w1 = 0;
        let mut w5 = 0;
        for (row, &y) in rows.iter().zip(&labels) {
            // rank = classes strictly better, plus equal ones with a lower index
            let rank = (0..6).filter(|&c| row[c] > row[y] || (row[c] == row[y] && c < y)).count();
            w1 += usize::from(rank < 1);
            w5 += usize::from(rank < 5);
        }
        prop_assert_eq!((t1, t5), (w1, w5));
    }
}

#[test]
fn constant_predictor_scores_the_first_class_rate() {
    // a zero head gives identical logits for every class
    let data = small_data(8, 40);
    let vit = ViT::<f32>::new(small_vit(4), 1).unwrap();
    let r = evaluate(&vit, &data.test, 16, Pool::Gap).unwrap();
    let first = data.test.labels.iter().filter(|&&y| y == 0).count() as f64 / 40.0;
    assert_eq!(r.count, 40);
    assert!((r.top1 - first).abs() < 1e-12);
    assert_eq!(r.top5, 1.0);
    assert!((r.loss - 4f64.ln()).abs() < 1e-5);
}

#[test]
fn perfect_logits_score_one() {
    let labels = vec![2, 0, 1, 3, 3];
    let logits = Tensor::<f32>::from_fn([5, 4], |i| if i % 4 == labels[i / 4] { 5.0 } else { -1.0 });
    assert_eq!(topk_hits(&logits, &labels).unwrap(), (5, 5));
}

#[test]
fn probing_leaves_the_encoder_untouched() {
    let data = small_data(64, 32);
    let vit = ViT::<f32>::new(small_vit(0), 3).unwrap();
    let before = vit.params().clone();
    let cfg = ProbeConfig { epochs: 3, batch_size: 16, warmup_epochs: 1.0, ..Default::default() };
    let report = linear_probe(&vit, &data, &cfg, 3).unwrap();
    for (a, b) in before.iter().zip(vit.params().iter()) {
        assert!(a.value.bit_eq(&b.value), "{} changed", a.name);
    }
    assert_eq!(report.rows.len(), 6);
    assert!((0.0..=1.0).contains(&report.top1()));
}

#[test]
fn probe_separates_linearly_separable_features() {
    // class c has a +3 offset on feature c
    let n = 200;
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let f = Tensor::<f64>::from_fn([n, 6], |i| {
        let (r, c) = (i / 6, i % 6);
        let wobble = ((r * 7 + c * 3) % 11) as f64 / 11.0 - 0.5;
        wobble + if c == labels[r] { 3.0 } else { 0.0 }
    });
    let cfg = ProbeConfig { epochs: 20, batch_size: 32, base_lr: 0.5, ..Default::default() };
    let report = probe_features(&f, &labels, &f, &labels, 4, &cfg, 0).unwrap();
    assert_eq!(report.top1(), 1.0);
}

#[test]
fn batch_norm_uses_batch_stats_and_tracks_running_ones() {
    let eps = 1e-6;
    let mut bn = BatchNorm1d::new(2, 0.1, eps);
    let x = [1.0, 10.0, 3.0, 10.0, 5.0, 10.0, 7.0, 10.0];
    let y = bn.forward_train(&x).unwrap();
    // feature 0: mean 4, biased var 5, unbiased var 20/3
    let s = (5.0 + eps).sqrt();
    for (r, want) in [-3.0 / s, -1.0 / s, 1.0 / s, 3.0 / s].into_iter().enumerate() {
        assert!((y[r * 2] - want).abs() < 1e-12);
        assert_eq!(y[r * 2 + 1], 0.0);
    }
    assert!((bn.running_mean[0] - 0.4).abs() < 1e-12);
    assert!((bn.running_var[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    assert!((bn.running_mean[1] - 1.0).abs() < 1e-12);
    let z = bn.forward_eval(&[0.4, 1.0]);
    assert!(z.iter().all(|v| v.abs() < 1e-12));
    let z = bn.forward_eval(&[0.4 + (bn.running_var[0] + eps).sqrt(), 1.0]);
    assert!((z[0] - 1.0).abs() < 1e-12);
}

#[test]
fn reinit_tail_keeps_exactly_the_first_blocks() {
    let cfg = small_vit(4);
    let trained = ViT::<f32>::new(cfg.clone(), 11).unwrap();
    let fresh = ViT::<f32>::new(cfg.clone(), 99).unwrap();
    for keep in 0..=cfg.depth {
        let mut v = trained.clone();
        reinit_tail(&mut v, keep, 99).unwrap();
        for p in v.params().iter() {
            let layer = v.layer_of(&p.name);
            let src = if layer > keep { &fresh } else { &trained };
            assert!(p.value.bit_eq(src.params().get(&p.name).unwrap()), "keep {keep}: {}", p.name);
        }
    }
    let mut v = trained.clone();
    assert!(reinit_tail(&mut v, cfg.depth + 1, 0).is_err());
}

#[test]
fn finetune_learns_and_is_deterministic() {
    let data = small_data(96, 32);
    let cfg = FinetuneConfig { epochs: 3, batch_size: 16, warmup_epochs: 1.0, eval_batch_size: 32, ..Default::default() };
    let run = || {
        let mut vit = ViT::<f32>::new(small_vit(4), 5).unwrap();
        let mut seen = 0;
        let r = finetune(&mut vit, &data, &cfg, 5, |_, rows| {
            seen += rows.len();
            Ok(())
        })
        .unwrap();
        (r, seen)
    };
    let (a, seen) = run();
    let (b, _) = run();
    assert_eq!(seen, 6);
    assert_eq!(metrics_csv(&a.rows), metrics_csv(&b.rows));
    let train: Vec<f64> = a.rows.iter().filter(|r| r.split == "train").map(|r| r.loss).collect();
    assert!(train[2] < train[0], "{train:?}");
    assert_eq!(a.test_top1.len(), 3);
}

#[test]
fn unsupported_augmentations_are_rejected() {
    let cfg = FinetuneConfig { mixup: 0.8, ..Default::default() };
    assert!(cfg.validate().is_err());
    let cfg = FinetuneConfig { rand_aug: Some("rand-m9-mstd0.5".into()), ..Default::default() };
    assert!(cfg.validate().is_err());
}

#[test]
fn metrics_csv_has_fixed_columns() {
    let rows = vec![MetricsRow::new(1, "train", 0.001, 1.5, 0.25, 1.0), MetricsRow::new(1, "test", 0.001, 1.25, 0.5, 1.0)];
    let csv = metrics_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines[1], "1,train,0.001,1.5,0.25,1");
    assert_eq!(lines.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    append_metrics(&path, &rows[..1]).unwrap();
    append_metrics(&path, &rows[1..]).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), csv);
}

#[test]
fn feature_extraction_matches_split_size() {
    let data = small_data(8, 20);
    let vit = ViT::<f32>::new(small_vit(0), 2).unwrap();
    let f = extract_features(&vit, &data.test, Pool::Gap, 7).unwrap();
    assert_eq!(f.shape(), &[20, 16]);
    let split = Dataset::load_split(&DatasetSpec { image_size: 16, train_size: 8, test_size: 20, ..DatasetSpec::default() }, Split::Test)
        .unwrap();
    assert_eq!(split.len(), 20);
}

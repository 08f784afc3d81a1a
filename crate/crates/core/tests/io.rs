use proptest::prelude::*;
use vitlite::distill::{DistillConfig, DistillState};
use vitlite::io::checkpoint::*;
use vitlite::io::config::{load_config, parse_config, CommandKind};
use vitlite::io::data::{synth_sample, Dataset, DatasetSpec, Split};
use vitlite::io::run::{encoder_from_checkpoint, mae_checkpoint, vit_checkpoint};
use vitlite::mae::{DecoderConfig, MAEModel};
use vitlite::nn::ParamStore;
use vitlite::vit::{ViT, ViTConfig};
use vitlite::{Error, Tensor};

fn small() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 4,
        depth: 2,
        dim: 16,
        heads: 2,
        mlp_ratio: 2,
        ..ViTConfig::desk()
    }
}

fn sample_checkpoint() -> Checkpoint {
    let vit = ViT::<f32>::new(ViTConfig { num_classes: 3, ..small() }, 1).unwrap();
    vit_checkpoint(&vit, CheckpointMeta { step: 7, seed: 1, loss: 0.5 })
}

fn assert_same(a: &Checkpoint, b: &Checkpoint) {
    assert_eq!(a.config, b.config);
    assert_eq!(a.meta.step, b.meta.step);
    assert_eq!(a.meta.seed, b.meta.seed);
    assert_eq!(a.meta.loss.to_bits(), b.meta.loss.to_bits());
    assert_eq!(a.tensors.len(), b.tensors.len());
    for ((na, ta), (nb, tb)) in a.tensors.iter().zip(&b.tensors) {
        assert_eq!(na, nb);
        assert!(ta.bit_eq(tb), "{na} differs");
    }
}

#[test]
fn every_checkpoint_kind_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let teacher = ViT::<f32>::new(ViTConfig { depth: 3, ..cfg.clone() }, 5).unwrap();
    let mae = MAEModel::<f32>::new(cfg.clone(), DecoderConfig::for_encoder(&cfg), 2).unwrap();
    let state = DistillState::new(DistillConfig::default(), &teacher, &mae.encoder).unwrap();
    let mut f64_store = ParamStore::<f64>::new();
    f64_store.push("x", Tensor::new([3], vec![f64::MIN_POSITIVE, -0.0, 1.0 / 3.0]).unwrap());
    let kinds = [
        sample_checkpoint(),
        vit_checkpoint(&ViT::<f32>::new(cfg.clone(), 3).unwrap(), CheckpointMeta::default()),
        mae_checkpoint(&mae, &[], CheckpointMeta { step: 1, seed: 2, loss: f64::NAN }),
        mae_checkpoint(&mae, &[("distill", &state.maps)], CheckpointMeta::default()),
        Checkpoint::from_store(serde_json::json!({"kind": "raw"}), CheckpointMeta::default(), &[("", &f64_store)]),
    ];
    for (i, ckpt) in kinds.iter().enumerate() {
        let path = dir.path().join(format!("{i}.ckpt"));
        save_checkpoint(&path, ckpt).unwrap();
        assert_same(ckpt, &load_checkpoint(&path).unwrap());
        assert!(!dir.path().join(format!("{i}.ckpt.partial")).exists());
        let bytes = ckpt.to_bytes().unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }
}

#[test]
fn distinct_failures_have_distinct_kinds() {
    let bytes = sample_checkpoint().to_bytes().unwrap();

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(CheckpointError::BadMagic)));

    let mut version = bytes.clone();
    version[8] = 9;
    assert!(matches!(Checkpoint::from_bytes(&version), Err(CheckpointError::Version { found: 9, expected: 1 })));

    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));

    let mut flipped = bytes.clone();
    let mid = bytes.len() - 20;
    flipped[mid] ^= 0x10;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::Corrupt(_))));

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(Checkpoint::from_bytes(&trailing).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_truncation_is_detected(cut in 0usize..10_000) {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        let cut = cut % bytes.len();
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        prop_assert!(matches!(err, CheckpointError::Truncated(_)), "cut {cut}: {err}");
    }

    #[test]
    fn any_single_byte_flip_is_rejected(pos in 0usize..10_000, bit in 0u8..8) {
        let mut bytes = sample_checkpoint().to_bytes().unwrap();
        let pos = pos % bytes.len();
        bytes[pos] ^= 1 << bit;
        prop_assert!(Checkpoint::from_bytes(&bytes).is_err(), "flip at {pos} accepted");
    }
}

#[test]
fn truncated_file_yields_no_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    let bytes = sample_checkpoint().to_bytes().unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    match vitlite::io::run::load_encoder(&path, None) {
        Err(Error::Checkpoint(CheckpointError::Truncated(_))) => {}
        other => panic!("expected truncation, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn failed_save_leaves_nothing_behind() {
    let dir = tempfile::tempdir().unwrap();
    // a non-empty directory in the way makes the final rename fail
    let path = dir.path().join("x.ckpt");
    std::fs::create_dir(&path).unwrap();
    std::fs::write(path.join("keep"), b"").unwrap();
    assert!(matches!(save_checkpoint(&path, &sample_checkpoint()), Err(CheckpointError::Io(_))));
    assert!(!dir.path().join("x.ckpt.partial").exists());

    let nested = dir.path().join("a").join("b.ckpt");
    save_checkpoint(&nested, &sample_checkpoint()).unwrap();
    assert!(load_checkpoint(&nested).is_ok());
}

#[test]
fn encoder_load_drops_decoder_tensors() {
    let cfg = small();
    let mae = MAEModel::<f32>::new(cfg.clone(), DecoderConfig::for_encoder(&cfg), 4).unwrap();
    let ckpt = mae_checkpoint(&mae, &[], CheckpointMeta { seed: 4, ..Default::default() });
    assert!(ckpt.names().any(|n| n.starts_with("decoder.")));
    let vit = encoder_from_checkpoint(&ckpt, Some(5)).unwrap();
    assert_eq!(vit.config().num_classes, 5);
    for p in mae.encoder.params().iter() {
        assert!(p.value.bit_eq(vit.params().get(&p.name).unwrap()), "{}", p.name);
    }
    assert!(vit.params().get("head.weight").unwrap().data().iter().all(|&v| v == 0.0));

    let mut store = mae.encoder.params().clone();
    assert!(matches!(ckpt.load_into(&mut store, "", LoadMode::Strict), Err(CheckpointError::Mismatch(_))));
}

#[test]
fn loading_into_a_different_shape_is_a_mismatch() {
    let ckpt = sample_checkpoint();
    let mut other = ViT::<f32>::new(ViTConfig { dim: 8, num_classes: 3, ..small() }, 1).unwrap();
    assert!(matches!(
        ckpt.load_into(other.params_mut(), "encoder", LoadMode::Partial),
        Err(CheckpointError::Mismatch(_))
    ));
}

#[test]
fn checkpoint_lists_its_tensors_without_a_config() {
    let ckpt = sample_checkpoint();
    let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    let names: Vec<&str> = back.names().collect();
    assert!(names.contains(&"encoder.patch_embed.weight"));
    assert!(names.contains(&"encoder.head.bias"));
    assert_eq!(back.get("encoder.head.weight").unwrap().shape(), &[16, 3]);
}

#[test]
fn configs_parse_with_defaults_and_report_violations() {
    let cfg = parse_config(r#"{"command": "finetune", "seed": 3, "finetune": {"epochs": 4}}"#).unwrap();
    assert_eq!(cfg.command, Some(CommandKind::Finetune));
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.finetune.epochs, 4);
    assert_eq!(cfg.model, ViTConfig::desk());

    let Err(Error::InvalidConfig(v)) = parse_config(r#"{"model": {"image_size": 64}}"#) else {
        panic!("image size must agree with the dataset")
    };
    assert!(!v.is_empty());
    assert!(parse_config("{not json").is_err());

    let documented = r#"{
      "model": {"patch_size": 8, "depth": 4, "dim": 64, "heads": 4},
      "pretrain": {"epochs": 30, "mask_ratio": 0.75},
      "distill": {"kind": "attention", "pairs": [[8, 4]], "lambda": 1.0},
      "finetune": {"epochs": 20, "layer_decay": 0.85},
      "dataset": {"train_size": 2000, "test_size": 500}
    }"#;
    let cfg = parse_config(documented).unwrap();
    assert_eq!(cfg.distill.pairs, vec![(8, 4)]);
}

#[test]
fn unreadable_config_is_a_usage_error() {
    let r = load_config(std::path::Path::new("/definitely/not/here.json"));
    assert!(matches!(r, Err(Error::Usage(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn samples_are_deterministic_bounded_and_labelled(index in 0usize..500, seed in 0u64..4, test in any::<bool>()) {
        let spec = DatasetSpec { image_size: 16, seed, ..DatasetSpec::default() };
        let split = if test { Split::Test } else { Split::Train };
        let (a, la) = synth_sample(&spec, split, index).unwrap();
        let (b, lb) = synth_sample(&spec, split, index).unwrap();
        prop_assert!(a.bit_eq(&b));
        prop_assert_eq!(la, lb);
        prop_assert_eq!(la, index % spec.num_classes);
        prop_assert_eq!(a.shape(), &[3, 16, 16]);
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn splits_are_disjoint_streams() {
    let spec = DatasetSpec { image_size: 16, train_size: 8, test_size: 8, ..DatasetSpec::default() };
    let d = Dataset::load(&spec).unwrap();
    assert_ne!(d.train.image(0), d.test.image(0));
    let other = Dataset::load(&DatasetSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(d.train.image(0), other.train.image(0));
}

use super::*;
use crate::data::{synth_dataset, SynthDataset, VocabSpec};
use crate::numerics::Tensor;
use rand::RngCore;

fn scalar_set(w: f64) -> (ParamSet<f64>, ParamSet<f64>) {
    let mut params = ParamSet::new();
    params.insert("w", Tensor::new(vec![1], vec![w]).unwrap());
    let velocities = params.zeros_like();
    (params, velocities)
}

fn opt(lr: f64, momentum: f64, weight_decay: f64) -> OptimizerConfig {
    OptimizerConfig {
        lr,
        momentum,
        weight_decay,
        ..OptimizerConfig::for_arch(Arch::Specimen, 0)
    }
}

/// Sets the gradient of loss = w²/2 and takes one step.
fn quadratic_step(params: &mut ParamSet<f64>, velocities: &mut ParamSet<f64>, o: &OptimizerConfig) {
    let w = params.get("w").unwrap().data()[0];
    params.zero_grad();
    params.accumulate_grads(vec![("w".into(), vec![w])]).unwrap();
    sgd_step(params, velocities, o).unwrap();
}

#[test]
fn momentum_recurrence_by_hand() {
    let (mut p, mut v) = scalar_set(1.0);
    let o = opt(0.1, 0.9, 0.0);
    quadratic_step(&mut p, &mut v, &o);
    assert!((p.get("w").unwrap().data()[0] - 0.9).abs() < 1e-12);
    assert!((v.get("w").unwrap().data()[0] - 1.0).abs() < 1e-12);
    quadratic_step(&mut p, &mut v, &o);
    assert!((v.get("w").unwrap().data()[0] - 1.8).abs() < 1e-12);
    assert!((p.get("w").unwrap().data()[0] - 0.72).abs() < 1e-12);
}

#[test]
fn weight_decay_by_hand() {
    let (mut p, mut v) = scalar_set(1.0);
    p.accumulate_grads(vec![("w".into(), vec![0.0])]).unwrap();
    sgd_step(&mut p, &mut v, &opt(0.1, 0.9, 1e-4)).unwrap();
    assert!((v.get("w").unwrap().data()[0] - 1e-4).abs() < 1e-12);
    assert!((p.get("w").unwrap().data()[0] - 0.99999).abs() < 1e-12);
}

#[test]
fn plain_sgd_when_momentum_and_decay_are_zero() {
    let (mut p, mut v) = scalar_set(0.37);
    p.accumulate_grads(vec![("w".into(), vec![0.25])]).unwrap();
    sgd_step(&mut p, &mut v, &opt(0.3, 0.0, 0.0)).unwrap();
    assert_eq!(p.get("w").unwrap().data()[0], 0.37 - 0.3 * 0.25);
}

#[test]
fn missing_gradient_names_the_parameter() {
    let (mut p, mut v) = scalar_set(1.0);
    match sgd_step(&mut p, &mut v, &opt(0.1, 0.9, 0.0)) {
        Err(Error::MissingGradient(name)) => assert_eq!(name, "w"),
        other => panic!("expected missing gradient, got {other:?}"),
    }
}

#[test]
fn optimizer_validation() {
    assert!(opt(0.1, 0.9, 1e-4).validate().is_ok());
    assert!(opt(0.0, 0.9, 1e-4).validate().is_ok());
    assert!(opt(-0.1, 0.9, 1e-4).validate().is_err());
    assert!(opt(0.1, 1.0, 1e-4).validate().is_err());
    let zero_batch = OptimizerConfig {
        batch_size: 0,
        ..opt(0.1, 0.9, 0.0)
    };
    assert!(zero_batch.validate().is_err());
    assert_eq!(OptimizerConfig::for_arch(Arch::TopDownLstmGru, 0).epochs, 25);
}

fn small_setup(arch: Arch, n: usize) -> (SynthDataset, ModelConfig) {
    let d = synth_dataset(n, &VocabSpec::default(), 3).unwrap();
    let config = ModelConfig {
        embed_size: 8,
        hidden_size: 8,
        attention_size: 8,
        ..ModelConfig::new(arch, d.vocab.len(), d.features.feature_dim, d.features.region_count, d.features.region_dim)
    };
    (d, config)
}

fn short_opt(epochs: usize, seed: u64) -> OptimizerConfig {
    OptimizerConfig {
        epochs,
        batch_size: 3,
        ..OptimizerConfig::for_arch(Arch::Specimen, seed)
    }
}

#[test]
fn zero_learning_rate_leaves_params_unchanged() {
    let (d, config) = small_setup(Arch::Specimen, 1);
    let data = TrainingSet::new(&d.features, &d.samples).unwrap();
    let o = OptimizerConfig {
        lr: 0.0,
        ..short_opt(1, 5)
    };
    let model = CaptionModel::new(config.clone()).unwrap();
    let initial: ParamSet<f32> = model.init_params(&mut ChaCha8Rng::seed_from_u64(5));
    let report = train(&data, &d.vocab, &config, &o, &TrainOptions::default(), None).unwrap();
    assert_eq!(report.checkpoint.params, initial);
    assert_eq!(report.epoch_losses.len(), 1);
}

#[test]
fn training_is_deterministic() {
    for arch in [Arch::Specimen, Arch::TopDownLstmGru] {
        let (d, config) = small_setup(arch, 8);
        let data = TrainingSet::new(&d.features, &d.samples).unwrap();
        let run = || {
            train(&data, &d.vocab, &config, &short_opt(2, 9), &TrainOptions::default(), None)
                .unwrap()
                .checkpoint
                .to_bytes()
                .unwrap()
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn loss_decreases_on_a_tiny_set() {
    let (d, config) = small_setup(Arch::Specimen, 8);
    let data = TrainingSet::new(&d.features, &d.samples).unwrap();
    let report = train(&data, &d.vocab, &config, &short_opt(30, 1), &TrainOptions::default(), None).unwrap();
    assert!(report.epoch_losses.last().unwrap() < &(report.epoch_losses[0] * 0.5));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (d, config) = small_setup(Arch::TopDownLstmGru, 4);
    let data = TrainingSet::new(&d.features, &d.samples).unwrap();
    let ckpt = train(&data, &d.vocab, &config, &short_opt(1, 2), &TrainOptions::default(), None)
        .unwrap()
        .checkpoint;
    let bytes = ckpt.to_bytes().unwrap();
    let loaded = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.to_bytes().unwrap(), bytes);
    assert_eq!(&bytes[..8], b"NICKPT\0\0");
    let trailer_len = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()) as usize;
    let trailer: serde_json::Value = serde_json::from_slice(&bytes[bytes.len() - 8 - trailer_len..bytes.len() - 8]).unwrap();
    assert_eq!(trailer["epoch"], 1);
    assert_eq!(trailer["config"]["arch"], "topdown-lstmgru");
}

#[test]
fn corrupted_checkpoints_are_format_errors() {
    let (d, config) = small_setup(Arch::Specimen, 2);
    let data = TrainingSet::new(&d.features, &d.samples).unwrap();
    let bytes = train(&data, &d.vocab, &config, &short_opt(1, 2), &TrainOptions::default(), None)
        .unwrap()
        .checkpoint
        .to_bytes()
        .unwrap();

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::BadMagic { .. })));

    let mut version = bytes.clone();
    version[8] = 9;
    assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::UnsupportedVersion { version: 9, .. })));

    for cut in [10, 20, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(err.is_format_error(), "cut {cut}: {err}");
    }

    let mut trailer = bytes.clone();
    let n = trailer.len();
    trailer[n - 20] = b'\x01';
    assert!(Checkpoint::from_bytes(&trailer).unwrap_err().is_format_error());
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let (d, config) = small_setup(Arch::Specimen, 7);
    let data = TrainingSet::new(&d.features, &d.samples).unwrap();
    let straight = train(&data, &d.vocab, &config, &short_opt(3, 4), &TrainOptions::default(), None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let options = TrainOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        checkpoint_every: 1,
    };
    train(&data, &d.vocab, &config, &short_opt(2, 4), &options, None).unwrap();
    let partial = Checkpoint::load(dir.path().join("latest.ckpt")).unwrap();
    assert_eq!(partial.epoch, 2);
    assert!(dir.path().join("epoch-0001.ckpt").exists());
    let resumed = train(&data, &d.vocab, &config, &short_opt(3, 4), &options, Some(partial)).unwrap();

    assert_eq!(resumed.checkpoint.to_bytes().unwrap(), straight.checkpoint.to_bytes().unwrap());
    assert_eq!(resumed.epoch_losses, straight.epoch_losses[2..]);

    let log = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,step,loss");
    // 7 pairs in batches of 3: three steps per epoch.
    assert_eq!(lines.len(), 1 + 9);
    assert!(lines[9].starts_with("3,9,"));
    assert_eq!(Checkpoint::load(dir.path().join("model.ckpt")).unwrap(), resumed.checkpoint);
}

#[test]
fn mismatched_vocabulary_is_rejected() {
    let (d, config) = small_setup(Arch::Specimen, 2);
    let data = TrainingSet::new(&d.features, &d.samples).unwrap();
    let wrong = ModelConfig {
        vocab_size: config.vocab_size + 1,
        ..config
    };
    assert!(matches!(
        train(&data, &d.vocab, &wrong, &short_opt(1, 1), &TrainOptions::default(), None),
        Err(Error::ConfigMismatch(_))
    ));
}

#[test]
fn rng_state_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    rng.next_u64();
    rng.next_u32();
    let state = RngState::capture(&rng);
    let mut restored = state.restore();
    assert_eq!(rng.next_u64(), restored.next_u64());
}

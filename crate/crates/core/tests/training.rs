use medvkan::data::{load_manifest, synth_dataset, write_dataset, Dataset};
use medvkan::net::ModelConfig;
use medvkan::train::{evaluate, TrainConfig, Trainer};

#[test]
fn full_batch_loss_decreases_over_fifty_steps() {
    let data = Dataset::new(2, synth_dataset(7, 8, 64, 2).unwrap()).unwrap();
    let tc = TrainConfig {
        batch_size: 8,
        max_steps: Some(300),
        seed: 7,
        ..Default::default()
    };
    let mut tr = Trainer::<f32>::new(&ModelConfig::tiny(1, 2), &tc).unwrap();
    let log = tr.run_until(&data, 50, None, |_, _, _| {}).unwrap();
    let smooth: Vec<f64> = log.losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    assert!(smooth.windows(2).all(|w| w[1] <= w[0]), "{smooth:?}");
}

#[test]
fn manifest_round_trip_and_checkpoint_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let data = Dataset::new(3, synth_dataset(2, 3, 32, 3).unwrap()).unwrap();
    let manifest = write_dataset(dir.path().join("data"), &data, Some("train")).unwrap();
    let (m, back) = load_manifest(&manifest).unwrap();
    assert_eq!(back, data);
    assert_eq!(m.split.as_deref(), Some("train"));

    let tc = TrainConfig {
        batch_size: 2,
        max_steps: Some(3),
        checkpoint_every: 2,
        ..Default::default()
    };
    let mut tr = Trainer::<f32>::new(&ModelConfig::tiny(1, 3), &tc).unwrap();
    let log = tr.run(&back, Some(&dir.path().join("run")), |_, _, _| {}).unwrap();
    assert_eq!(log.checkpoints.len(), 2);
    let ckpt = log.checkpoints.last().unwrap();
    assert_eq!(evaluate::<f32>(ckpt, &back, 1.0).unwrap(), tr.evaluate(&back, 1.0).unwrap());

    let two = Dataset::new(2, synth_dataset(2, 2, 32, 2).unwrap()).unwrap();
    assert!(evaluate::<f32>(ckpt, &two, 1.0).is_err());
}

#[test]
fn manifest_errors_name_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let data = Dataset::new(2, synth_dataset(2, 2, 32, 2).unwrap()).unwrap();
    let manifest = write_dataset(dir.path(), &data, None).unwrap();
    std::fs::write(dir.path().join("label_0001.vkt"), b"junk").unwrap();
    let err = load_manifest(&manifest).unwrap_err().to_string();
    assert!(err.starts_with("sample 1:"), "{err}");
}

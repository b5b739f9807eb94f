use hybrid_core::model::{build_model, load_checkpoint, save_checkpoint, ModelConfig};
use hybrid_core::tasks::{generate_mqar, load_dataset, save_dataset, MqarConfig, Split};
use hybrid_core::IndexTensor;

#[test]
fn checkpoint_round_trip_preserves_logits() {
    let dir = tempfile::tempdir().unwrap();
    let model = build_model(&ModelConfig::micro(24, 8), 11).unwrap();
    save_checkpoint(&model, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    let tokens = IndexTensor::new(&[2, 5], vec![0, 3, 7, 23, 1, 2, 2, 9, 4, 5]).unwrap();
    let (a, b) = (model.forward(&tokens).unwrap(), back.forward(&tokens).unwrap());
    assert_eq!(
        a.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = build_model(&ModelConfig::micro(16, 8), 1).unwrap();
    save_checkpoint(&model, dir.path()).unwrap();
    let bin = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "bin"))
        .unwrap();
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}

#[test]
fn dataset_cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = MqarConfig {
        n_train: 12,
        n_test: 3,
        ..MqarConfig::desk(64, 32, 4)
    };
    let ds = generate_mqar(&cfg, Split::Test).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
}

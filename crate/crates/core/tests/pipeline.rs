use mafnet::checkpoint::{load_checkpoint, save_checkpoint};
use mafnet::data::{
    generate_synthetic, load_dataset, save_dataset, stratified_split, SyntheticSpec,
};
use mafnet::model::{MafConfig, MafNet};
use mafnet::training::{evaluate, fit, TrainConfig};

fn small_config(spec: &SyntheticSpec) -> MafConfig {
    MafConfig {
        max_clips: spec.t,
        visual_shape: spec.visual_shape,
        audio_shape: spec.audio_shape,
        hidden: 16,
        residual_channels: 16,
        num_classes: spec.num_classes,
        mcb_dim: 32,
        seed: 3,
        ..MafConfig::default()
    }
}

#[test]
fn generate_save_train_checkpoint_reload() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        samples_per_class: 40,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec).unwrap();
    let data_path = dir.path().join("data.maff");
    save_dataset(&ds, &data_path).unwrap();
    let ds = load_dataset(&data_path).unwrap();
    assert_eq!(ds.len(), 160);

    let (tr, va, te) = stratified_split(&ds.labels(), [0.7, 0.15, 0.15], 5).unwrap();
    let (train, val, test) = (ds.subset(&tr), ds.subset(&va), ds.subset(&te));

    let mut net = MafNet::new(small_config(&spec)).unwrap();
    let cfg = TrainConfig {
        max_epochs: 15,
        patience: 15,
        batch_size: 16,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let report = fit(&mut net, &train, &val, &cfg).unwrap();
    assert!(!report.epochs.is_empty());
    // eval mode (running batch-norm statistics) must agree with what was learned
    let train_acc = evaluate(&net, &train).unwrap();
    let acc = evaluate(&net, &test).unwrap();
    assert!(train_acc >= 0.9, "eval-mode train accuracy {train_acc}");
    assert!(acc >= 0.9, "test accuracy {acc}");

    let ckpt = dir.path().join("net.mafc");
    save_checkpoint(&net, &ckpt).unwrap();
    let mut fresh = MafNet::new(MafConfig {
        seed: 99,
        ..small_config(&spec)
    })
    .unwrap();
    load_checkpoint(&mut fresh, &ckpt).unwrap();

    let recs: Vec<_> = test.records.iter().collect();
    assert_eq!(fresh.predict(&recs).unwrap(), net.predict(&recs).unwrap());
    assert_eq!(fresh.state(), net.state());
}

#[test]
fn checkpoint_rejects_mismatched_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::default();
    let net = MafNet::new(small_config(&spec)).unwrap();
    let ckpt = dir.path().join("net.mafc");
    save_checkpoint(&net, &ckpt).unwrap();
    let mut wider = MafNet::new(MafConfig {
        hidden: 24,
        ..small_config(&spec)
    })
    .unwrap();
    assert!(load_checkpoint(&mut wider, &ckpt).is_err());
}

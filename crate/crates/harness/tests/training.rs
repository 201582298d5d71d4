use wmnet_core::synth::MisalignmentSpec;
use wmnet_harness::config::ModelFlags;
use wmnet_harness::data::{generate_split, Split};
use wmnet_harness::train::{fit, Trained};
use wmnet_harness::{Error, ExperimentConfig};

fn small(flags: ModelFlags, train: usize, epochs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.flags = flags;
    cfg.epochs = epochs;
    cfg.data.train_size = train;
    cfg.data.val_size = 4;
    cfg.data.misalignment = MisalignmentSpec::neutral();
    cfg
}

#[test]
fn one_epoch_on_eight_images_has_finite_loss() {
    let cfg = small(ModelFlags::ALL_ON, 8, 1);
    let train = generate_split(&cfg.data, Split::Train).unwrap();
    let mut t = Trained::init(&cfg).unwrap();
    fit(&mut t, &train, |_| {}).unwrap();
    assert_eq!(t.history.len(), 1);
    let r = &t.history[0];
    assert!(r.loss.is_finite() && r.loss > 0.0, "{r:?}");
    assert!(t.store.values().all(|v| v.data().iter().all(|x| x.is_finite())));
}

#[test]
fn loss_decreases_over_twenty_epochs_on_neutral_data() {
    let cfg = small(ModelFlags::ALL_ON, 16, 20);
    let train = generate_split(&cfg.data, Split::Train).unwrap();
    let mut t = Trained::init(&cfg).unwrap();
    fit(&mut t, &train, |_| {}).unwrap();
    let first = t.history.first().unwrap().loss;
    let last = t.history.last().unwrap().loss;
    assert!(last < first, "loss went {first} -> {last}");
}

#[test]
fn same_seed_gives_identical_history() {
    let cfg = small(ModelFlags::ALL_ON, 8, 2);
    let train = generate_split(&cfg.data, Split::Train).unwrap();
    let run = || {
        let mut t = Trained::init(&cfg).unwrap();
        fit(&mut t, &train, |_| {}).unwrap();
        let bytes = t.checkpoint().to_bytes().unwrap();
        (t.history, bytes)
    };
    let (h1, b1) = run();
    let (h2, b2) = run();
    assert_eq!(h1, h2);
    assert_eq!(b1, b2);
}

#[test]
fn different_seeds_diverge() {
    let mut cfg = small(ModelFlags::ALL_OFF, 8, 1);
    let train = generate_split(&cfg.data, Split::Train).unwrap();
    let mut a = Trained::init(&cfg).unwrap();
    fit(&mut a, &train, |_| {}).unwrap();
    cfg.seed = 1;
    let mut b = Trained::init(&cfg).unwrap();
    fit(&mut b, &train, |_| {}).unwrap();
    assert_ne!(a.history, b.history);
}

#[test]
fn non_finite_input_aborts_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(ModelFlags::ALL_OFF, 4, 1);
    cfg.out_dir = dir.path().to_path_buf();
    let mut train = generate_split(&cfg.data, Split::Train).unwrap();
    train[2].rgb.data_mut()[0] = f32::NAN;
    let mut t = Trained::init(&cfg).unwrap();
    let err = fit(&mut t, &train, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Diverged(_)), "{err}");
    let dump = std::fs::read_to_string(dir.path().join("divergence_dump.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&dump).unwrap();
    let batch = v["batch"].as_array().unwrap();
    assert_eq!(batch.last().unwrap()["sample"], train[2].id);
    assert_eq!(v["epoch"], 0);
}

#[test]
fn empty_training_split_is_rejected() {
    let cfg = small(ModelFlags::ALL_OFF, 4, 1);
    let mut t = Trained::init(&cfg).unwrap();
    assert!(fit(&mut t, &[], |_| {}).is_err());
}

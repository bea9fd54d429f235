use egg_gae::dataio::{normalize, split, synthetic, TabularDataset};
use egg_gae::missingness::{corrupt_mcar, MaskMatrix};
use egg_gae::training::{train, TrainConfig, TrainedModel};
use egg_gae::Error;

struct Data {
    train: TabularDataset,
    train_mask: MaskMatrix,
    val: TabularDataset,
    val_mask: MaskMatrix,
}

fn data(n: usize) -> Data {
    let truth = synthetic::two_cluster_mixed(n, 4, 1, 2);
    let mask = corrupt_mcar(&truth, 0.2, 5).unwrap();
    let corrupted = mask.apply(&truth).unwrap();
    let sp = split(&corrupted, 0.7, 1).unwrap();
    let (ds, _) = normalize(&corrupted, Some(&mask));
    Data {
        train: ds.subset(&sp.train),
        train_mask: mask.select_rows(&sp.train),
        val: ds.subset(&sp.validation),
        val_mask: mask.select_rows(&sp.validation),
    }
}

fn cfg() -> TrainConfig {
    TrainConfig {
        hidden: 16,
        prototypes: 3,
        batch_size: 40,
        max_epochs: 6,
        learning_rate: 1e-3,
        seed: 9,
        ..Default::default()
    }
}

fn run(c: &TrainConfig, d: &Data) -> egg_gae::Result<(TrainedModel, egg_gae::training::History)> {
    train(c, &d.train, &d.train_mask, &d.val, &d.val_mask)
}

#[test]
fn zero_patience_stops_after_first_epoch() {
    let d = data(100);
    let (m, h) = run(&TrainConfig { patience: 0, ..cfg() }, &d).unwrap();
    assert_eq!(h.epochs.len(), 1);
    assert!(h.stopped_early);
    assert_eq!(m.best_epoch, 1);
}

#[test]
fn same_seed_gives_bitwise_identical_trajectories() {
    let d = data(100);
    let (a, ha) = run(&cfg(), &d).unwrap();
    let (b, hb) = run(&cfg(), &d).unwrap();
    assert_eq!(a.model, b.model);
    for (x, y) in ha.epochs.iter().zip(&hb.epochs) {
        assert_eq!(x.train.total.to_bits(), y.train.total.to_bits());
        assert_eq!(x.validation.total.to_bits(), y.validation.total.to_bits());
        assert_eq!(x.tau.to_bits(), y.tau.to_bits());
    }
    let (c, _) = run(&TrainConfig { seed: 10, ..cfg() }, &d).unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn best_checkpoint_has_the_lowest_validation_loss() {
    let d = data(100);
    let (m, h) = run(&TrainConfig { max_epochs: 8, ..cfg() }, &d).unwrap();
    for e in &h.epochs {
        assert!(m.best_validation_loss <= e.validation.total);
        assert!(e.interclass_edge_fraction >= 0.0 && e.interclass_edge_fraction <= 1.0);
    }
    assert_eq!(h.epochs[m.best_epoch - 1].validation.total, m.best_validation_loss);
    // temperature never increases
    for w in h.epochs.windows(2) {
        assert!(w[1].tau <= w[0].tau);
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let d = data(60);
    let (m, h) = run(&TrainConfig { max_epochs: 2, ..cfg() }, &d).unwrap();
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path().join("c.json")).unwrap();
    h.save(dir.path().join("h.json")).unwrap();
    assert_eq!(TrainedModel::load(dir.path().join("c.json")).unwrap(), m);
    let text = std::fs::read_to_string(dir.path().join("c.json")).unwrap();
    std::fs::write(dir.path().join("bad.json"), text.replacen("\"version\":1", "\"version\":99", 1)).unwrap();
    assert!(matches!(TrainedModel::load(dir.path().join("bad.json")), Err(Error::Checkpoint(_))));
    assert!(matches!(TrainedModel::load(dir.path().join("none.json")), Err(Error::MissingArtifact(_))));
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let d = data(60);
    let err = run(&TrainConfig { learning_rate: 1e200, ..cfg() }, &d).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

#[test]
fn invalid_configuration_is_rejected() {
    let d = data(60);
    assert!(matches!(run(&TrainConfig { tau_end: 1.0, ..cfg() }, &d), Err(Error::Config(_))));
    assert!(matches!(run(&TrainConfig { batch_size: 0, ..cfg() }, &d), Err(Error::Config(_))));
}

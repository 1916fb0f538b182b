use qsparse_core::metrics::{
    parse_channels_csv, parse_metrics_csv, METRICS_HEADER, SPARSITY_SERIES_HEADER,
};
use qsparse_core::run::{self, execute_run, Outcome, RunManifest};
use qsparse_core::{Algorithm, Error, QuantizedCheckpoint, RunConfig};

fn short(algo: Algorithm, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::preset("desk").unwrap();
    cfg.run.algorithm = algo;
    cfg.run.epochs = epochs;
    cfg
}

#[test]
fn run_directory_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let report = execute_run(&short(Algorithm::Apgdssm, 3), &dir, |_| {}).unwrap();
    assert_eq!(report.manifest.outcome, Outcome::Completed);

    let metrics = std::fs::read_to_string(dir.join(run::METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().next(), Some(METRICS_HEADER));
    let rows = parse_metrics_csv(&metrics).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), [1, 2, 3]);

    let channels =
        parse_channels_csv(&std::fs::read_to_string(dir.join(run::CHANNELS_FILE)).unwrap())
            .unwrap();
    assert_eq!(
        channels.iter().map(|c| c.total).collect::<Vec<_>>(),
        [16, 32, 4]
    );

    let manifest = RunManifest::read(&dir.join(run::MANIFEST_FILE)).unwrap();
    assert_eq!(manifest, report.manifest);
    assert_eq!(manifest.run_config().unwrap(), short(Algorithm::Apgdssm, 3));

    let ck = QuantizedCheckpoint::read(&dir.join(run::CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.bits, 4);
    assert_eq!(ck.metrics, report.records);
    let eval = run::eval_run(&dir).unwrap();
    assert_eq!(eval.accuracy, report.records[2].eval_accuracy);
    assert_eq!(eval.samples, 400);
}

#[test]
fn compare_and_plotdata_over_two_algorithms() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path().join("base");
    let pruned = tmp.path().join("pruned");
    execute_run(&short(Algorithm::BaselineQat, 2), &base, |_| {}).unwrap();
    let report = execute_run(&short(Algorithm::Apgdsm, 2), &pruned, |_| {}).unwrap();

    let summary = run::compare(&[base.clone(), pruned.clone()]).unwrap();
    let header = summary.text.lines().next().unwrap();
    assert_eq!(
        header.split('|').map(str::trim).collect::<Vec<_>>(),
        ["Model", "Pruning", "Ch. sp", "Wt. sp", "Accuracy"]
    );
    assert_eq!(summary.rows[0].pruning, "None");
    assert_eq!(summary.rows[1].pruning, "APGDSM");
    assert_eq!(
        summary.rows[1].weight_sparsity,
        (report.records[1].weight_sparsity * 1e6).round() / 1e6
    );
    assert_eq!(summary.csv.lines().count(), 3);
    for (line, run) in summary.csv.lines().skip(1).zip([&base, &pruned]) {
        let cols: Vec<&str> = line.split(',').collect();
        let last = *run::read_metrics(run).unwrap().last().unwrap();
        let parsed: Vec<f64> = cols[2..5].iter().map(|c| c.parse().unwrap()).collect();
        assert_eq!(parsed, [last.channel_sparsity, last.weight_sparsity, last.eval_accuracy]);
    }

    let out = tmp.path().join("plots");
    let files = run::plotdata(&pruned, Some(&out)).unwrap();
    let series = std::fs::read_to_string(&files.sparsity_vs_epoch).unwrap();
    assert_eq!(series.lines().next(), Some(SPARSITY_SERIES_HEADER));
    assert_eq!(series.lines().count(), 3);
    let per_layer = std::fs::read_to_string(&files.channels_per_layer).unwrap();
    assert_eq!(
        per_layer,
        std::fs::read_to_string(pruned.join(run::CHANNELS_FILE)).unwrap()
    );
}

#[test]
fn collapsed_run_keeps_metrics_but_no_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("collapse");
    let cfg = RunConfig::preset("desk-aggressive").unwrap();
    let report = execute_run(&cfg, &dir, |_| {}).unwrap();
    assert_eq!(report.manifest.outcome, Outcome::Collapsed);
    let event = report.manifest.collapse.unwrap();
    assert!(event.layer.is_some());
    assert!(dir.join(run::METRICS_FILE).exists());
    assert!(!dir.join(run::CHECKPOINT_FILE).exists());
    match run::eval_run(&dir) {
        Err(Error::MissingArtifact { what, .. }) => assert_eq!(what, "model.qckpt"),
        other => panic!("expected a missing checkpoint, got {other:?}"),
    }
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    execute_run(&short(Algorithm::Apgdsm, 1), &dir, |_| {}).unwrap();
    let path = dir.join(run::CHECKPOINT_FILE);
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(run::eval_run(&dir), Err(Error::Checksum { .. })));
}

#[test]
fn strict_config_lists_every_unknown_key() {
    let text = "[run]\nepochs = 2\nepoch = 3\n[penalty]\nlambda = 1.0\n[extra]\nx = 1\n";
    match RunConfig::parse(text) {
        Err(Error::UnknownKeys(keys)) => {
            for k in ["run.epoch", "penalty.lambda", "extra"] {
                assert!(
                    keys.iter().any(|key| key.starts_with(k)),
                    "{k} missing from {keys:?}"
                );
            }
            assert_eq!(keys.len(), 3, "{keys:?}");
        }
        other => panic!("expected unknown keys, got {other:?}"),
    }
}

#[test]
fn every_preset_builds_a_train_config() {
    for (name, _) in qsparse_core::config::PRESETS {
        let cfg = RunConfig::preset(name).unwrap();
        let train = cfg.train_config().unwrap();
        assert_eq!(train.epochs, cfg.run.epochs, "{name}");
    }
}

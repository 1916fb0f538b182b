use std::time::Duration;

use qsparse_client::{Client, ClientError};
use qsparse_core::api::{
    ApiOverrides, ErrorKind, ProjectRequest, RunRequest, RunState, ScheduleRequest,
};
use qsparse_core::penalties::PenaltyConfig;
use qsparse_core::run;
use qsparse_core::schedule::{ScheduleConfig, ScheduleVariant};
use qsparse_core::{Algorithm, Tensor};

async fn client() -> Client {
    let (addr, _handle) = qsparse_service::spawn(([127, 0, 0, 1], 0).into())
        .await
        .unwrap();
    Client::new(format!("http://{addr}"))
}

fn api_status(e: ClientError) -> (u16, ErrorKind) {
    match e {
        ClientError::Api { status, error } => (status, error.kind),
        other => panic!("expected an API error, got {other}"),
    }
}

#[tokio::test]
async fn health_and_presets() {
    let c = client().await;
    assert_eq!(c.health().await.unwrap().status, "ok");
    let presets = c.presets().await.unwrap();
    assert!(presets.iter().any(|p| p == "desk"));
    assert!(presets.iter().any(|p| p == "desk-aggressive"));
}

#[tokio::test]
async fn operators_over_http() {
    let c = client().await;
    let x = Tensor::from_vec(vec![1.5, -0.2, -3.0, 0.0]);
    let s = c.shrink(x, 0.5).await.unwrap();
    assert_eq!(s.data(), &[1.0, 0.0, -2.5, 0.0]);

    let w = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.3, 0.4]).unwrap();
    let gl = c.group_lasso(w.clone(), 1.0).await.unwrap();
    assert!((gl.value - 5.5).abs() < 1e-12);
    assert!((gl.prox.data()[0] - 2.4).abs() < 1e-12 && gl.prox.data()[2] == 0.0);
    assert!((gl.subgradient.data()[1] - 0.8).abs() < 1e-12);

    let ct = c
        .ctl1(Tensor::from_vec(vec![0.5, -0.5]), 1.0)
        .await
        .unwrap();
    assert!((ct.value - 0.5).abs() < 1e-12);
    assert!(
        (ct.gradient.data()[0] + 0.25).abs() < 1e-12
            && (ct.gradient.data()[1] - 0.25).abs() < 1e-12
    );

    let layer = c
        .project(&ProjectRequest {
            w: Tensor::from_vec(vec![0.9, -1.1, 0.05, 2.0]),
            bits: 2,
            previous_scale: None,
            alternating_rounds: None,
        })
        .await
        .unwrap();
    assert_eq!(layer.codes, vec![1, -1, 0, 2]);

    let states = c
        .schedule(&ScheduleRequest {
            schedule: ScheduleConfig::reference(ScheduleVariant::Table1),
            penalty: PenaltyConfig {
                lambda1: 0.04,
                lambda2: 5e-6,
                lambda3: 0.0,
                beta: 1e-3,
                ctl1_a: 1.0,
            },
            epochs: vec![1, 35, 80],
        })
        .await
        .unwrap();
    assert_eq!(states.len(), 3);
    assert!((states[1].lambda1 - 0.02).abs() < 1e-15);
    assert!((states[2].lr - 0.01).abs() < 1e-15);
}

#[tokio::test]
async fn invalid_operator_input_is_a_400() {
    let c = client().await;
    let err = c
        .shrink(Tensor::from_vec(vec![1.0]), -1.0)
        .await
        .unwrap_err();
    assert_eq!(api_status(err), (400, ErrorKind::Invalid));
    let err = c
        .project(&ProjectRequest {
            w: Tensor::from_vec(vec![1.0]),
            bits: 9,
            previous_scale: None,
            alternating_rounds: None,
        })
        .await
        .unwrap_err();
    assert_eq!(api_status(err), (400, ErrorKind::Invalid));
}

#[tokio::test]
async fn run_lifecycle() {
    let c = client().await;
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r1");
    let req = RunRequest {
        preset: Some("desk".into()),
        overrides: ApiOverrides {
            algorithm: Some(Algorithm::Apgdssm),
            epochs: Some(2),
            seed: Some(3),
            ..Default::default()
        },
        out: Some(out.clone()),
        ..Default::default()
    };
    let started = c.start_run(&req).await.unwrap();
    assert_eq!(started.epochs, 2);
    let done = c
        .wait_for_run(started.id, Duration::from_millis(50))
        .await
        .unwrap();
    assert_eq!(done.state, RunState::Completed);
    assert_eq!(done.epochs_done, 2);
    let manifest = done.manifest.unwrap();
    assert_eq!(manifest.seed, 3);

    let records = c.run_metrics(started.id).await.unwrap();
    assert_eq!(records.len(), 2);
    assert!(c.runs().await.unwrap().iter().any(|r| r.id == started.id));

    let summary = c.compare(vec![out.clone()]).await.unwrap();
    assert_eq!(summary.rows[0].pruning, "APGDSSM");
    let files = c.plotdata(out.clone(), None).await.unwrap();
    assert!(files.sparsity_vs_epoch.starts_with(&out));
    let eval = c.eval(out.clone()).await.unwrap();
    assert_eq!(eval.accuracy, records[1].eval_accuracy);
}

#[tokio::test]
async fn run_and_artifact_errors() {
    let c = client().await;
    let bad = RunRequest {
        config: Some("[run]\nepochs = 2\nbogus = 1\n".into()),
        ..Default::default()
    };
    let err = c.start_run(&bad).await.unwrap_err();
    let ClientError::Api { status, error } = err else {
        panic!("expected API error")
    };
    assert_eq!((status, error.kind), (400, ErrorKind::Invalid));
    assert!(error.message.contains("run.bogus"), "{}", error.message);

    let err = c.run_status(999).await.unwrap_err();
    assert_eq!(api_status(err), (404, ErrorKind::NotFound));

    let tmp = tempfile::tempdir().unwrap();
    let err = c.eval(tmp.path().join("missing")).await.unwrap_err();
    assert_eq!(api_status(err), (404, ErrorKind::NotFound));

    // A run directory whose checkpoint was damaged.
    let dir = tmp.path().join("run");
    let mut cfg = qsparse_core::RunConfig::preset("desk").unwrap();
    cfg.run.epochs = 1;
    run::execute_run(&cfg, &dir, |_| {}).unwrap();
    let path = dir.join(run::CHECKPOINT_FILE);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 10);
    std::fs::write(&path, bytes).unwrap();
    let err = c.eval(dir).await.unwrap_err();
    assert_eq!(api_status(err), (422, ErrorKind::Corrupt));
}

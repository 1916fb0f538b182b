//! `qsparse`: train, compare, plot and evaluate quantized sparse runs.
//!
//! Every verb talks to a qsparse service. Without `--server` an in-process
//! server is started on an ephemeral loopback port.
//!
//! Exit codes: 0 completed, 2 a run collapsed, 1 usage, config or other error.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use qsparse_client::{Client, ClientError};
use qsparse_core::api::{ApiOverrides, RunRequest, RunState, RunStatus};
use qsparse_core::metrics::MetricsRecord;
use qsparse_core::run::RunManifest;
use qsparse_core::Algorithm;

const EXIT_OK: u8 = 0;
const EXIT_ERROR: u8 = 1;
const EXIT_COLLAPSE: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "qsparse",
    version,
    about = "Joint quantization and channel pruning runs"
)]
struct Cli {
    /// Base URL of a running service; an embedded one is used when absent.
    #[arg(long, global = true, env = "QSPARSE_SERVER")]
    server: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one run per seed and write run directories.
    Train(TrainArgs),
    /// Summarize runs as a table (Model | Pruning | Ch. sp | Wt. sp | Accuracy).
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for summary.csv and summary.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write sparsity_vs_epoch.csv and channels_per_layer.csv for a run.
    Plotdata {
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate a run's checkpoint on its eval split.
    Eval { run: PathBuf },
    /// Run the HTTP service in the foreground.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// Config file (sectioned key = value).
    #[arg(long, conflicts_with_all = ["preset", "from_manifest"])]
    config: Option<PathBuf>,
    /// Built-in preset name.
    #[arg(long, conflicts_with = "from_manifest")]
    preset: Option<String>,
    /// Re-run the configuration recorded in a run manifest.
    #[arg(long)]
    from_manifest: Option<PathBuf>,
    /// baseline-qat, apgdsm, apgdssm or apgdssm-ctl1.
    #[arg(long, value_parser = parse_algorithm)]
    algo: Option<Algorithm>,
    /// One or more seeds (comma separated or repeated).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    seed: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    bits: Option<u8>,
    /// Run directory; with several seeds, the parent of one directory per seed.
    /// Defaults to `$QSPARSE_RUN_ROOT/<preset>-<algo>-s<seed>` (run root `runs`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    Algorithm::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Client(ClientError),
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        Failure::Client(e)
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Client(ClientError::Api { error, .. }) => write!(f, "{error}"),
            Failure::Client(e) => write!(f, "{e}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("QSPARSE_LOG"))
        .with_writer(std::io::stderr)
        .init();

    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(EXIT_ERROR);
        }
    };
    match runtime.block_on(dispatch(cli)) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

async fn dispatch(cli: Cli) -> Result<u8, Failure> {
    if let Command::Serve { addr } = cli.command {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Failure::Usage(format!("cannot bind {addr}: {e}")))?;
        eprintln!(
            "qsparse service listening on http://{}",
            listener.local_addr().unwrap_or(addr)
        );
        qsparse_service::serve(listener)
            .await
            .map_err(|e| Failure::Usage(format!("server error: {e}")))?;
        return Ok(EXIT_OK);
    }

    let client = match cli.server {
        Some(url) => Client::new(url),
        None => {
            let (addr, _handle) = qsparse_service::spawn(([127, 0, 0, 1], 0).into())
                .await
                .map_err(|e| Failure::Usage(format!("cannot start embedded service: {e}")))?;
            Client::new(format!("http://{addr}"))
        }
    };

    match cli.command {
        Command::Train(args) => train(&client, args).await,
        Command::Compare { runs, out } => {
            let summary = client.compare(runs).await?;
            print!("{}", summary.text);
            if let Some(dir) = out {
                write_file(&dir, "summary.csv", &summary.csv)?;
                write_file(&dir, "summary.txt", &summary.text)?;
            }
            Ok(EXIT_OK)
        }
        Command::Plotdata { run, out } => {
            let files = client.plotdata(run, out).await?;
            println!("{}", files.sparsity_vs_epoch.display());
            println!("{}", files.channels_per_layer.display());
            Ok(EXIT_OK)
        }
        Command::Eval { run } => {
            let r = client.eval(run).await?;
            println!(
                "{}: accuracy {:.4} on {} samples, weight sparsity {:.4}, channel sparsity {:.4}",
                r.checkpoint.display(),
                r.accuracy,
                r.samples,
                r.weight_sparsity,
                r.channel_sparsity
            );
            Ok(EXIT_OK)
        }
        Command::Serve { .. } => unreachable!(),
    }
}

fn write_file(dir: &std::path::Path, name: &str, contents: &str) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

async fn train(client: &Client, args: TrainArgs) -> Result<u8, Failure> {
    let config = match (&args.config, &args.from_manifest) {
        (Some(path), _) => Some(
            std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?,
        ),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            let manifest = RunManifest::from_json(&text).map_err(|e| {
                Failure::Usage(format!("{}: not a run manifest: {e}", path.display()))
            })?;
            Some(manifest.config)
        }
        (None, None) => None,
    };
    let seeds: Vec<Option<u64>> = if args.seed.is_empty() {
        vec![None]
    } else {
        args.seed.iter().copied().map(Some).collect()
    };
    let multi = seeds.len() > 1;

    let mut started = Vec::with_capacity(seeds.len());
    for seed in &seeds {
        let out = match (&args.out, seed) {
            (Some(dir), Some(s)) if multi => Some(dir.join(format!("s{s}"))),
            (Some(dir), _) => Some(dir.clone()),
            (None, _) => None,
        };
        let req = RunRequest {
            preset: args.preset.clone(),
            config: config.clone(),
            overrides: ApiOverrides {
                algorithm: args.algo,
                seed: *seed,
                epochs: args.epochs,
                bits: args.bits,
            },
            out,
        };
        started.push(client.start_run(&req).await?);
    }

    let mut code = EXIT_OK;
    for run in started {
        let status = client
            .wait_for_run(run.id, Duration::from_millis(200))
            .await?;
        let last = client.run_metrics(run.id).await?.pop();
        report(&status, last.as_ref());
        match status.state {
            RunState::Completed => {}
            RunState::Collapsed => code = code.max(EXIT_COLLAPSE),
            RunState::Failed | RunState::Running => {
                return Err(Failure::Usage(failure_message(&status)))
            }
        }
    }
    Ok(code)
}

fn failure_message(status: &RunStatus) -> String {
    match &status.error {
        Some(e) => format!("run {} failed: {}", status.dir.display(), e.message),
        None => format!("run {} did not finish", status.dir.display()),
    }
}

fn report(status: &RunStatus, last: Option<&MetricsRecord>) {
    let Some(manifest) = &status.manifest else {
        return;
    };
    match (&manifest.collapse, last) {
        (Some(event), _) => println!("{}: collapsed: {event}", status.dir.display()),
        (None, Some(r)) => println!(
            "{}: completed {} epochs, accuracy {:.4}, weight sparsity {:.4}, channel sparsity {:.4}",
            status.dir.display(),
            r.epoch,
            r.eval_accuracy,
            r.weight_sparsity,
            r.channel_sparsity
        ),
        (None, None) => println!("{}: completed", status.dir.display()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_accept_lists_and_repeats() {
        let cli = Cli::try_parse_from([
            "qsparse",
            "train",
            "--seed",
            "1,2",
            "--seed",
            "3",
            "--algo",
            "APGDSSM_CTL1",
        ])
        .unwrap();
        let Command::Train(args) = cli.command else {
            panic!("not train")
        };
        assert_eq!(args.seed, [1, 2, 3]);
        assert_eq!(args.algo, Some(Algorithm::ApgdssmCtl1));
    }

    #[test]
    fn config_sources_are_exclusive() {
        assert!(
            Cli::try_parse_from(["qsparse", "train", "--config", "a", "--preset", "desk"]).is_err()
        );
        assert!(Cli::try_parse_from(["qsparse", "compare"]).is_err());
    }
}

//! Experiment orchestration and on-disk artifacts.
//!
//! A run directory `out_dir/<name>-<hash>/` holds:
//! `config.json`, `config.sha256`, `metrics.csv`, `timing.csv`,
//! `summary.json`, `shards_seed<s>.json` and `checkpoints/`. An
//! `INCOMPLETE` marker exists until every artifact is written.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::LabeledDataset;
use crate::diagnostics::{
    lipschitz_comparison, noise_error_signals, write_grad_norm_csv, GradNormReport, StabilityReport,
};
use crate::distill::{evaluate, run_method, Method, RunMetrics, ServerPhase, Uploads};
use crate::error::{Error, Result};
use crate::federation::{fedavg_aggregate, partition, train_clients, ClientShard, Ensemble, PartitionSpec, ShardManifest};
use crate::rng::derive_seed;
use crate::vit::ViTParams;

pub const METRICS_CSV_HEADER: &str = "seed,method,epoch,acc,loss_kd,loss_cls_high,loss_kl_low,pool_size";
pub const TIMING_CSV_HEADER: &str = "seed,method,stage,seconds";
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::from(e).at_path(path)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_at(path))
}

/// Partition spec for one experiment seed.
pub fn seed_partition(cfg: &ExperimentConfig, seed: u64) -> PartitionSpec {
    PartitionSpec {
        seed: derive_seed(seed, "partition", 0),
        ..cfg.partition.clone()
    }
}

/// Shared starting weights of every client.
pub fn client_init(cfg: &ExperimentConfig, seed: u64) -> Result<ViTParams> {
    ViTParams::init(&cfg.vit, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "client.init", 0)))
}

/// Server start for `ServerInit::Random`.
pub fn random_server(cfg: &ExperimentConfig, seed: u64) -> Result<ViTParams> {
    ViTParams::init(&cfg.vit, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "server.init", 0)))
}

/// Trained client uploads for one seed.
#[derive(Clone, Debug)]
pub struct SeedClients {
    pub seed: u64,
    pub manifest: ShardManifest,
    pub clients: Vec<ViTParams>,
    /// Proportional to shard sizes.
    pub fedavg_weights: Vec<f64>,
    pub partition_seconds: f64,
    pub train_seconds: f64,
}

impl SeedClients {
    pub fn shards(&self) -> &[ClientShard] {
        &self.manifest.shards
    }

    /// `client<i>.ckpt` plus `shards.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
        self.manifest.save(&dir.join("shards.json"))?;
        for (i, c) in self.clients.iter().enumerate() {
            let p = dir.join(format!("client{i}.ckpt"));
            write_file(&p, &c.checkpoint_bytes()?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, seed: u64) -> Result<Self> {
        let manifest = ShardManifest::load(&dir.join("shards.json"))?;
        let clients = (0..manifest.shards.len())
            .map(|i| {
                let p = dir.join(format!("client{i}.ckpt"));
                let bytes = fs::read(&p).map_err(io_at(&p))?;
                ViTParams::read_checkpoint(&mut bytes.as_slice()).map_err(|e| e.at_path(&p))
            })
            .collect::<Result<Vec<_>>>()?;
        let fedavg_weights = size_weights(&manifest.shards);
        Ok(SeedClients {
            seed,
            manifest,
            clients,
            fedavg_weights,
            partition_seconds: 0.0,
            train_seconds: 0.0,
        })
    }
}

fn size_weights(shards: &[ClientShard]) -> Vec<f64> {
    let total: usize = shards.iter().map(ClientShard::len).sum();
    shards.iter().map(|s| s.len() as f64 / total as f64).collect()
}

/// Partitions `train` and trains every client for `seed`.
pub fn prepare_clients(cfg: &ExperimentConfig, train: &LabeledDataset, seed: u64, workers: usize) -> Result<SeedClients> {
    let t0 = Instant::now();
    let spec = seed_partition(cfg, seed);
    let shards = partition(train, &spec)?;
    let partition_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let init = client_init(cfg, seed)?;
    let outcomes = train_clients(train, &shards, &init, &cfg.local, derive_seed(seed, "local", 0), workers)?;
    let train_seconds = t1.elapsed().as_secs_f64();
    let fedavg_weights = size_weights(&shards);
    Ok(SeedClients {
        seed,
        manifest: ShardManifest {
            spec,
            dataset_len: train.len(),
            shards,
        },
        clients: outcomes.into_iter().map(|o| o.params).collect(),
        fedavg_weights,
        partition_seconds,
        train_seconds,
    })
}

#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub method: Method,
    pub server: ViTParams,
    pub metrics: RunMetrics,
    pub server_seconds: f64,
}

/// Server phase of `method` on already-trained clients.
pub fn run_seed(
    cfg: &ExperimentConfig,
    method: Method,
    clients: &SeedClients,
    test: &LabeledDataset,
    workers: usize,
) -> Result<SeedResult> {
    let t0 = Instant::now();
    let random_init = random_server(cfg, clients.seed)?;
    let uploads = Uploads {
        clients: &clients.clients,
        fedavg_weights: &clients.fedavg_weights,
        random_init: &random_init,
    };
    let phase = ServerPhase {
        inversion: &cfg.inversion,
        schedule: &cfg.server,
        weights: &cfg.weights,
        sparse: true,
        test,
        seed: derive_seed(clients.seed, "server", 0),
        workers,
    };
    let (server, metrics) = run_method(method, &uploads, &phase)?;
    Ok(SeedResult {
        seed: clients.seed,
        method,
        server,
        metrics,
        server_seconds: t0.elapsed().as_secs_f64(),
    })
}

pub fn write_metrics_csv<W: Write>(w: &mut W, results: &[SeedResult]) -> Result<()> {
    writeln!(w, "{METRICS_CSV_HEADER}")?;
    for r in results {
        for e in &r.metrics.epochs {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.seed,
                r.method.name(),
                e.epoch,
                e.accuracy,
                e.loss_kd,
                e.loss_cls_high,
                e.loss_kl_low,
                e.pool_size
            )?;
        }
    }
    Ok(())
}

/// Arithmetic mean and sample standard deviation (0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub config_sha256: String,
    pub method: String,
    pub seeds: Vec<SeedSummary>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// One-shot: every method uploads exactly once.
    pub communication_rounds: usize,
    pub n_clients: usize,
    pub checkpoint_bytes: usize,
    /// Bytes uploaded per seed: `n_clients * checkpoint_bytes`.
    pub upload_bytes: usize,
    pub complete: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: Summary,
    pub results: Vec<SeedResult>,
}

/// Serialized one-shot upload of every client, in client order.
pub fn upload_payload(clients: &[ViTParams]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for c in clients {
        c.write_checkpoint(&mut out)?;
    }
    Ok(out)
}

/// Resolves the run directory: `out` (or the config's `out_dir`) joined with
/// the run id.
pub fn run_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> PathBuf {
    out.unwrap_or(&cfg.out_dir).join(cfg.run_id())
}

fn begin_run_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    write_file(&dir.join(INCOMPLETE_MARKER), b"run in progress or failed\n")?;
    write_file(&dir.join("config.json"), cfg.to_json().as_bytes())?;
    write_file(&dir.join("config.sha256"), format!("{}\n", cfg.content_hash()).as_bytes())
}

fn finish_run_dir(dir: &Path) -> Result<()> {
    let p = dir.join(INCOMPLETE_MARKER);
    fs::remove_file(&p).map_err(io_at(&p))
}

/// Full pipeline for every configured seed with the configured method.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = run_dir(cfg, out);
    begin_run_dir(cfg, &dir)?;
    let (train, test) = cfg.dataset.load(None)?;
    cfg.check_dataset(&train)?;
    cfg.check_dataset(&test)?;

    let mut results = Vec::with_capacity(cfg.seeds.len());
    let mut timing = format!("{TIMING_CSV_HEADER}\n");
    let mut checkpoint_bytes = 0;
    for &seed in &cfg.seeds {
        log::info!("seed {seed}: partition and local training");
        let clients = prepare_clients(cfg, &train, seed, workers)?;
        clients.manifest.save(&dir.join(format!("shards_seed{seed}.json")))?;
        let ckpt_dir = dir.join("checkpoints").join(format!("seed{seed}"));
        clients.save(&ckpt_dir)?;
        checkpoint_bytes = clients.clients[0].checkpoint_bytes()?.len();

        let result = run_seed(cfg, cfg.method, &clients, &test, workers)?;
        write_file(&ckpt_dir.join("server.ckpt"), &result.server.checkpoint_bytes()?)?;
        let m = cfg.method.name();
        for (stage, secs) in [
            ("partition", clients.partition_seconds),
            ("local_train", clients.train_seconds),
            ("server", result.server_seconds),
        ] {
            timing.push_str(&format!("{seed},{m},{stage},{secs}\n"));
        }
        for e in &result.metrics.epochs {
            timing.push_str(&format!("{seed},{m},epoch{},{}\n", e.epoch, e.seconds));
        }
        log::info!("seed {seed}: {m} accuracy {:.4}", result.metrics.final_accuracy);
        results.push(result);
    }

    let mut metrics = Vec::new();
    write_metrics_csv(&mut metrics, &results)?;
    write_file(&dir.join("metrics.csv"), &metrics)?;
    write_file(&dir.join("timing.csv"), timing.as_bytes())?;

    let accs: Vec<f64> = results.iter().map(|r| r.metrics.final_accuracy).collect();
    let (mean, std) = mean_std(&accs);
    let n_clients = cfg.partition.n_clients;
    let summary = Summary {
        name: cfg.name.clone(),
        config_sha256: cfg.content_hash(),
        method: cfg.method.name().into(),
        seeds: results
            .iter()
            .map(|r| SeedSummary {
                seed: r.seed,
                final_accuracy: r.metrics.final_accuracy,
            })
            .collect(),
        mean_accuracy: mean,
        std_accuracy: std,
        communication_rounds: 1,
        n_clients,
        checkpoint_bytes,
        upload_bytes: n_clients * checkpoint_bytes,
        complete: true,
    };
    let json = serde_json::to_string_pretty(&summary)?;
    write_file(&dir.join("summary.json"), json.as_bytes())?;
    finish_run_dir(&dir)?;
    Ok(RunOutcome { dir, summary, results })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedBounds {
    pub seed: u64,
    pub dense: StabilityReport,
    pub fedmitr: StabilityReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSignalRow {
    pub seed: u64,
    pub hard: f64,
    pub soft: f64,
}

#[derive(Clone, Debug)]
pub struct DiagnosticsOutcome {
    pub dir: PathBuf,
    pub reports: Vec<GradNormReport>,
    pub error_signals: Vec<ErrorSignalRow>,
    pub bounds: Vec<SeedBounds>,
}

impl DiagnosticsOutcome {
    /// Seeds with `L̂_Fed < L̂_DI`.
    pub fn fed_wins(&self) -> usize {
        self.reports.iter().filter(|r| r.l_fed < r.l_di).count()
    }
}

/// Diagnostics for every seed on trained clients and their FedAvg server.
///
/// With `clients_dir`, checkpoints are read from `clients_dir/seed<s>/`
/// (as written by [`SeedClients::save`]) and must exist; otherwise clients
/// are trained.
pub fn run_diagnostics(
    cfg: &ExperimentConfig,
    workers: usize,
    out: Option<&Path>,
    clients_dir: Option<&Path>,
) -> Result<DiagnosticsOutcome> {
    cfg.validate()?;
    let dir = run_dir(cfg, out).join("diagnostics");
    begin_run_dir(cfg, &dir)?;
    let train = match clients_dir {
        Some(_) => None,
        None => Some(cfg.dataset.load(None)?.0),
    };
    let mut outcome = DiagnosticsOutcome {
        dir: dir.clone(),
        reports: vec![],
        error_signals: vec![],
        bounds: vec![],
    };
    for &seed in &cfg.seeds {
        let clients = match (clients_dir, &train) {
            (Some(d), _) => {
                let sd = d.join(format!("seed{seed}"));
                if !sd.join("shards.json").exists() {
                    return Err(Error::Config(format!("missing client checkpoints for seed {seed}")).at_path(sd));
                }
                SeedClients::load(&sd, seed)?
            }
            (None, Some(t)) => prepare_clients(cfg, t, seed, workers)?,
            (None, None) => unreachable!("train data loaded when no checkpoint dir is given"),
        };
        let server = fedavg_aggregate(&clients.clients, &clients.fedavg_weights)?;
        let ensemble = Ensemble::uniform(clients.clients.clone())?;
        let d = &cfg.diagnostics;
        let report = lipschitz_comparison(
            &clients.clients,
            &server,
            &ensemble,
            &cfg.inversion,
            &cfg.weights,
            d,
            derive_seed(seed, "diagnostics", 0),
            workers,
        )?;
        let (hard, soft) = noise_error_signals(&server, &ensemble, d.noise_batch, derive_seed(seed, "diagnostics.noise", 0))?;
        let n = (clients.clients.len() * cfg.inversion.batch_size) as f64;
        let t = d.steps as f64;
        outcome.bounds.push(SeedBounds {
            seed,
            dense: StabilityReport::compute(report.l_di, t, n, &d.bounds)?,
            fedmitr: StabilityReport::compute(report.l_fed, t, n, &d.bounds)?,
        });
        log::info!(
            "seed {seed}: L_DI {:.4}, L_Fed {:.4}, hard {hard:.4}, soft {soft:.4}",
            report.l_di,
            report.l_fed
        );
        outcome.error_signals.push(ErrorSignalRow { seed, hard, soft });
        outcome.reports.push(report);
    }

    let p = dir.join("grad_norms.csv");
    let mut w = BufWriter::new(fs::File::create(&p).map_err(io_at(&p))?);
    write_grad_norm_csv(&mut w, &outcome.reports)?;
    w.flush().map_err(io_at(&p))?;
    let mut es = String::from("seed,hard,soft\n");
    for r in &outcome.error_signals {
        es.push_str(&format!("{},{},{}\n", r.seed, r.hard, r.soft));
    }
    write_file(&dir.join("error_signals.csv"), es.as_bytes())?;
    write_file(&dir.join("bounds.json"), serde_json::to_string_pretty(&outcome.bounds)?.as_bytes())?;
    finish_run_dir(&dir)?;
    Ok(outcome)
}

/// Test accuracy of a stored checkpoint.
pub fn eval_checkpoint(path: &Path, test: &LabeledDataset) -> Result<f64> {
    let bytes = fs::read(path).map_err(io_at(path))?;
    let params = ViTParams::read_checkpoint(&mut bytes.as_slice()).map_err(|e| e.at_path(path))?;
    evaluate(&params, test)
}

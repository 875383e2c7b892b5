use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fedmitr::config::ExperimentConfig;
use fedmitr::distill::{evaluate, Method};
use fedmitr::experiment::{
    eval_checkpoint, prepare_clients, run_diagnostics, run_dir, run_experiment, seed_partition,
};
use fedmitr::federation::{partition, ShardManifest};
use fedmitr::parallel::resolve_workers;

#[derive(Parser, Debug)]
#[command(name = "simulator", version, about = "One-shot federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, conflicts_with = "profile")]
    config: Option<PathBuf>,
    /// Built-in profile instead of a config file: toy or paper.
    #[arg(long)]
    profile: Option<String>,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; defaults to the config's out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; falls back to SIM_WORKERS, then the CPU count.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print a profile as an editable config file.
    ShowConfig(Common),
    /// Write the train/test datasets in the FMTR format.
    GenData(Common),
    /// Partition the training set and write shard manifests.
    Partition(Common),
    /// Train every client and write their checkpoints.
    TrainClients(Common),
    /// Full experiment: partition, local training, server phase, evaluation.
    Run {
        #[command(flatten)]
        common: Common,
        /// Override the configured method: fedmitr, dense_kd or fedavg.
        #[arg(long)]
        method: Option<Method>,
    },
    /// Gradient-norm, error-signal and bound diagnostics.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Client checkpoints from train-clients (`<dir>/seed<s>/`).
        #[arg(long)]
        clients: Option<PathBuf>,
    },
    /// Test accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

struct Loaded {
    cfg: ExperimentConfig,
    source: String,
    out: Option<PathBuf>,
    workers: usize,
}

fn load(common: &Common) -> Result<Loaded> {
    let (mut cfg, source) = match (&common.config, &common.profile) {
        (Some(p), _) => (ExperimentConfig::load(p)?, p.display().to_string()),
        (None, Some(name)) => (ExperimentConfig::profile(name)?, format!("profile {name}")),
        (None, None) => bail!("pass --config <path> or --profile <toy|paper>"),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    Ok(Loaded {
        cfg,
        source,
        out: common.out.clone(),
        workers: resolve_workers(common.workers),
    })
}

fn stage_dir(l: &Loaded) -> PathBuf {
    run_dir(&l.cfg, l.out.as_deref())
}

fn gen_data(l: &Loaded) -> Result<()> {
    let (train, test) = l.cfg.dataset.load(None)?;
    let dir = stage_dir(l).join("data");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    train.save(&dir.join("train.fmtr"))?;
    test.save(&dir.join("test.fmtr"))?;
    println!("wrote {} train and {} test images to {}", train.len(), test.len(), dir.display());
    Ok(())
}

fn partition_cmd(l: &Loaded) -> Result<()> {
    let (train, _) = l.cfg.dataset.load(None)?;
    let dir = stage_dir(l);
    for &seed in &l.cfg.seeds {
        let spec = seed_partition(&l.cfg, seed);
        let shards = partition(&train, &spec)?;
        let manifest = ShardManifest {
            spec,
            dataset_len: train.len(),
            shards,
        };
        let p = dir.join(format!("shards_seed{seed}.json"));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        manifest.save(&p)?;
        for s in &manifest.shards {
            let counts = s.dataset(&train).class_counts();
            println!("seed {seed} client {}: {} samples, per class {counts:?}", s.client, s.len());
        }
    }
    Ok(())
}

fn train_clients_cmd(l: &Loaded) -> Result<()> {
    let (train, test) = l.cfg.dataset.load(None)?;
    let dir = stage_dir(l).join("clients");
    for &seed in &l.cfg.seeds {
        let clients = prepare_clients(&l.cfg, &train, seed, l.workers)?;
        clients.save(&dir.join(format!("seed{seed}")))?;
        for (i, c) in clients.clients.iter().enumerate() {
            println!("seed {seed} client {i}: test accuracy {:.4}", evaluate(c, &test)?);
        }
    }
    println!("checkpoints in {}", dir.display());
    Ok(())
}

fn run_cmd(l: &mut Loaded, method: Option<Method>) -> Result<()> {
    if let Some(m) = method {
        l.cfg.method = m;
    }
    let out = run_experiment(&l.cfg, l.workers, l.out.as_deref())?;
    let s = &out.summary;
    println!(
        "{}: accuracy {:.4} ± {:.4} over {} seeds; {} round, {} upload bytes",
        s.method,
        s.mean_accuracy,
        s.std_accuracy,
        s.seeds.len(),
        s.communication_rounds,
        s.upload_bytes
    );
    println!("artifacts in {}", out.dir.display());
    Ok(())
}

fn diagnose_cmd(l: &Loaded, clients: Option<PathBuf>) -> Result<()> {
    let default = stage_dir(l).join("clients");
    let clients = clients.or_else(|| default.is_dir().then_some(default));
    let out = run_diagnostics(&l.cfg, l.workers, l.out.as_deref(), clients.as_deref())?;
    for (r, e) in out.reports.iter().zip(&out.error_signals) {
        println!(
            "seed {}: L_DI {:.5} L_Fed {:.5} | E|d_hard|^2 {:.5} E|d_soft|^2 {:.5}",
            e.seed, r.l_di, r.l_fed, e.hard, e.soft
        );
    }
    println!("L_Fed < L_DI in {} of {} seeds", out.fed_wins(), out.reports.len());
    println!("artifacts in {}", out.dir.display());
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(command: Command) -> Result<()> {
    let common = match &command {
        Command::ShowConfig(c) | Command::GenData(c) | Command::Partition(c) | Command::TrainClients(c) => c,
        Command::Run { common, .. } | Command::Diagnose { common, .. } | Command::Eval { common, .. } => common,
    };
    let mut l = load(common)?;
    let source = l.source.clone();
    let result = match command {
        Command::ShowConfig(_) => {
            println!("{}", l.cfg.to_json());
            Ok(())
        }
        Command::GenData(_) => gen_data(&l),
        Command::Partition(_) => partition_cmd(&l),
        Command::TrainClients(_) => train_clients_cmd(&l),
        Command::Run { method, .. } => run_cmd(&mut l, method),
        Command::Diagnose { clients, .. } => diagnose_cmd(&l, clients),
        Command::Eval { checkpoint, .. } => {
            let (_, test) = l.cfg.dataset.load(None)?;
            let acc = eval_checkpoint(&checkpoint, &test)?;
            println!("{}: test accuracy {acc:.4}", checkpoint.display());
            Ok(())
        }
    };
    result.with_context(|| format!("config {source}"))
}

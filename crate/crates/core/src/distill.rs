//! Server phase: alternate inversion epochs with token-relabel distillation
//! on the growing synthetic pool, plus evaluation and the baselines.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::federation::{fedavg_aggregate, Ensemble};
use crate::inversion::{build_synthetic_pool, InversionConfig, SyntheticBatch};
use crate::losses::{relabel_objective, LossWeights, RelabelTerms, TeacherTargets};
use crate::optim::Sgd;
use crate::rng::stream_rng;
use crate::tensor::Graph;
use crate::vit::{batch_logits, TokenMask, ViTParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Fedmitr,
    DenseKd,
    Fedavg,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fedmitr => "fedmitr",
            Method::DenseKd => "dense_kd",
            Method::Fedavg => "fedavg",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedmitr" => Ok(Method::Fedmitr),
            "dense_kd" => Ok(Method::DenseKd),
            "fedavg" => Ok(Method::Fedavg),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Starting point of the server model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerInit {
    #[default]
    Fedavg,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSchedule {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Distillation steps per epoch; each step uses one pool batch.
    pub batches_per_epoch: usize,
    pub init: ServerInit,
}

impl Default for ServerSchedule {
    fn default() -> Self {
        ServerSchedule {
            epochs: 4,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batches_per_epoch: 20,
            init: ServerInit::Fedavg,
        }
    }
}

impl ServerSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("server epochs must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("server lr, momentum and weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub accuracy: f64,
    pub loss_kd: f64,
    pub loss_cls_high: f64,
    pub loss_kl_low: f64,
    /// Synthetic images in the pool after this epoch's inversion.
    pub pool_size: usize,
    /// Wall time of the epoch; excluded from deterministic outputs.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub final_accuracy: f64,
}

/// Predicted class per row of `[B, K]` logits, lowest index on ties.
pub fn argmax_rows(logits: &[f64], k: usize) -> Vec<usize> {
    logits
        .chunks(k)
        .map(|row| (0..k).fold(0, |best, c| if row[c] > row[best] { c } else { best }))
        .collect()
}

const EVAL_CHUNK: usize = 256;

/// Fraction of argmax-correct predictions on `test`.
pub fn evaluate(params: &ViTParams, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::invalid("evaluate needs a nonempty test set"));
    }
    let k = params.config.num_classes;
    let l = params.config.num_patches();
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (images, labels) = test.batch(chunk)?;
        let masks = vec![TokenMask::full(l); chunk.len()];
        let logits = batch_logits(params, &images, &masks)?;
        correct += argmax_rows(logits.data(), k)
            .iter()
            .zip(&labels)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Pool entry with its cached ensemble targets.
struct Entry {
    batch: SyntheticBatch,
    teacher: TeacherTargets,
}

/// Everything [`server_train`] needs besides the models.
#[derive(Clone, Debug)]
pub struct ServerPhase<'a> {
    pub inversion: &'a InversionConfig,
    pub schedule: &'a ServerSchedule,
    pub weights: &'a LossWeights,
    /// Sparse inversion when `true`, dense otherwise.
    pub sparse: bool,
    pub test: &'a LabeledDataset,
    pub seed: u64,
    pub workers: usize,
}

/// One distillation step: relabel objective on `batch` and an SGD update.
pub fn distill_step(
    server: &mut ViTParams,
    opt: &mut Sgd,
    batch: &SyntheticBatch,
    teacher: &TeacherTargets,
    weights: &LossWeights,
) -> Result<RelabelTerms<f64>> {
    let cfg = server.config.clone();
    let mut g = Graph::new();
    let bound = server.bind(&mut g, true);
    let terms = relabel_objective(&mut g, &bound, &cfg, &batch.images, &batch.labels, &batch.masks, teacher, weights)?;
    let values = terms.values(&g);
    if !values.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            value: values.total,
            context: format!("distillation on client {} epoch {} batch", batch.client, batch.epoch),
        });
    }
    g.backward(terms.total)?;
    let grads = bound.grads(&g);
    opt.step(&mut server.tensors_mut(), &grads)?;
    Ok(values)
}

/// Algorithm loop: per epoch, invert one batch per client against the
/// current server, append it to the pool, then take SGD steps on batches
/// drawn uniformly from the whole pool.
pub fn server_train(
    clients: &[ViTParams],
    init_server: &ViTParams,
    ensemble: &Ensemble,
    phase: &ServerPhase<'_>,
) -> Result<(ViTParams, RunMetrics)> {
    phase.schedule.validate()?;
    phase.inversion.validate()?;
    phase.weights.validate()?;
    if clients.is_empty() {
        return Err(Error::invalid("server_train needs at least one client"));
    }
    let mut server = init_server.clone();
    let sched = phase.schedule;
    let mut opt = Sgd::new(sched.lr, sched.momentum, sched.weight_decay);
    let mut rng = stream_rng(phase.seed, "distill.sample", 0);
    let mut pool: Vec<Entry> = Vec::new();
    let mut metrics = RunMetrics::default();

    for epoch in 0..sched.epochs {
        let start = Instant::now();
        let fresh = build_synthetic_pool(
            clients,
            &server,
            phase.inversion,
            phase.weights,
            epoch,
            phase.seed,
            phase.sparse,
            phase.workers,
        )?;
        for batch in fresh {
            let teacher = TeacherTargets::compute(ensemble, &batch.images, &batch.masks, phase.weights)?;
            pool.push(Entry { batch, teacher });
        }
        let (mut kd, mut ce, mut kl) = (0.0, 0.0, 0.0);
        for step in 0..sched.batches_per_epoch {
            let e = &pool[rng.random_range(0..pool.len())];
            let v = distill_step(&mut server, &mut opt, &e.batch, &e.teacher, phase.weights).map_err(|err| match err {
                Error::NonFiniteLoss { value, context } => Error::NonFiniteLoss {
                    value,
                    context: format!("{context} (epoch {epoch}, step {step})"),
                },
                other => other,
            })?;
            kd += v.kd;
            ce += v.ce_high;
            kl += v.kl_low;
        }
        let n = sched.batches_per_epoch.max(1) as f64;
        let accuracy = evaluate(&server, phase.test)?;
        metrics.epochs.push(EpochMetrics {
            epoch,
            accuracy,
            loss_kd: kd / n,
            loss_cls_high: ce / n,
            loss_kl_low: kl / n,
            pool_size: pool.iter().map(|e| e.batch.len()).sum(),
            seconds: start.elapsed().as_secs_f64(),
        });
        log::info!("server epoch {epoch}: acc {accuracy:.4}, pool {}", pool.len());
    }
    metrics.final_accuracy = metrics.epochs.last().map_or(0.0, |e| e.accuracy);
    Ok((server, metrics))
}

/// Uploaded client models plus what the server knows about them.
#[derive(Clone, Debug)]
pub struct Uploads<'a> {
    pub clients: &'a [ViTParams],
    /// FedAvg weights, typically proportional to client data sizes.
    pub fedavg_weights: &'a [f64],
    /// Used when the schedule asks for a random server start.
    pub random_init: &'a ViTParams,
}

/// Loss weights for the dense-inversion KD baseline: no relabel terms.
pub fn dense_kd_weights(weights: &LossWeights) -> LossWeights {
    LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        ..weights.clone()
    }
}

/// Runs one method's server phase from the uploaded models.
pub fn run_method(method: Method, uploads: &Uploads<'_>, phase: &ServerPhase<'_>) -> Result<(ViTParams, RunMetrics)> {
    let avg = fedavg_aggregate(uploads.clients, uploads.fedavg_weights)?;
    if method == Method::Fedavg {
        let start = Instant::now();
        let accuracy = evaluate(&avg, phase.test)?;
        let metrics = RunMetrics {
            epochs: vec![EpochMetrics {
                epoch: 0,
                accuracy,
                loss_kd: 0.0,
                loss_cls_high: 0.0,
                loss_kl_low: 0.0,
                pool_size: 0,
                seconds: start.elapsed().as_secs_f64(),
            }],
            final_accuracy: accuracy,
        };
        return Ok((avg, metrics));
    }
    let ensemble = Ensemble::uniform(uploads.clients.to_vec())?;
    let init = match phase.schedule.init {
        ServerInit::Fedavg => avg,
        ServerInit::Random => uploads.random_init.clone(),
    };
    match method {
        Method::Fedmitr => server_train(uploads.clients, &init, &ensemble, &ServerPhase { sparse: true, ..phase.clone() }),
        _ => {
            let weights = dense_kd_weights(phase.weights);
            let dense = ServerPhase {
                sparse: false,
                weights: &weights,
                ..phase.clone()
            };
            server_train(uploads.clients, &init, &ensemble, &dense)
        }
    }
}

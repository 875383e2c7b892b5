use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ClientShard;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::cross_entropy_graph;
use crate::optim::Sgd;
use crate::parallel::par_map;
use crate::rng::{derive_seed, stream_rng};
use crate::tensor::Graph;
use crate::vit::{forward_graph, TokenMask, ViTParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalTrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        LocalTrainConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 5,
            batch_size: 32,
        }
    }
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("local lr, momentum and weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("local batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ViTParams,
    /// Mean mini-batch cross entropy of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// SGD on mean cross entropy over shuffled mini-batches of `data`.
pub fn local_train(data: &LabeledDataset, init: &ViTParams, hp: &LocalTrainConfig, seed: u64) -> Result<TrainOutcome> {
    hp.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("local_train needs a nonempty shard"));
    }
    let mut batch_size = hp.batch_size;
    if batch_size > data.len() {
        log::warn!("batch size {batch_size} exceeds shard size {}; clamping", data.len());
        batch_size = data.len();
    }
    let cfg = init.config.clone();
    let mut params = init.clone();
    let mut opt = Sgd::new(hp.lr, hp.momentum, hp.weight_decay);
    let mut rng = stream_rng(seed, "local_train", 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(hp.epochs);
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(batch_size) {
            let (images, labels) = data.batch(chunk)?;
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let x = g.constant(&images);
            let masks = vec![TokenMask::full(cfg.num_patches()); chunk.len()];
            let out = forward_graph(&mut g, &bound, &cfg, x, &masks)?;
            let ce = cross_entropy_graph(&mut g, out.logits, &labels)?;
            let loss = g.scale(ce, 1.0 / chunk.len() as f64);
            let value = g.item(loss);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    value,
                    context: format!("local_train epoch {epoch} batch {batches}"),
                });
            }
            g.backward(loss)?;
            let grads = bound.grads(&g);
            opt.step(&mut params.tensors_mut(), &grads)?;
            total += value;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(TrainOutcome { params, epoch_losses })
}

/// Trains every shard independently from the same `init`, fanning out over
/// `workers` threads. Client `i` uses seed stream `(seed, "client", i)`.
pub fn train_clients(
    data: &LabeledDataset,
    shards: &[ClientShard],
    init: &ViTParams,
    hp: &LocalTrainConfig,
    seed: u64,
    workers: usize,
) -> Result<Vec<TrainOutcome>> {
    let jobs: Vec<&ClientShard> = shards.iter().collect();
    par_map(jobs, workers, |_, shard| {
        let local = shard.dataset(data);
        local_train(&local, init, hp, derive_seed(seed, "client", shard.client as u64))
    })
    .into_iter()
    .collect()
}

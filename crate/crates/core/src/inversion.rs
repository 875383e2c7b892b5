//! Sparse model inversion: synthesize class-conditional images from a frozen
//! client model by Adam on pixels, halting the least-attended patches.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{inversion_objective, pixel_keep, LossWeights};
use crate::optim::Adam;
use crate::parallel::par_map;
use crate::rng::{derive_seed, stream_rng};
use crate::tensor::{Graph, Tensor};
use crate::vit::{collect_traces, extract_cls_attention_with, forward_batch, ClsReadout, TokenMask, ViTConfig, ViTParams};

/// Slack for `floor(r * L)` so that e.g. `0.3 * 10` counts as 3.
const FLOOR_SLACK: f64 = 1e-9;

/// When masking events fire.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSchedule {
    /// One event at iteration `floor(T / 2)`.
    #[default]
    Single,
    /// An event after every iteration.
    Progressive,
    /// Events after the listed iterations.
    At { iterations: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub mask_ratio: f64,
    pub schedule: MaskSchedule,
    pub batch_size: usize,
    /// Pixels are clamped to `[-clamp, clamp]` after every step.
    pub clamp: f64,
    pub readout: ClsReadout,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            iterations: 100,
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.99,
            eps: 1e-8,
            mask_ratio: 0.3,
            schedule: MaskSchedule::Single,
            batch_size: 32,
            clamp: 3.0,
            readout: ClsReadout::default(),
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio must lie in [0, 1), got {}", self.mask_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("inversion batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.eps > 0.0 && self.clamp > 0.0) {
            return Err(Error::Config("inversion lr >= 0, eps > 0 and clamp > 0 required".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if let MaskSchedule::At { iterations } = &self.schedule {
            if let Some(&t) = iterations.iter().find(|&&t| t >= self.iterations) {
                return Err(Error::Config(format!(
                    "mask event at {t} outside [0, {})",
                    self.iterations
                )));
            }
        }
        Ok(())
    }

    /// Sorted, deduplicated iterations after which masking fires.
    pub fn mask_events(&self) -> Vec<usize> {
        let t = self.iterations;
        let mut ev = match &self.schedule {
            _ if t == 0 => Vec::new(),
            MaskSchedule::Single => vec![t / 2],
            MaskSchedule::Progressive => (0..t).collect(),
            MaskSchedule::At { iterations } => iterations.clone(),
        };
        ev.sort_unstable();
        ev.dedup();
        ev
    }

    /// Total number of tokens halted once every event has fired.
    pub fn masked_count(&self, num_patches: usize) -> usize {
        masked_count(self.mask_ratio, num_patches)
    }
}

pub fn masked_count(ratio: f64, num_patches: usize) -> usize {
    (ratio * num_patches as f64 + FLOOR_SLACK).floor() as usize
}

/// Result of a masking decision.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskUpdate {
    pub mask: TokenMask,
    /// The request would have halted every remaining token; one was kept.
    pub saturated: bool,
}

/// Halts the `count` lowest-scoring active tokens, lower index first on
/// ties. Never reactivates a token and always leaves one active.
pub fn deactivate_lowest(a_cls: &[f64], current: &TokenMask, count: usize) -> Result<MaskUpdate> {
    if a_cls.len() != current.len() {
        return Err(Error::invalid(format!(
            "{} attention scores for {} tokens",
            a_cls.len(),
            current.len()
        )));
    }
    let mut active: Vec<usize> = (0..current.len()).filter(|&i| current.is_active(i)).collect();
    active.sort_by(|&a, &b| a_cls[a].total_cmp(&a_cls[b]).then(a.cmp(&b)));
    let saturated = count >= active.len() && count > 0;
    let take = count.min(active.len().saturating_sub(1));
    let mut mask = current.clone();
    for &i in &active[..take] {
        mask.deactivate(i);
    }
    Ok(MaskUpdate { mask, saturated })
}

/// Halts the `floor(r * L)` lowest-attention active tokens.
pub fn compute_mask(a_cls: &[f64], current: &TokenMask, r: f64) -> Result<MaskUpdate> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::invalid(format!("mask ratio must lie in [0, 1), got {r}")));
    }
    deactivate_lowest(a_cls, current, masked_count(r, current.len()))
}

/// Pixels `N(0, 1)` shaped `[b, H, W, C]` and labels uniform over `K`.
pub fn init_noise(b: usize, config: &ViTConfig, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = stream_rng(seed, "inversion.noise", 0);
    let [h, w, c] = config.image_shape();
    let images = Tensor::randn(&[b, h, w, c], 1.0, &mut rng);
    let labels = (0..b).map(|_| rng.random_range(0..config.num_classes)).collect();
    (images, labels)
}

/// One logged inversion step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionStep {
    pub iteration: usize,
    pub ce: f64,
    pub js: f64,
    pub tv: f64,
    pub l2: f64,
    /// Largest `|∂L/∂x|` over pixels of halted patches at this step.
    pub masked_grad_max: f64,
    pub active_tokens: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBatch {
    /// `[b, H, W, C]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub masks: Vec<TokenMask>,
    /// Class-token attention of the final images under the final masks.
    pub cls_attention: Vec<Vec<f64>>,
    pub client: usize,
    pub epoch: usize,
    pub log: Vec<InversionStep>,
}

impl SyntheticBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Runs `T_I` Adam steps on the pixels of active patches against the frozen
/// `local` (cross entropy) and `server` (JS) networks, masking at scheduled
/// iterations from the attention of that iteration's forward.
pub fn invert_batch(
    local: &ViTParams,
    server: &ViTParams,
    config: &InversionConfig,
    weights: &LossWeights,
    seed: u64,
) -> Result<SyntheticBatch> {
    run_inversion(local, server, config, weights, seed, true)
}

/// Inversion without masking: every patch is updated at every step.
pub fn dense_invert_batch(
    local: &ViTParams,
    server: &ViTParams,
    config: &InversionConfig,
    weights: &LossWeights,
    seed: u64,
) -> Result<SyntheticBatch> {
    run_inversion(local, server, config, weights, seed, false)
}

fn run_inversion(
    local: &ViTParams,
    server: &ViTParams,
    config: &InversionConfig,
    weights: &LossWeights,
    seed: u64,
    sparse: bool,
) -> Result<SyntheticBatch> {
    config.validate()?;
    weights.validate()?;
    let cfg = &local.config;
    if server.config != *cfg {
        return Err(Error::invalid("local and server configs differ"));
    }
    let b = config.batch_size;
    let l = cfg.num_patches();
    let (mut images, labels) = init_noise(b, cfg, seed);
    let mut masks = vec![TokenMask::full(l); b];
    let events = if sparse { config.mask_events() } else { Vec::new() };
    let target = config.masked_count(l);
    let mut adam = Adam::new(images.numel(), config.lr, config.beta1, config.beta2, config.eps);
    let mut log = Vec::with_capacity(config.iterations);
    let inv_b = 1.0 / b as f64;

    for t in 0..config.iterations {
        let mut g = Graph::new();
        let lb = local.bind(&mut g, false);
        let sb = server.bind(&mut g, false);
        let x = g.leaf(&images.clone().with_grad());
        let (terms, forward) = inversion_objective(&mut g, &lb, &sb, cfg, x, &labels, &masks, weights)?;
        let total = g.item(terms.total);
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                value: total,
                context: format!("inversion iteration {t}"),
            });
        }
        g.backward(terms.total)?;
        let grad = g.grad_or_zeros(x);
        let keep = pixel_keep(cfg, &masks);
        let frozen: Vec<bool> = keep.iter().map(|&k| k == 0.0).collect();
        let masked_grad_max = grad
            .data()
            .iter()
            .zip(&frozen)
            .filter(|(_, &f)| f)
            .fold(0.0f64, |m, (v, _)| m.max(v.abs()));
        let v = terms.values(&g);
        log.push(InversionStep {
            iteration: t,
            ce: v.ce * inv_b,
            js: v.js * inv_b,
            tv: v.tv * inv_b,
            l2: v.l2 * inv_b,
            masked_grad_max,
            active_tokens: masks.iter().map(TokenMask::active_count).sum(),
        });

        // a zero step size leaves pixels untouched, clamp included
        if config.lr > 0.0 {
            adam.step(images.data_mut(), grad.data(), Some(&frozen));
            for (p, f) in images.data_mut().iter_mut().zip(&frozen) {
                if !f {
                    *p = p.clamp(-config.clamp, config.clamp);
                }
            }
        }

        if let Some(j) = events.iter().position(|&e| e == t) {
            // cumulative halted count after event j of m
            let goal = target * (j + 1) / events.len();
            let traces = collect_traces(&g, &forward, cfg);
            for (mask, trace) in masks.iter_mut().zip(&traces) {
                let a_cls = extract_cls_attention_with(trace, config.readout);
                let already = l - mask.active_count();
                let update = deactivate_lowest(&a_cls, mask, goal.saturating_sub(already))?;
                if update.saturated {
                    log::warn!("mask ratio saturates the active set at iteration {t}");
                }
                *mask = update.mask;
            }
        }
    }

    let traces = forward_batch(local, &images, &masks)?;
    let cls_attention = traces
        .iter()
        .map(|tr| extract_cls_attention_with(tr, config.readout))
        .collect();
    Ok(SyntheticBatch {
        images,
        labels,
        masks,
        cls_attention,
        client: 0,
        epoch: 0,
        log,
    })
}

/// Inversion seed for `(epoch, client)` under a run seed.
pub fn inversion_seed(seed: u64, epoch: usize, client: usize) -> u64 {
    derive_seed(derive_seed(seed, "inversion.epoch", epoch as u64), "inversion.client", client as u64)
}

/// One inversion batch per client for `epoch`, tagged with its source.
#[allow(clippy::too_many_arguments)]
pub fn build_synthetic_pool(
    clients: &[ViTParams],
    server: &ViTParams,
    config: &InversionConfig,
    weights: &LossWeights,
    epoch: usize,
    seed: u64,
    sparse: bool,
    workers: usize,
) -> Result<Vec<SyntheticBatch>> {
    if clients.is_empty() {
        return Err(Error::invalid("synthetic pool needs at least one client"));
    }
    let jobs: Vec<&ViTParams> = clients.iter().collect();
    par_map(jobs, workers, |i, local| {
        let s = inversion_seed(seed, epoch, i);
        let mut batch = run_inversion(local, server, config, weights, s, sparse)?;
        batch.client = i;
        batch.epoch = epoch;
        Ok(batch)
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PoolEntry {
    epoch: usize,
    client: usize,
    images: String,
    labels: Vec<usize>,
    masks: Vec<TokenMask>,
}

/// Writes `pool.json` plus one tensor file per batch into `dir`.
pub fn save_pool(dir: &Path, pool: &[SyntheticBatch]) -> Result<()> {
    let write = || -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(pool.len());
        for batch in pool {
            let name = format!("pool_e{}_c{}.tensor", batch.epoch, batch.client);
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(&name))?);
            batch.images.write_to(&mut f)?;
            f.flush()?;
            entries.push(PoolEntry {
                epoch: batch.epoch,
                client: batch.client,
                images: name,
                labels: batch.labels.clone(),
                masks: batch.masks.clone(),
            });
        }
        std::fs::write(dir.join("pool.json"), serde_json::to_string_pretty(&entries)?)?;
        Ok(())
    };
    write().map_err(|e| e.at_path(dir))
}

/// Reads a pool written by [`save_pool`]; attention and logs are not stored.
pub fn load_pool(dir: &Path) -> Result<Vec<SyntheticBatch>> {
    let read = || -> Result<Vec<SyntheticBatch>> {
        let entries: Vec<PoolEntry> = serde_json::from_str(&std::fs::read_to_string(dir.join("pool.json"))?)?;
        entries
            .into_iter()
            .map(|e| {
                let mut f = std::io::BufReader::new(std::fs::File::open(dir.join(&e.images))?);
                Ok(SyntheticBatch {
                    images: Tensor::read_from(&mut f)?,
                    labels: e.labels,
                    masks: e.masks,
                    cls_attention: Vec::new(),
                    client: e.client,
                    epoch: e.epoch,
                    log: Vec::new(),
                })
            })
            .collect()
    };
    read().map_err(|e| e.at_path(dir))
}

/// Header of the inversion loss CSV.
pub const LOSS_CSV_HEADER: &str = "epoch,client,iteration,l_cls,js,tv,l2,masked_grad_max,active_tokens";

pub fn write_loss_csv<W: Write>(w: &mut W, pool: &[SyntheticBatch]) -> Result<()> {
    writeln!(w, "{LOSS_CSV_HEADER}")?;
    for b in pool {
        for s in &b.log {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                b.epoch, b.client, s.iteration, s.ce, s.js, s.tv, s.l2, s.masked_grad_max, s.active_tokens
            )?;
        }
    }
    Ok(())
}

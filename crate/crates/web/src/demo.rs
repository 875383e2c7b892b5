//! Target-independent logic behind the browser bindings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedmitr::data::{generate_toyshapes, LabeledDataset, Split, ToyShapesSpec};
use fedmitr::diagnostics::{generalization_bound, sgd_stability_bound};
use fedmitr::federation::{local_train, partition, LocalTrainConfig, PartitionKind, PartitionSpec};
use fedmitr::inversion::{invert_batch, InversionConfig};
use fedmitr::losses::LossWeights;
use fedmitr::vit::{vit_forward, ViTConfig, ViTParams};
use fedmitr::Result;

/// Per-client class counts, row-major `[n_clients, classes]`, for a
/// balanced label set of `per_class` samples per class.
pub fn partition_counts(kind: PartitionKind, n_clients: usize, classes: usize, per_class: usize, seed: u64) -> Result<Vec<u32>> {
    let labels: Vec<usize> = (0..classes).flat_map(|k| std::iter::repeat_n(k, per_class)).collect();
    let ds = LabeledDataset::new([1, 1, 1], classes, vec![0.0; labels.len()], labels, Split::Train)?;
    let spec = PartitionSpec { kind, n_clients, seed };
    let shards = partition(&ds, &spec)?;
    let mut counts = vec![0u32; n_clients * classes];
    for s in &shards {
        for &i in &s.indices {
            counts[s.client * classes + ds.labels()[i]] += 1;
        }
    }
    Ok(counts)
}

/// Inputs shared by every point of a bound curve.
#[derive(Clone, Copy, Debug)]
pub struct CurveInputs {
    pub mu: f64,
    pub c: f64,
    pub t: f64,
    pub n: f64,
    pub m: f64,
    pub delta: f64,
    pub r_emp: f64,
}

/// `(L, β(L), bound(L))` on `points` evenly spaced `L ∈ [0, l_max]`.
pub fn bound_curves(l_max: f64, points: usize, k: &CurveInputs) -> Result<Vec<[f64; 3]>> {
    let steps = points.max(2) - 1;
    (0..=steps)
        .map(|i| {
            let l = l_max * i as f64 / steps as f64;
            let beta = sgd_stability_bound(l, k.mu, k.c, k.t, k.n)?;
            Ok([l, beta, generalization_bound(k.r_emp, beta, k.m, k.n, k.delta)?])
        })
        .collect()
}

/// A small trained client plus an untrained server for inversion demos.
pub struct InversionDemo {
    pub local: ViTParams,
    pub server: ViTParams,
    pub samples: LabeledDataset,
}

#[derive(Clone, Debug)]
pub struct InversionView {
    pub size: usize,
    pub grid: usize,
    /// `[size * size]`, single channel.
    pub pixels: Vec<f64>,
    /// One flag per patch, row-major.
    pub active: Vec<bool>,
    pub cls_attention: Vec<f64>,
    /// Local-model probability of the requested label.
    pub confidence: f64,
    pub ce_first: f64,
    pub ce_last: f64,
}

impl InversionDemo {
    pub const CLASSES: usize = 4;

    pub fn new(seed: u64) -> Result<Self> {
        let shapes = ToyShapesSpec {
            num_classes: Self::CLASSES,
            n_per_class: 50,
            ..ToyShapesSpec::default()
        };
        let (train, test) = generate_toyshapes(&shapes, seed)?;
        let cfg = ViTConfig {
            num_classes: Self::CLASSES,
            ..ViTConfig::default()
        };
        let init = ViTParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let hp = LocalTrainConfig {
            epochs: 8,
            batch_size: 16,
            ..LocalTrainConfig::default()
        };
        let local = local_train(&train, &init, &hp, seed)?.params;
        let server = ViTParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed))?;
        Ok(InversionDemo {
            local,
            server,
            samples: test,
        })
    }

    /// Inverts one image of `label` and reports what the mask halted.
    pub fn invert(&self, label: usize, mask_ratio: f64, iterations: usize, lr: f64, seed: u64) -> Result<InversionView> {
        let cfg = InversionConfig {
            iterations,
            lr,
            mask_ratio,
            batch_size: 1,
            ..InversionConfig::default()
        };
        // rejection over seeds: init_noise draws the label
        let mut s = seed;
        let batch = loop {
            let (_, labels) = fedmitr::inversion::init_noise(1, &self.local.config, s);
            if labels[0] == label % Self::CLASSES {
                break invert_batch(&self.local, &self.server, &cfg, &LossWeights::default(), s)?;
            }
            s = s.wrapping_add(0x9e37_79b9);
        };
        let vc = &self.local.config;
        let trace = vit_forward(&self.local, &batch.images.reshaped(&vc.image_shape())?, Some(&batch.masks[0]))?;
        let p = fedmitr::losses::softmax_rows(&trace.logits.reshaped(&[1, vc.num_classes])?, 1.0);
        Ok(InversionView {
            size: vc.image_size,
            grid: vc.grid(),
            pixels: batch.images.data().to_vec(),
            active: batch.masks[0].active().to_vec(),
            cls_attention: batch.cls_attention[0].clone(),
            confidence: p.data()[batch.labels[0]],
            ce_first: batch.log.first().map_or(f64::NAN, |l| l.ce),
            ce_last: batch.log.last().map_or(f64::NAN, |l| l.ce),
        })
    }

    /// First test image of `label`, for side-by-side comparison.
    pub fn real_sample(&self, label: usize) -> Vec<f64> {
        let i = self.samples.labels().iter().position(|&y| y == label).unwrap_or(0);
        self.samples.image_data(i).to_vec()
    }
}

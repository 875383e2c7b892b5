//! Experiment configuration: one JSON tree, validated before any compute.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_toyshapes, LabeledDataset, Split, ToyShapesSpec};
use crate::diagnostics::DiagnosticsConfig;
use crate::distill::{Method, ServerSchedule};
use crate::error::{Error, Result};
use crate::federation::{LocalTrainConfig, PartitionSpec};
use crate::inversion::InversionConfig;
use crate::losses::LossWeights;
use crate::vit::ViTConfig;

/// Where the labeled data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generated toy shapes; `seed` is fixed across experiment seeds.
    Toy {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        shapes: ToyShapesSpec,
    },
    /// Two files in the FMTR dataset format.
    Files { train: PathBuf, test: PathBuf },
}

impl DatasetSource {
    /// Loads `(train, test)`. Relative file paths resolve against `base`.
    pub fn load(&self, base: Option<&Path>) -> Result<(LabeledDataset, LabeledDataset)> {
        match self {
            DatasetSource::Toy { seed, shapes } => generate_toyshapes(shapes, *seed),
            DatasetSource::Files { train, test } => {
                let resolve = |p: &PathBuf| match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                Ok((
                    LabeledDataset::load(&resolve(train), Split::Train)?,
                    LabeledDataset::load(&resolve(test), Split::Test)?,
                ))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSource,
    pub vit: ViTConfig,
    /// The spec's own `seed` is replaced per experiment seed.
    pub partition: PartitionSpec,
    #[serde(default)]
    pub local: LocalTrainConfig,
    #[serde(default)]
    pub inversion: InversionConfig,
    #[serde(default)]
    pub server: ServerSchedule,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub method: Method,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

impl ExperimentConfig {
    /// Named presets: `toy` runs in minutes on a laptop; `paper` mirrors the
    /// published hyperparameters and is not desk-reproducible without
    /// pre-trained backbones.
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown profile {other:?}; expected toy or paper"))),
        }
    }

    fn toy() -> Self {
        ExperimentConfig {
            name: "toy".into(),
            // 10 classes so Dir(0.1) leaves most clients with several labels
            dataset: DatasetSource::Toy {
                seed: 0,
                shapes: ToyShapesSpec {
                    num_classes: 10,
                    ..ToyShapesSpec::default()
                },
            },
            vit: ViTConfig {
                num_classes: 10,
                ..ViTConfig::default()
            },
            partition: PartitionSpec::dirichlet(0.1, 4, 0),
            local: LocalTrainConfig {
                epochs: 20,
                ..LocalTrainConfig::default()
            },
            // 1e-3 barely moves 16x16 pixels in 100 iterations
            inversion: InversionConfig {
                lr: 0.05,
                ..InversionConfig::default()
            },
            server: ServerSchedule {
                batches_per_epoch: 100,
                ..ServerSchedule::default()
            },
            weights: LossWeights::default(),
            method: Method::Fedmitr,
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: "runs".into(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }

    fn paper() -> Self {
        ExperimentConfig {
            name: "paper".into(),
            dataset: DatasetSource::Toy {
                seed: 0,
                shapes: ToyShapesSpec {
                    num_classes: 10,
                    n_per_class: 600,
                    image_size: 32,
                    channels: 3,
                    patch_size: 4,
                    ..ToyShapesSpec::default()
                },
            },
            vit: ViTConfig {
                image_size: 32,
                channels: 3,
                patch_size: 4,
                embed_dim: 192,
                num_heads: 3,
                num_layers: 12,
                mlp_ratio: 4,
                num_classes: 10,
            },
            partition: PartitionSpec::dirichlet(0.1, 10, 0),
            local: LocalTrainConfig {
                lr: 1e-3,
                momentum: 0.9,
                weight_decay: 1e-4,
                epochs: 50,
                batch_size: 64,
            },
            inversion: InversionConfig {
                batch_size: 64,
                ..InversionConfig::default()
            },
            server: ServerSchedule {
                lr: 1e-3,
                ..ServerSchedule::default()
            },
            weights: LossWeights::default(),
            method: Method::Fedmitr,
            seeds: vec![0, 1, 2],
            out_dir: "runs".into(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates; errors carry the path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at_path(path))?;
        Self::from_json(&text).map_err(|e| e.at_path(path))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON rendering.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Run directory id: name plus the first 12 hash digits.
    pub fn run_id(&self) -> String {
        format!("{}-{}", self.name, &self.content_hash()[..12])
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |what: &str, e: Error| Error::Config(format!("{what}: {e}"));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("name {:?} must be a non-empty path segment", self.name)));
        }
        self.vit.validate().map_err(|e| ctx("vit", e))?;
        self.partition.validate().map_err(|e| ctx("partition", e))?;
        self.local.validate().map_err(|e| ctx("local", e))?;
        self.inversion.validate().map_err(|e| ctx("inversion", e))?;
        self.server.validate().map_err(|e| ctx("server", e))?;
        self.weights.validate().map_err(|e| ctx("weights", e))?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if let DatasetSource::Toy { shapes, .. } = &self.dataset {
            shapes.validate().map_err(|e| ctx("dataset", e))?;
            let v = &self.vit;
            if (shapes.image_size, shapes.channels, shapes.num_classes) != (v.image_size, v.channels, v.num_classes)
                || shapes.patch_size != v.patch_size
            {
                return Err(Error::Config(format!(
                    "dataset {}x{}x{} with {} classes and patch {} does not match vit {}x{}x{} with {} classes and patch {}",
                    shapes.image_size,
                    shapes.image_size,
                    shapes.channels,
                    shapes.num_classes,
                    shapes.patch_size,
                    v.image_size,
                    v.image_size,
                    v.channels,
                    v.num_classes,
                    v.patch_size
                )));
            }
        }
        if self.diagnostics.steps == 0 || self.diagnostics.noise_batch == 0 {
            return Err(Error::Config("diagnostics steps and noise_batch must be positive".into()));
        }
        if !(self.diagnostics.lr >= 0.0) {
            return Err(Error::Config("diagnostics lr must be >= 0".into()));
        }
        Ok(())
    }

    /// Checks a loaded dataset against the model shape.
    pub fn check_dataset(&self, ds: &LabeledDataset) -> Result<()> {
        let v = &self.vit;
        if ds.image_shape() != v.image_shape() || ds.num_classes() != v.num_classes {
            return Err(Error::Config(format!(
                "dataset shape {:?} with {} classes does not match vit {:?} with {} classes",
                ds.image_shape(),
                ds.num_classes(),
                v.image_shape(),
                v.num_classes
            )));
        }
        Ok(())
    }
}

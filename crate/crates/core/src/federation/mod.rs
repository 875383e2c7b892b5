//! Client-side simulation: non-IID partitioning, independent local
//! training, the logit ensemble and FedAvg aggregation.

mod ensemble;
mod partition;
mod train;

pub use crate::data::{LabeledDataset, Split};
pub use ensemble::{fedavg_aggregate, Ensemble};
pub use partition::{
    dirichlet_partition, partition, pathological_partition, ClientShard, PartitionKind, PartitionSpec,
    ShardManifest, PARTITION_RETRIES,
};
pub use train::{local_train, train_clients, LocalTrainConfig, TrainOutcome};

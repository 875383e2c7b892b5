use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Resampling budget when a draw leaves some client without data.
pub const PARTITION_RETRIES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionKind {
    Dirichlet { alpha: f64 },
    Pathological { classes_per_client: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub n_clients: usize,
    #[serde(default)]
    pub seed: u64,
}

impl PartitionSpec {
    pub fn dirichlet(alpha: f64, n_clients: usize, seed: u64) -> Self {
        PartitionSpec {
            kind: PartitionKind::Dirichlet { alpha },
            n_clients,
            seed,
        }
    }

    pub fn pathological(classes_per_client: usize, n_clients: usize, seed: u64) -> Self {
        PartitionSpec {
            kind: PartitionKind::Pathological { classes_per_client },
            n_clients,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::Config("n_clients must be >= 1".into()));
        }
        match self.kind {
            PartitionKind::Dirichlet { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                Err(Error::Config(format!("dirichlet alpha must be > 0, got {alpha}")))
            }
            PartitionKind::Pathological { classes_per_client: 0 } => {
                Err(Error::Config("classes_per_client must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Sample indices held by one client, ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client: usize,
    pub indices: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dataset(&self, source: &LabeledDataset) -> LabeledDataset {
        source.subset(&self.indices)
    }
}

/// Persisted client → sample-index assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardManifest {
    pub spec: PartitionSpec,
    pub dataset_len: usize,
    pub shards: Vec<ClientShard>,
}

impl ShardManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let write = || -> Result<()> {
            std::fs::write(path, serde_json::to_string_pretty(self)?)?;
            Ok(())
        };
        write().map_err(|e| e.at_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let read = || -> Result<Self> { Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?) };
        read().map_err(|e| e.at_path(path))
    }
}

fn class_indices(ds: &LabeledDataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); ds.num_classes()];
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    by_class
}

/// One Dirichlet(α, …, α) draw over `n` components, computed in log space so
/// tiny α cannot underflow every component to zero.
fn dirichlet_draw(alpha: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Gamma(α) = Gamma(α + 1) · U^(1/α)
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha + 1 > 0");
    let logs: Vec<f64> = (0..n)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// Integer counts summing to `total` from proportions, largest remainder
/// first, ties to the lower client index.
fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn finish(assign: Vec<Vec<usize>>) -> Option<Vec<ClientShard>> {
    if assign.iter().any(Vec::is_empty) {
        return None;
    }
    Some(
        assign
            .into_iter()
            .enumerate()
            .map(|(client, mut indices)| {
                indices.sort_unstable();
                ClientShard { client, indices }
            })
            .collect(),
    )
}

/// Per class, client proportions `~ Dir(α)`; samples are dealt out from a
/// seeded shuffle of that class.
pub fn dirichlet_partition(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    let PartitionKind::Dirichlet { alpha } = spec.kind else {
        return Err(Error::invalid("dirichlet_partition needs a dirichlet spec"));
    };
    let n = spec.n_clients;
    if ds.len() < n {
        return Err(Error::PartitionExhausted {
            retries: 0,
            reason: format!("{} samples cannot cover {n} clients", ds.len()),
        });
    }
    let by_class = class_indices(ds);
    let mut rng = stream_rng(spec.seed, "partition.dirichlet", 0);
    for _ in 0..=PARTITION_RETRIES {
        let mut assign = vec![Vec::new(); n];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let counts = largest_remainder(&dirichlet_draw(alpha, n, &mut rng), members.len());
            let mut it = members.into_iter();
            for (client, &c) in counts.iter().enumerate() {
                assign[client].extend(it.by_ref().take(c));
            }
        }
        if let Some(shards) = finish(assign) {
            return Ok(shards);
        }
    }
    Err(Error::PartitionExhausted {
        retries: PARTITION_RETRIES,
        reason: format!("some client stayed empty at alpha={alpha}"),
    })
}

/// Each client owns `k` distinct classes; every class is owned by at least
/// one client, and its samples are split evenly among its owners.
pub fn pathological_partition(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    let PartitionKind::Pathological { classes_per_client: k } = spec.kind else {
        return Err(Error::invalid("pathological_partition needs a pathological spec"));
    };
    let (n, num_classes) = (spec.n_clients, ds.num_classes());
    if k > num_classes {
        return Err(Error::Config(format!("{k} classes per client exceeds K={num_classes}")));
    }
    if n * k < num_classes {
        return Err(Error::Config(format!(
            "{n} clients x {k} classes cannot cover K={num_classes}"
        )));
    }
    let by_class = class_indices(ds);
    let mut rng = stream_rng(spec.seed, "partition.pathological", 0);
    for _ in 0..=PARTITION_RETRIES {
        // deal a permutation round-robin for coverage, then top up at random
        let mut perm: Vec<usize> = (0..num_classes).collect();
        perm.shuffle(&mut rng);
        let mut owned: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (j, &class) in perm.iter().enumerate() {
            owned[j % n].push(class);
        }
        for classes in owned.iter_mut() {
            let missing: Vec<usize> = (0..num_classes).filter(|c| !classes.contains(c)).collect();
            let extra = k - classes.len();
            classes.extend(missing.choose_multiple(&mut rng, extra).copied());
        }
        let mut assign = vec![Vec::new(); n];
        for (class, members) in by_class.iter().enumerate() {
            let owners: Vec<usize> = (0..n).filter(|&c| owned[c].contains(&class)).collect();
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let (base, rem) = (members.len() / owners.len(), members.len() % owners.len());
            let mut it = members.into_iter();
            for (j, &client) in owners.iter().enumerate() {
                assign[client].extend(it.by_ref().take(base + usize::from(j < rem)));
            }
        }
        if let Some(shards) = finish(assign) {
            return Ok(shards);
        }
    }
    Err(Error::PartitionExhausted {
        retries: PARTITION_RETRIES,
        reason: format!("some client stayed empty with {k} classes per client"),
    })
}

pub fn partition(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    match spec.kind {
        PartitionKind::Dirichlet { .. } => dirichlet_partition(ds, spec),
        PartitionKind::Pathological { .. } => pathological_partition(ds, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use proptest::prelude::*;

    fn balanced(k: usize, per_class: usize) -> LabeledDataset {
        let labels: Vec<usize> = (0..k * per_class).map(|i| i % k).collect();
        let pixels = (0..labels.len()).map(|i| i as f64).collect();
        LabeledDataset::new([1, 1, 1], k, pixels, labels, Split::Train).unwrap()
    }

    fn assert_exact_cover(shards: &[ClientShard], len: usize) {
        let mut all: Vec<usize> = shards.iter().flat_map(|s| s.indices.iter().copied()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..len).collect::<Vec<_>>());
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.1, 0.6, 0.3], 10), vec![1, 6, 3]);
        assert_eq!(largest_remainder(&[0.34, 0.33, 0.33], 2), vec![1, 1, 0]);
    }

    #[test]
    fn single_client_takes_everything() {
        let ds = balanced(4, 10);
        let shards = dirichlet_partition(&ds, &PartitionSpec::dirichlet(0.1, 1, 3)).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].indices, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn large_alpha_is_near_uniform() {
        let ds = balanced(4, 400);
        for seed in 0..3 {
            let shards = dirichlet_partition(&ds, &PartitionSpec::dirichlet(1e6, 4, seed)).unwrap();
            for s in &shards {
                for c in s.dataset(&ds).class_counts() {
                    assert!((c as f64 - 100.0).abs() <= 10.0, "count {c}");
                }
            }
        }
    }

    #[test]
    fn dirichlet_replays_and_skews() {
        let ds = balanced(4, 100);
        let spec = PartitionSpec::dirichlet(0.1, 4, 11);
        let a = dirichlet_partition(&ds, &spec).unwrap();
        assert_eq!(a, dirichlet_partition(&ds, &spec).unwrap());
        assert_exact_cover(&a, ds.len());
        // small alpha concentrates each class on few clients
        let dominant = (0..4)
            .map(|class| a.iter().map(|s| s.dataset(&ds).class_counts()[class]).max().unwrap())
            .sum::<usize>();
        assert!(dominant > 250, "dominant share {dominant}");
    }

    #[test]
    fn exhaustion_is_reported() {
        let ds = balanced(2, 1);
        let err = dirichlet_partition(&ds, &PartitionSpec::dirichlet(1.0, 3, 0)).unwrap_err();
        assert!(matches!(err, Error::PartitionExhausted { .. }));
    }

    #[test]
    fn pathological_examples() {
        let ds = balanced(10, 30);
        let all = pathological_partition(&ds, &PartitionSpec::pathological(10, 4, 1)).unwrap();
        assert!(all.iter().all(|s| s.dataset(&ds).class_counts().iter().all(|&c| c > 0)));

        let pure = pathological_partition(&ds, &PartitionSpec::pathological(1, 10, 2)).unwrap();
        for s in &pure {
            assert_eq!(s.dataset(&ds).class_counts().iter().filter(|&&c| c > 0).count(), 1);
        }
        assert_exact_cover(&pure, ds.len());

        let three = pathological_partition(&ds, &PartitionSpec::pathological(3, 10, 3)).unwrap();
        for s in &three {
            assert_eq!(s.dataset(&ds).class_counts().iter().filter(|&&c| c > 0).count(), 3);
        }
        assert!(pathological_partition(&ds, &PartitionSpec::pathological(11, 4, 0)).is_err());
        assert!(pathological_partition(&ds, &PartitionSpec::pathological(1, 4, 0)).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let ds = balanced(4, 10);
        let spec = PartitionSpec::dirichlet(0.5, 3, 4);
        let shards = dirichlet_partition(&ds, &spec).unwrap();
        let m = ShardManifest {
            spec,
            dataset_len: ds.len(),
            shards,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shards.json");
        m.save(&path).unwrap();
        assert_eq!(ShardManifest::load(&path).unwrap(), m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn partitions_are_disjoint_and_exhaustive(
            seed in 0u64..1000,
            n in 1usize..8,
            alpha in 0.05f64..10.0,
            k in 1usize..=4,
        ) {
            let ds = balanced(4, 12);
            let d = dirichlet_partition(&ds, &PartitionSpec::dirichlet(alpha, n, seed));
            if let Ok(shards) = d {
                assert_exact_cover(&shards, ds.len());
            }
            if n * k >= 4 {
                let p = pathological_partition(&ds, &PartitionSpec::pathological(k, n, seed)).unwrap();
                assert_exact_cover(&p, ds.len());
                for s in &p {
                    let labels = s.dataset(&ds).class_counts().iter().filter(|&&c| c > 0).count();
                    prop_assert!(labels <= k);
                }
            }
        }
    }
}

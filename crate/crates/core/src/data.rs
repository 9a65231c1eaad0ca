//! Labeled pools, the unlabeled public set, synthetic Gaussian-cluster data,
//! non-IID Dirichlet sharding and per-round client sampling.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    features: Tensor2D,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledSet {
    pub fn new(features: Tensor2D, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape("LabeledSet::new", "one label per row required"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::input("LabeledSet::new", format!("label {y} >= {num_classes}")));
        }
        Ok(Self { features, labels, num_classes })
    }

    pub fn features(&self) -> &Tensor2D {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        self.labels.iter().for_each(|&y| h[y] += 1);
        h
    }
}

/// Shared reference inputs. Carries no labels by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PublicSet {
    features: Tensor2D,
}

impl PublicSet {
    pub fn new(features: Tensor2D) -> Self {
        Self { features }
    }

    pub fn features(&self) -> &Tensor2D {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Ground-truth labels of the public set, kept aside for diagnostics. Every
/// read is counted so tests can assert that training never touched them.
#[derive(Debug, Default)]
pub struct WithheldLabels {
    labels: Vec<usize>,
    reads: AtomicUsize,
}

impl WithheldLabels {
    pub fn reveal(&self) -> &[usize] {
        self.reads.fetch_add(1, Ordering::SeqCst);
        &self.labels
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Training-pool samples per class.
    pub samples_per_class: usize,
    /// Held-out evaluation samples per class.
    pub test_samples_per_class: usize,
    pub public_set_size: usize,
    /// Standard deviation of samples around their class mean. Class means are
    /// standard normal per coordinate.
    pub cluster_spread: f64,
}

#[derive(Debug)]
pub struct SyntheticData {
    pub pool: LabeledSet,
    pub test: LabeledSet,
    pub public: PublicSet,
    pub public_labels: WithheldLabels,
    pub class_means: Tensor2D,
}

/// One Gaussian cluster per class. The public set is drawn from the same
/// mixture with uniformly chosen classes; its labels are withheld.
pub fn synthetic_dataset_gen(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    const OP: &str = "synthetic_dataset_gen";
    if spec.num_classes < 2 {
        return Err(Error::input(OP, "need at least two classes"));
    }
    if spec.feature_dim == 0 {
        return Err(Error::input(OP, "feature_dim must be positive"));
    }
    if !(spec.cluster_spread >= 0.0 && spec.cluster_spread.is_finite()) {
        return Err(Error::input(OP, "cluster_spread must be finite and nonnegative"));
    }
    let mut rng = stream_rng(seed, Stream::Data, &[]);
    let means = Tensor2D::gaussian(spec.num_classes, spec.feature_dim, 1.0, &mut rng);
    let draw = |labels: Vec<usize>, rng: &mut crate::rng::SimRng| {
        let mut x = Tensor2D::zeros(labels.len(), spec.feature_dim);
        for (i, &y) in labels.iter().enumerate() {
            for (v, m) in x.row_mut(i).iter_mut().zip(means.row(y)) {
                let z: f64 = StandardNormal.sample(rng);
                *v = m + spec.cluster_spread * z;
            }
        }
        (x, labels)
    };
    let per_class = |n: usize| (0..spec.num_classes).flat_map(|c| std::iter::repeat_n(c, n)).collect();
    let (x, y) = draw(per_class(spec.samples_per_class), &mut rng);
    let pool = LabeledSet::new(x, y, spec.num_classes)?;
    let (x, y) = draw(per_class(spec.test_samples_per_class), &mut rng);
    let test = LabeledSet::new(x, y, spec.num_classes)?;
    let public_classes = (0..spec.public_set_size).map(|_| rng.random_range(0..spec.num_classes)).collect();
    let (x, y) = draw(public_classes, &mut rng);
    Ok(SyntheticData {
        pool,
        test,
        public: PublicSet::new(x),
        public_labels: WithheldLabels { labels: y, reads: AtomicUsize::new(0) },
        class_means: means,
    })
}

/// Splits a labeled pool into `num_clients` disjoint shards. For each class,
/// proportions over clients are drawn from a symmetric Dirichlet(gamma) and
/// that class's (shuffled) samples are cut accordingly. A shard left empty
/// receives one sample donated by the currently largest shard.
///
/// Returns index lists into `pool`.
pub fn dirichlet_partition(pool: &LabeledSet, num_clients: usize, gamma: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    const OP: &str = "dirichlet_partition";
    if num_clients == 0 {
        return Err(Error::input(OP, "num_clients must be at least 1"));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::input(OP, "gamma must be positive"));
    }
    if pool.len() < num_clients {
        return Err(Error::input(OP, format!("pool of {} cannot cover {num_clients} clients", pool.len())));
    }
    let mut rng = stream_rng(seed, Stream::Partition, &[]);
    let gamma_dist = Gamma::new(gamma, 1.0).map_err(|e| Error::input(OP, e.to_string()))?;
    let mut shards = vec![Vec::new(); num_clients];
    for class in 0..pool.num_classes() {
        let mut members: Vec<usize> = (0..pool.len()).filter(|&i| pool.labels()[i] == class).collect();
        members.shuffle(&mut rng);
        let mut props: Vec<f64> = (0..num_clients).map(|_| gamma_dist.sample(&mut rng)).collect();
        let total: f64 = props.iter().sum();
        if total > 0.0 && total.is_finite() {
            props.iter_mut().for_each(|p| *p /= total);
        } else {
            // every gamma draw underflowed; fall back to an even split
            props.iter_mut().for_each(|p| *p = 1.0 / num_clients as f64);
        }
        let n = members.len();
        let mut start = 0;
        let mut acc = 0.0;
        for (client, p) in props.iter().enumerate() {
            acc += p;
            let end = if client + 1 == num_clients { n } else { ((acc * n as f64).round() as usize).min(n) };
            let end = end.max(start);
            shards[client].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let donor = (0..num_clients).max_by_key(|&i| (shards[i].len(), std::cmp::Reverse(i))).unwrap();
        let sample = shards[donor].pop().expect("donor shard is nonempty");
        shards[empty].push(sample);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

/// `m` distinct client ids drawn uniformly for this round, ascending.
pub fn select_clients(num_clients: usize, m: usize, round: u32, seed: u64) -> Result<Vec<usize>> {
    if m > num_clients {
        return Err(Error::input("select_clients", format!("{m} of {num_clients} clients")));
    }
    let mut rng = stream_rng(seed, Stream::Selection, &[u64::from(round)]);
    let mut ids = index::sample(&mut rng, num_clients, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 4,
            feature_dim: 6,
            samples_per_class: 50,
            test_samples_per_class: 10,
            public_set_size: 30,
            cluster_spread: 0.5,
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = synthetic_dataset_gen(&spec(), 5).unwrap();
        let b = synthetic_dataset_gen(&spec(), 5).unwrap();
        assert_eq!(a.pool, b.pool);
        assert_eq!(a.public, b.public);
        assert_eq!(a.pool.len(), 200);
        assert_eq!(a.test.len(), 40);
        assert_eq!(a.public.len(), 30);
        assert_ne!(a.pool, synthetic_dataset_gen(&spec(), 6).unwrap().pool);
    }

    #[test]
    fn zero_spread_is_separable_by_nearest_mean() {
        let d = synthetic_dataset_gen(&SyntheticSpec { cluster_spread: 0.0, ..spec() }, 1).unwrap();
        let correct = (0..d.test.len())
            .filter(|&i| {
                let x = d.test.features().row(i);
                let nearest = (0..4)
                    .min_by(|&a, &b| {
                        let da: f64 = x.iter().zip(d.class_means.row(a)).map(|(p, q)| (p - q).powi(2)).sum();
                        let db: f64 = x.iter().zip(d.class_means.row(b)).map(|(p, q)| (p - q).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                nearest == d.test.labels()[i]
            })
            .count();
        assert_eq!(correct, d.test.len());
    }

    #[test]
    fn rejects_single_class() {
        assert!(synthetic_dataset_gen(&SyntheticSpec { num_classes: 1, ..spec() }, 0).is_err());
    }

    #[test]
    fn single_client_gets_everything() {
        let d = synthetic_dataset_gen(&spec(), 2).unwrap();
        let shards = dirichlet_partition(&d.pool, 1, 0.5, 0).unwrap();
        assert_eq!(shards, vec![(0..200).collect::<Vec<_>>()]);
    }

    #[test]
    fn partition_too_small_pool() {
        let d = synthetic_dataset_gen(&SyntheticSpec { samples_per_class: 1, ..spec() }, 2).unwrap();
        assert!(dirichlet_partition(&d.pool, 5, 0.5, 0).is_err());
        assert!(dirichlet_partition(&d.pool, 4, 0.5, 0).is_ok());
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_clients(5, 5, 3, 0).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_clients(50, 10, 7, 1).unwrap(), select_clients(50, 10, 7, 1).unwrap());
        assert!(select_clients(3, 4, 0, 0).is_err());
    }

    #[test]
    fn withheld_labels_count_reads() {
        let d = synthetic_dataset_gen(&spec(), 0).unwrap();
        assert_eq!(d.public_labels.reads(), 0);
        assert_eq!(d.public_labels.reveal().len(), 30);
        assert_eq!(d.public_labels.reads(), 1);
    }
}

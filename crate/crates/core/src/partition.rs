//! Splitting a dataset across clients, iid or with Dirichlet label skew.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, tag, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    Dirichlet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    /// Dirichlet concentration; ignored for iid splits.
    pub alpha: f64,
    pub num_clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn iid(num_clients: usize, seed: u64) -> Self {
        Self {
            kind: PartitionKind::Iid,
            alpha: 0.0,
            num_clients,
            seed,
        }
    }

    pub fn dirichlet(alpha: f64, num_clients: usize, seed: u64) -> Self {
        Self {
            kind: PartitionKind::Dirichlet,
            alpha,
            num_clients,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::validation("partition needs at least one client"));
        }
        if self.kind == PartitionKind::Dirichlet && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::validation(format!(
                "dirichlet alpha must be positive and finite, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    partition_labels(dataset.labels(), dataset.num_classes(), spec)
}

/// Disjoint shards covering `0..labels.len()`, each sorted ascending.
pub fn partition_labels(labels: &[usize], num_classes: usize, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let n = labels.len();
    let k = spec.num_clients;
    if k > n {
        return Err(Error::validation(format!(
            "cannot split {n} samples across {k} clients"
        )));
    }
    let mut rng = rng::stream(spec.seed, &[tag::PARTITION]);
    let mut shards = match spec.kind {
        PartitionKind::Iid => {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            let (base, extra) = (n / k, n % k);
            let mut rest = all.as_slice();
            (0..k)
                .map(|c| {
                    let take = base + usize::from(c < extra);
                    let (head, tail) = rest.split_at(take);
                    rest = tail;
                    head.to_vec()
                })
                .collect()
        }
        PartitionKind::Dirichlet => dirichlet_shards(labels, num_classes, spec.alpha, k, &mut rng)?,
    };
    repair_empty(&mut shards);
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

fn dirichlet_shards(
    labels: &[usize],
    num_classes: usize,
    alpha: f64,
    k: usize,
    rng: &mut StreamRng,
) -> Result<Vec<Vec<usize>>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::validation(format!("dirichlet alpha: {e}")))?;
    let mut shards = vec![Vec::new(); k];
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        let proportions: Vec<f64> = if total > 0.0 && total.is_finite() {
            draws.iter().map(|d| d / total).collect()
        } else {
            // every draw underflowed; put the whole class on one client
            let mut p = vec![0.0; k];
            p[rng.random_range(0..k)] = 1.0;
            p
        };
        let counts = largest_remainder(&proportions, members.len());
        let mut rest = members.as_slice();
        for (shard, count) in shards.iter_mut().zip(counts) {
            let (head, tail) = rest.split_at(count);
            shard.extend_from_slice(head);
            rest = tail;
        }
    }
    Ok(shards)
}

/// Integer counts summing to `total` that follow `proportions`: floors
/// first, then one extra for the largest fractional parts (ties to the
/// lower index).
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Moves one sample from the largest shard into each empty shard.
fn repair_empty(shards: &mut [Vec<usize>]) {
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let largest = (0..shards.len())
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("at least one shard");
        let (pos, _) = shards[largest]
            .iter()
            .enumerate()
            .max_by_key(|(_, &v)| v)
            .expect("largest shard is non-empty");
        let moved = shards[largest].swap_remove(pos);
        shards[empty].push(moved);
    }
}

/// Per-class sample counts of one shard.
pub fn class_histogram(labels: &[usize], shard: &[usize], num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for &i in shard {
        h[labels[i]] += 1;
    }
    h
}

/// Largest absolute gap, over clients and classes, between a client's
/// class proportions and the global class proportions.
pub fn max_proportion_deviation(labels: &[usize], shards: &[Vec<usize>], num_classes: usize) -> f64 {
    let global = class_histogram(labels, &(0..labels.len()).collect::<Vec<_>>(), num_classes);
    let n = labels.len() as f64;
    shards
        .iter()
        .filter(|s| !s.is_empty())
        .flat_map(|s| {
            let h = class_histogram(labels, s, num_classes);
            let len = s.len() as f64;
            h.into_iter()
                .zip(&global)
                .map(move |(c, &g)| (c as f64 / len - g as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

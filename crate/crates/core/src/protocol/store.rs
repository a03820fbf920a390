use std::collections::{BTreeMap, VecDeque};

use rand::seq::index;
use rand::Rng;

use super::messages::{ClientUpdate, FeaturePair};
use crate::error::{Error, Result};

/// Server-side dataset of feature pairs: one bounded queue per client,
/// evicting oldest-first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    capacity_per_client: usize,
    dim_in: usize,
    dim_out: usize,
    queues: BTreeMap<usize, VecDeque<FeaturePair>>,
}

impl FeatureStore {
    pub fn new(capacity_per_client: usize, dim_in: usize, dim_out: usize) -> Self {
        Self {
            capacity_per_client,
            dim_in,
            dim_out,
            queues: BTreeMap::new(),
        }
    }

    pub fn capacity_per_client(&self) -> usize {
        self.capacity_per_client
    }

    pub fn len(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn client_len(&self, client_id: usize) -> usize {
        self.queues.get(&client_id).map_or(0, VecDeque::len)
    }

    /// Every stored pair, by ascending client id and oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &FeaturePair> {
        self.queues.values().flatten()
    }

    /// Appends to `client_id`'s queue. The whole batch is checked before
    /// anything is stored.
    pub fn ingest_pairs(&mut self, client_id: usize, pairs: &[FeaturePair]) -> Result<()> {
        for p in pairs {
            if p.s_in.len() != self.dim_in || p.s_out.len() != self.dim_out {
                return Err(Error::validation(format!(
                    "feature pair from client {client_id} has widths ({}, {}), store expects ({}, {})",
                    p.s_in.len(),
                    p.s_out.len(),
                    self.dim_in,
                    self.dim_out
                )));
            }
        }
        if self.capacity_per_client == 0 {
            return Ok(());
        }
        let queue = self.queues.entry(client_id).or_default();
        for p in pairs {
            if queue.len() == self.capacity_per_client {
                queue.pop_front();
            }
            queue.push_back(p.clone());
        }
        Ok(())
    }

    /// Uniform sample without replacement over all queues. Asking for
    /// more than is stored returns everything in shuffled order; an empty
    /// store yields an empty sample.
    pub fn sample<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Vec<FeaturePair> {
        let all: Vec<&FeaturePair> = self.iter().collect();
        let amount = size.min(all.len());
        if amount == 0 {
            return Vec::new();
        }
        index::sample(rng, all.len(), amount)
            .into_iter()
            .map(|i| all[i].clone())
            .collect()
    }
}

pub fn server_ingest<T>(store: &mut FeatureStore, update: &ClientUpdate<T>) -> Result<()> {
    store.ingest_pairs(update.client_id, &update.pairs)
}

pub fn sample_features<R: Rng + ?Sized>(store: &FeatureStore, size: usize, rng: &mut R) -> Vec<FeaturePair> {
    store.sample(size, rng)
}

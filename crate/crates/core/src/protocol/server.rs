use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate_shells_with, Aggregation};
use super::client::{client_round, Client, ClientSettings};
use super::messages::{ServerBroadcast, Shells};
use super::store::{server_ingest, FeatureStore};
use super::RunMode;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{accuracy, ArchSpec, SplitModel};
use crate::optim::AdamConfig;
use crate::resolve::Resolver;
use crate::rng::{self, tag};

/// Constant learning rate with an optional one-time step drop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    /// `(round, rate)`: from `round` on, train with `rate`.
    pub drop: Option<(usize, f64)>,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self { base, drop: None }
    }

    pub fn at(&self, round: usize) -> f64 {
        match self.drop {
            Some((r, rate)) if round >= r => rate,
            _ => self.base,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Evaluation {
    /// Every client is scored on one shared held-out test set.
    #[default]
    SharedTest,
    /// Each client holds back `fraction` of its own shard for scoring.
    LocalHoldout { fraction: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationConfig {
    pub mode: RunMode,
    pub seed: u64,
    pub inner_epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub resolver: Resolver,
    pub sample_size: usize,
    pub upload_cap: usize,
    pub store_capacity: usize,
    pub exclude_self: bool,
    pub aggregation: Aggregation,
    pub learning_rate: LrSchedule,
    pub adam: AdamConfig,
    pub evaluation: Evaluation,
    /// Wall-clock time is written as 0 unless this is set, so that
    /// outputs stay a pure function of config and seed.
    pub record_elapsed: bool,
    /// Worker threads for client parallelism; `None` uses rayon's default.
    pub threads: Option<usize>,
}

impl FederationConfig {
    pub fn new(mode: RunMode, seed: u64) -> Self {
        Self {
            mode,
            seed,
            inner_epochs: 1,
            batch_size: 32,
            lambda: crate::resolve::DEFAULT_LAMBDA,
            resolver: Resolver::Simplified,
            sample_size: 512,
            upload_cap: 256,
            store_capacity: 1024,
            exclude_self: false,
            aggregation: Aggregation::Uniform,
            learning_rate: LrSchedule::constant(1e-3),
            adam: AdamConfig::default(),
            evaluation: Evaluation::SharedTest,
            record_elapsed: false,
            threads: None,
        }
    }
}

/// Server-side state carried between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundState {
    pub round: usize,
    pub store: FeatureStore,
    /// Latest aggregate; `None` before the first aggregation.
    pub shells: Option<Shells<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub per_client_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub mean_local_loss: f64,
    pub mean_in_loss: Option<f64>,
    pub elapsed_seconds: f64,
}

/// Accuracy of `model` over `data`, scored in fixed-size chunks.
pub fn evaluate(model: &SplitModel<f32>, data: &Dataset) -> Result<f64> {
    const CHUNK: usize = 512;
    let n = data.len();
    let mut hits = 0.0;
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(CHUNK) {
        let (x, y) = data.batch(chunk)?;
        let logits = model.forward_full(&x)?.logits;
        hits += accuracy(&logits, &y)? * chunk.len() as f64;
    }
    Ok(hits / n as f64)
}

/// The whole simulated federation: server state plus every client.
pub struct Federation {
    config: FederationConfig,
    train: Dataset,
    eval_sets: Vec<Arc<Dataset>>,
    clients: Vec<Client>,
    state: RoundState,
    pool: Option<rayon::ThreadPool>,
}

impl Federation {
    /// `archs[k]` is client k's architecture and `shards[k]` its training
    /// indices into `train`. `test` is required for shared-test scoring.
    pub fn new(
        config: FederationConfig,
        train: Dataset,
        test: Option<Dataset>,
        shards: Vec<Vec<usize>>,
        archs: &[ArchSpec],
    ) -> Result<Self> {
        if shards.is_empty() || shards.len() != archs.len() {
            return Err(Error::validation(format!(
                "{} shards for {} client architectures",
                shards.len(),
                archs.len()
            )));
        }
        if config.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        let (dim_in, dim_out) = (archs[0].feature_dim_in, archs[0].feature_dim_out);
        for a in archs {
            if a.shell_shapes() != archs[0].shell_shapes()
                || (a.feature_dim_in, a.feature_dim_out) != (dim_in, dim_out)
            {
                return Err(Error::validation(format!(
                    "variant {} does not share the extractor/classifier shapes of variant {}",
                    a.variant, archs[0].variant
                )));
            }
        }
        if config.mode == RunMode::Fedavg && archs.iter().any(|a| a.param_specs() != archs[0].param_specs()) {
            return Err(Error::validation("fedavg needs identical client architectures"));
        }

        let mut train_shards = Vec::with_capacity(shards.len());
        let mut eval_sets = Vec::with_capacity(shards.len());
        match config.evaluation {
            Evaluation::SharedTest => {
                let test = Arc::new(test.ok_or_else(|| Error::validation("shared-test evaluation needs a test set"))?);
                for s in shards {
                    train_shards.push(s);
                    eval_sets.push(test.clone());
                }
            }
            Evaluation::LocalHoldout { fraction } => {
                if !(fraction > 0.0 && fraction < 1.0) {
                    return Err(Error::validation(format!("holdout fraction must be in (0, 1), got {fraction}")));
                }
                for (k, mut s) in shards.into_iter().enumerate() {
                    if s.len() < 2 {
                        return Err(Error::validation(format!("client {k} has too few samples for a holdout split")));
                    }
                    s.shuffle(&mut rng::stream(config.seed, &[tag::HOLDOUT, k as u64]));
                    let n_eval = ((s.len() as f64 * fraction).round() as usize).clamp(1, s.len() - 1);
                    let mut held = s.split_off(s.len() - n_eval);
                    held.sort_unstable();
                    s.sort_unstable();
                    eval_sets.push(Arc::new(train.subset(&held)?));
                    train_shards.push(s);
                }
            }
        }

        let clients = archs
            .iter()
            .zip(train_shards)
            .enumerate()
            .map(|(k, (arch, shard))| {
                if shard.iter().any(|&i| i >= train.len()) {
                    return Err(Error::validation(format!("client {k} shard indexes past the training set")));
                }
                Ok(Client::new(k, SplitModel::build(arch, config.seed), shard, config.adam))
            })
            .collect::<Result<Vec<_>>>()?;

        let pool = match config.threads {
            Some(n) => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            ),
            None => None,
        };
        Ok(Self {
            state: RoundState {
                round: 0,
                store: FeatureStore::new(config.store_capacity, dim_in, dim_out),
                shells: None,
            },
            config,
            train,
            eval_sets,
            clients,
            pool,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    pub fn clients_mut(&mut self) -> &mut [Client] {
        &mut self.clients
    }

    pub fn state(&self) -> &RoundState {
        &self.state
    }

    /// The broadcast the next round would send.
    pub fn broadcast(&self) -> ServerBroadcast {
        let round = self.state.round;
        let sample = self.state.store.sample(
            self.config.sample_size,
            &mut rng::stream(self.config.seed, &[tag::SAMPLE, round as u64]),
        );
        ServerBroadcast {
            shells: self.state.shells.clone(),
            sample,
            round,
        }
    }

    fn settings(&self) -> ClientSettings {
        let c = &self.config;
        ClientSettings {
            mode: c.mode,
            inner_epochs: c.inner_epochs,
            batch_size: c.batch_size,
            lambda: c.lambda,
            resolver: c.resolver,
            upload_cap: if c.mode.uses_in_training() { c.upload_cap } else { 0 },
            exclude_self: c.exclude_self,
            learning_rate: c.learning_rate.at(self.state.round),
            seed: c.seed,
        }
    }

    fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    /// Broadcast, train every client, ingest, aggregate, score.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let start = Instant::now();
        let broadcast = self.broadcast();
        let settings = self.settings();
        let mut clients = std::mem::take(&mut self.clients);
        let train = &self.train;
        let updates: Vec<Result<_>> = self.install(|| {
            clients
                .par_iter_mut()
                .map(|c| {
                    client_round(c, &broadcast, train, &settings).map_err(|e| Error::Client {
                        client: c.id,
                        source: Box::new(e),
                    })
                })
                .collect()
        });
        self.clients = clients;
        let updates = updates.into_iter().collect::<Result<Vec<_>>>()?;

        for u in &updates {
            server_ingest(&mut self.state.store, u)?;
        }
        if self.config.mode.installs_broadcast() {
            self.state.shells = Some(aggregate_shells_with(&updates, self.config.aggregation)?);
        }

        let eval_sets = &self.eval_sets;
        let clients = &self.clients;
        let per_client_accuracy = self.install(|| {
            clients
                .par_iter()
                .zip(eval_sets)
                .map(|(c, data)| evaluate(&c.model, data))
                .collect::<Result<Vec<_>>>()
        })?;

        let k = updates.len() as f64;
        let in_losses: Vec<f64> = updates.iter().filter_map(|u| u.in_loss).map(f64::from).collect();
        let metrics = RoundMetrics {
            round: self.state.round,
            mean_accuracy: per_client_accuracy.iter().sum::<f64>() / k,
            per_client_accuracy,
            mean_local_loss: updates.iter().map(|u| f64::from(u.local_loss)).sum::<f64>() / k,
            mean_in_loss: (!in_losses.is_empty()).then(|| in_losses.iter().sum::<f64>() / in_losses.len() as f64),
            elapsed_seconds: if self.config.record_elapsed {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        self.state.round += 1;
        Ok(metrics)
    }
}

//! Round-level FedIN protocol: what clients upload, what the server keeps
//! and broadcasts, and how each client trains inside a round.

mod aggregate;
mod client;
mod messages;
mod server;
mod store;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use aggregate::{aggregate_shells, aggregate_shells_with, Aggregation};
pub use client::{client_in_step, client_local_step, client_round, Client, ClientSettings};
pub use messages::{ClientUpdate, FeaturePair, ServerBroadcast, Shells};
pub use server::{evaluate, Evaluation, Federation, FederationConfig, LrSchedule, RoundMetrics, RoundState};
pub use store::{sample_features, server_ingest, FeatureStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Fedin,
    /// Local step over the whole model, then a separate IN step on the
    /// intermediate layers.
    FedinIgnoreDivergence,
    /// Shells are never overwritten by the broadcast.
    FedinNoAggregation,
    FedinNoIn,
    Fedavg,
}

impl RunMode {
    pub const ALL: [RunMode; 5] = [
        RunMode::Fedin,
        RunMode::FedinIgnoreDivergence,
        RunMode::FedinNoAggregation,
        RunMode::FedinNoIn,
        RunMode::Fedavg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RunMode::Fedin => "fedin",
            RunMode::FedinIgnoreDivergence => "fedin_ignore_divergence",
            RunMode::FedinNoAggregation => "fedin_no_aggregation",
            RunMode::FedinNoIn => "fedin_no_in",
            RunMode::Fedavg => "fedavg",
        }
    }

    /// Whether clients upload feature pairs and train on the broadcast sample.
    pub fn uses_in_training(self) -> bool {
        matches!(
            self,
            RunMode::Fedin | RunMode::FedinIgnoreDivergence | RunMode::FedinNoAggregation
        )
    }

    /// Whether broadcast weights overwrite the client's own.
    pub fn installs_broadcast(self) -> bool {
        self != RunMode::FedinNoAggregation
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        RunMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = RunMode::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown mode {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelKind, Variant};
use crate::optim::AdamConfig;
use crate::partition::PartitionKind;
use crate::protocol::{Aggregation, Evaluation, FederationConfig, LrSchedule, RunMode};
use crate::resolve::{Resolver, DEFAULT_LAMBDA};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Gaussian blobs; see [`crate::data::synth_blobs`].
    Synth {
        #[serde(default = "defaults::n_train")]
        n_train: usize,
        #[serde(default = "defaults::n_test")]
        n_test: usize,
        #[serde(default = "defaults::num_classes")]
        num_classes: usize,
        #[serde(default = "defaults::dim")]
        dim: usize,
        #[serde(default = "defaults::spread")]
        spread: f64,
        /// Seed for the data itself; defaults to the experiment seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// IDX image/label files. Relative paths resolve against the config
    /// file's directory.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub kind: PartitionKind,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    /// Defaults to a stream derived from the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            kind: PartitionKind::Dirichlet,
            alpha: defaults::alpha(),
            seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDrop {
    pub round: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: RunMode,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default = "defaults::num_clients")]
    pub num_clients: usize,
    #[serde(default = "defaults::num_rounds")]
    pub num_rounds: usize,
    #[serde(default = "defaults::inner_epochs")]
    pub inner_epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub resolver: Resolver,
    #[serde(default = "defaults::sample_size")]
    pub sample_size: usize,
    #[serde(default = "defaults::upload_cap")]
    pub upload_cap: usize,
    #[serde(default = "defaults::store_capacity")]
    pub store_capacity: usize,
    #[serde(default)]
    pub exclude_self: bool,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_drop: Option<LrDrop>,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    /// Variant of client k at index k; defaults to the A,A,B,C,C,D,D,E,E,E
    /// pattern, cycled when there are not ten clients.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant_assignment: Option<Vec<Variant>>,
    #[serde(default)]
    pub model: ModelKind,
    #[serde(default)]
    pub evaluation: Evaluation,
    #[serde(default)]
    pub record_elapsed: bool,
}

mod defaults {
    pub fn n_train() -> usize {
        5000
    }
    pub fn n_test() -> usize {
        1000
    }
    pub fn num_classes() -> usize {
        10
    }
    pub fn dim() -> usize {
        32
    }
    pub fn spread() -> f64 {
        0.25
    }
    pub fn alpha() -> f64 {
        0.5
    }
    pub fn num_clients() -> usize {
        10
    }
    pub fn num_rounds() -> usize {
        60
    }
    pub fn inner_epochs() -> usize {
        5
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn lambda() -> f64 {
        super::DEFAULT_LAMBDA
    }
    pub fn sample_size() -> usize {
        512
    }
    pub fn upload_cap() -> usize {
        256
    }
    pub fn store_capacity() -> usize {
        1024
    }
    pub fn learning_rate() -> f64 {
        1e-3
    }
}

pub const DEFAULT_VARIANTS: [Variant; 10] = [
    Variant::A,
    Variant::A,
    Variant::B,
    Variant::C,
    Variant::C,
    Variant::D,
    Variant::D,
    Variant::E,
    Variant::E,
    Variant::E,
];

impl ExperimentConfig {
    /// All defaults around the two required keys.
    pub fn new(mode: RunMode, dataset: DatasetConfig) -> Self {
        serde_json::from_value(serde_json::json!({ "mode": mode, "dataset": dataset }))
            .expect("defaults always deserialize")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_rounds == 0 {
            return bad("num_rounds must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.num_clients == 0 {
            return bad("num_clients must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        let rate_ok = |r: f64| r > 0.0 && r.is_finite();
        if !rate_ok(self.learning_rate) || self.lr_drop.is_some_and(|d| !rate_ok(d.learning_rate)) {
            return bad("learning rates must be positive and finite".into());
        }
        if let Some(v) = &self.variant_assignment {
            if v.len() != self.num_clients {
                return bad(format!(
                    "variant_assignment lists {} clients but num_clients is {}",
                    v.len(),
                    self.num_clients
                ));
            }
        }
        if self.partition.kind == PartitionKind::Dirichlet && !(self.partition.alpha > 0.0 && self.partition.alpha.is_finite()) {
            return bad(format!("partition alpha must be positive, got {}", self.partition.alpha));
        }
        Ok(())
    }

    /// Client k's variant. FedAvg always uses variant A throughout.
    pub fn variants(&self) -> Vec<Variant> {
        if self.mode == RunMode::Fedavg {
            return vec![Variant::A; self.num_clients];
        }
        match &self.variant_assignment {
            Some(v) => v.clone(),
            None => DEFAULT_VARIANTS.iter().copied().cycle().take(self.num_clients).collect(),
        }
    }

    pub fn partition_seed(&self) -> u64 {
        self.partition
            .seed
            .unwrap_or_else(|| rng::derive_seed(self.seed, &[tag::PARTITION]))
    }

    pub fn federation(&self, threads: Option<usize>) -> FederationConfig {
        FederationConfig {
            mode: self.mode,
            seed: self.seed,
            inner_epochs: self.inner_epochs,
            batch_size: self.batch_size,
            lambda: self.lambda,
            resolver: self.resolver,
            sample_size: self.sample_size,
            upload_cap: self.upload_cap,
            store_capacity: self.store_capacity,
            exclude_self: self.exclude_self,
            aggregation: self.aggregation,
            learning_rate: LrSchedule {
                base: self.learning_rate,
                drop: self.lr_drop.map(|d| (d.round, d.learning_rate)),
            },
            adam: self.adam,
            evaluation: self.evaluation,
            record_elapsed: self.record_elapsed,
            threads,
        }
    }

    /// Rewrites relative IDX paths against `base`.
    fn resolve_paths(&mut self, base: &Path) {
        if let DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } = &mut self.dataset
        {
            for p in [Some(train_images), Some(train_labels), test_images.as_mut(), test_labels.as_mut()]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let file_err = |message: String| Error::File {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
    let mut cfg = parse_config_str(&text).map_err(|e| match e {
        Error::Config(m) => file_err(m),
        other => other,
    })?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"mode": "fedin", "dataset": {"kind": "synth"}}"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        assert_eq!(cfg.lambda, 2.0);
        assert_eq!(cfg.sample_size, 512);
        assert_eq!(cfg.store_capacity, 1024);
        assert_eq!(cfg.num_clients, 10);
        assert_eq!(cfg.variants(), DEFAULT_VARIANTS.to_vec());
        assert_eq!(cfg.resolver, Resolver::Simplified);
        assert_eq!(cfg, ExperimentConfig::new(RunMode::Fedin, cfg.dataset.clone()));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config_str(r#"{"mode": "fedin", "dataset": {"kind": "synth"}, "foo": 1}"#).unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
        let err = parse_config_str(r#"{"dataset": {"kind": "synth"}}"#).unwrap_err();
        assert!(err.to_string().contains("mode"), "{err}");
    }

    #[test]
    fn file_errors_carry_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"mode": 3}"#).unwrap();
        let err = parse_config(&path).unwrap_err();
        assert!(err.to_string().contains("bad.json"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            r#"{"mode": "fedin", "dataset": {"kind": "synth"}, "num_rounds": 0}"#,
            r#"{"mode": "fedin", "dataset": {"kind": "synth"}, "batch_size": 0}"#,
            r#"{"mode": "fedin", "dataset": {"kind": "synth"}, "num_clients": 2, "variant_assignment": ["A"]}"#,
            r#"{"mode": "nope", "dataset": {"kind": "synth"}}"#,
        ] {
            assert!(parse_config_str(text).is_err(), "{text}");
        }
    }

    #[test]
    fn fedavg_forces_variant_a() {
        let mut cfg = parse_config_str(MINIMAL).unwrap();
        cfg.mode = RunMode::Fedavg;
        assert!(cfg.variants().iter().all(|&v| v == Variant::A));
    }

    #[test]
    fn cycled_assignment() {
        let mut cfg = parse_config_str(MINIMAL).unwrap();
        cfg.num_clients = 12;
        let v = cfg.variants();
        assert_eq!(&v[10..], &[Variant::A, Variant::A]);
    }

    #[test]
    fn relative_idx_paths_follow_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"mode": "fedin", "dataset": {"kind": "idx", "train_images": "a", "train_labels": "/abs/b"}}"#,
        )
        .unwrap();
        let cfg = parse_config(&path).unwrap();
        let DatasetConfig::Idx { train_images, train_labels, .. } = cfg.dataset else { panic!() };
        assert_eq!(train_images, dir.path().join("a"));
        assert_eq!(train_labels, PathBuf::from("/abs/b"));
    }
}

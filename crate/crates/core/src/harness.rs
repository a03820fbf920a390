//! Experiment orchestration, metrics CSV and run comparison.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use crate::checkpoint::save_model;
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::data::{load_idx, synth_blobs, Dataset};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_difference_check, ProbeLoss};
use crate::grad::{GradientSet, Layout};
use crate::model::{ArchSpec, ModelKind, SplitModel, Variant};
use crate::partition::{partition, PartitionSpec};
use crate::protocol::{Evaluation, Federation, RoundMetrics};
use crate::resolve::{frobenius_inner, projection_oracle, resolve_analytic};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "FEDIN_THREADS";

/// Thread count from [`THREADS_ENV`], if set to a positive integer.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Training data plus the optional shared test set, shaped for the
/// configured model family.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>)> {
    let (train, test) = match &cfg.dataset {
        DatasetConfig::Synth {
            n_train,
            n_test,
            num_classes,
            dim,
            spread,
            seed,
        } => {
            let seed = seed.unwrap_or(cfg.seed);
            let train = synth_blobs(*n_train, *num_classes, *dim, *spread, seed)?;
            let test = synth_blobs(*n_test, *num_classes, *dim, *spread, rng::derive_seed(seed, &[tag::TEST_SET]))?;
            (train, Some(test))
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = load_idx(train_images, train_labels)?;
            let test = match (test_images, test_labels) {
                (Some(i), Some(l)) => Some(load_idx(i, l)?),
                (None, None) => None,
                _ => return Err(Error::Config("test_images and test_labels must be given together".into())),
            };
            (train, test)
        }
    };
    if cfg.evaluation == Evaluation::SharedTest && test.is_none() {
        return Err(Error::Config("shared_test evaluation needs test_images and test_labels".into()));
    }
    match cfg.model {
        ModelKind::Mlp { .. } => Ok((train.flattened(), test.map(|t| t.flattened()))),
        ModelKind::Conv { .. } => Ok((train, test)),
    }
}

pub fn build_federation(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Federation> {
    cfg.validate()?;
    let (train, test) = load_datasets(cfg)?;
    let spec = PartitionSpec {
        kind: cfg.partition.kind,
        alpha: cfg.partition.alpha,
        num_clients: cfg.num_clients,
        seed: cfg.partition_seed(),
    };
    let shards = partition(&train, &spec)?;
    let archs = cfg
        .variants()
        .into_iter()
        .map(|v| ArchSpec::for_kind(&cfg.model, v, train.sample_shape(), train.num_classes()))
        .collect::<Result<Vec<_>>>()?;
    Federation::new(cfg.federation(threads), train, test, shards, &archs)
}

/// Header of the per-round metrics CSV for `k` clients.
pub fn csv_header(k: usize) -> Vec<String> {
    let mut h: Vec<String> = ["round", "mean_accuracy", "mean_local_loss", "mean_in_loss", "elapsed_seconds"]
        .map(String::from)
        .into();
    h.extend((0..k).map(|i| format!("acc_c{i}")));
    h
}

/// Appends one flushed row per round, so an aborted run leaves a valid
/// prefix behind.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
    clients: usize,
}

impl MetricsWriter<File> {
    pub fn create(path: impl AsRef<Path>, clients: usize) -> Result<Self> {
        let file = File::create(path.as_ref()).map_err(|e| Error::File {
            path: path.as_ref().to_path_buf(),
            message: e.to_string(),
        })?;
        Self::new(file, clients)
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(w: W, clients: usize) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(csv_header(clients)).map_err(csv_error)?;
        inner.flush()?;
        Ok(Self { inner, clients })
    }

    pub fn write(&mut self, m: &RoundMetrics) -> Result<()> {
        if m.per_client_accuracy.len() != self.clients {
            return Err(Error::contract("metrics row has the wrong number of clients"));
        }
        let mut row = vec![
            m.round.to_string(),
            m.mean_accuracy.to_string(),
            m.mean_local_loss.to_string(),
            m.mean_in_loss.map(|v| v.to_string()).unwrap_or_default(),
            m.elapsed_seconds.to_string(),
        ];
        row.extend(m.per_client_accuracy.iter().map(f64::to_string));
        self.inner.write_record(&row).map_err(csv_error)?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::validation(format!("{other:?}")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub rounds: usize,
    pub final_mean_accuracy: f64,
    pub best_round: usize,
    pub best_mean_accuracy: f64,
    /// Mean accuracy averaged over the last (up to) ten rounds.
    pub last10_mean_accuracy: f64,
}

impl ExperimentSummary {
    pub fn from_metrics(metrics: &[RoundMetrics]) -> Option<Self> {
        let last = metrics.last()?;
        let best = metrics
            .iter()
            .fold(&metrics[0], |b, m| if m.mean_accuracy > b.mean_accuracy { m } else { b });
        let tail = &metrics[metrics.len().saturating_sub(10)..];
        Some(Self {
            rounds: metrics.len(),
            final_mean_accuracy: last.mean_accuracy,
            best_round: best.round,
            best_mean_accuracy: best.mean_accuracy,
            last10_mean_accuracy: tail.iter().map(|m| m.mean_accuracy).sum::<f64>() / tail.len() as f64,
        })
    }
}

/// Directory holding the final per-client checkpoints of a run writing
/// its metrics to `csv`.
pub fn checkpoint_dir(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    csv.with_file_name(format!("{stem}_checkpoints"))
}

/// Runs every round, streaming metrics to `out` when given, and writes
/// the final client models next to the CSV.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    threads: Option<usize>,
) -> Result<(Vec<RoundMetrics>, ExperimentSummary)> {
    let mut fed = build_federation(cfg, threads)?;
    let mut writer = out.map(|p| MetricsWriter::create(p, cfg.num_clients)).transpose()?;
    let mut metrics = Vec::with_capacity(cfg.num_rounds);
    for _ in 0..cfg.num_rounds {
        let m = fed.run_round()?;
        if let Some(w) = writer.as_mut() {
            w.write(&m)?;
        }
        metrics.push(m);
    }
    if let Some(p) = out {
        let dir = checkpoint_dir(p);
        std::fs::create_dir_all(&dir).map_err(|e| Error::File {
            path: dir.clone(),
            message: e.to_string(),
        })?;
        for c in fed.clients() {
            save_model(&c.model, dir.join(format!("client_{}.ckpt", c.id)))?;
        }
    }
    let summary = ExperimentSummary::from_metrics(&metrics).expect("num_rounds >= 1");
    Ok((metrics, summary))
}

/// One parsed metrics row: round number and mean accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub round: usize,
    pub mean_accuracy: f64,
}

pub fn read_metrics(text: &str) -> Result<Vec<CsvRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    let mut header_seen = false;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if !header_seen {
            if rec.get(0) != Some("round") || rec.get(1) != Some("mean_accuracy") {
                return Err(Error::Parse {
                    line,
                    message: "expected a header starting with round,mean_accuracy".into(),
                });
            }
            header_seen = true;
            continue;
        }
        let field = |i: usize, name: &str| {
            rec.get(i).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing {name} column"),
            })
        };
        let round = field(0, "round")?.trim().parse::<usize>().map_err(|e| Error::Parse {
            line,
            message: format!("round: {e}"),
        })?;
        let mean_accuracy = field(1, "mean_accuracy")?.trim().parse::<f64>().map_err(|e| Error::Parse {
            line,
            message: format!("mean_accuracy: {e}"),
        })?;
        rows.push(CsvRow { round, mean_accuracy });
    }
    if !header_seen {
        return Err(Error::Parse {
            line: 1,
            message: "empty metrics file".into(),
        });
    }
    Ok(rows)
}

pub fn read_metrics_file(path: impl AsRef<Path>) -> Result<Vec<CsvRow>> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::File {
        path: path.as_ref().to_path_buf(),
        message: e.to_string(),
    })?;
    read_metrics(&text).map_err(|e| Error::File {
        path: path.as_ref().to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    /// `(round, accuracy_b - accuracy_a)`.
    pub deltas: Vec<(usize, f64)>,
    pub last10_a: f64,
    pub last10_b: f64,
    /// `last10_b - last10_a`.
    pub last10_delta: f64,
}

impl Comparison {
    pub fn verdict(&self) -> &'static str {
        if self.last10_delta > 0.0 {
            "b is better"
        } else if self.last10_delta < 0.0 {
            "a is better"
        } else {
            "tie"
        }
    }
}

pub fn compare_rows(a: &[CsvRow], b: &[CsvRow]) -> Result<Comparison> {
    let rounds = |r: &[CsvRow]| r.iter().map(|x| x.round).collect::<Vec<_>>();
    if a.is_empty() || rounds(a) != rounds(b) {
        return Err(Error::validation(format!(
            "runs cover different rounds ({} vs {} rows)",
            a.len(),
            b.len()
        )));
    }
    let tail = |r: &[CsvRow]| {
        let t = &r[r.len().saturating_sub(10)..];
        t.iter().map(|x| x.mean_accuracy).sum::<f64>() / t.len() as f64
    };
    let (last10_a, last10_b) = (tail(a), tail(b));
    Ok(Comparison {
        deltas: a.iter().zip(b).map(|(x, y)| (x.round, y.mean_accuracy - x.mean_accuracy)).collect(),
        last10_a,
        last10_b,
        last10_delta: last10_b - last10_a,
    })
}

pub fn compare_runs(csv_a: impl AsRef<Path>, csv_b: impl AsRef<Path>) -> Result<Comparison> {
    compare_rows(&read_metrics_file(csv_a)?, &read_metrics_file(csv_b)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckResult {
    fn below(name: String, value: f64, threshold: f64) -> Self {
        Self {
            passed: value < threshold,
            name,
            value,
            threshold,
        }
    }
}

/// Small MLP probe used by the gradient checks: 6 inputs, width 8,
/// 3 classes, batch of 4.
fn probe_inputs(seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut r = rng::stream(seed, &[tag::SYNTH, 0xC4EC]);
    let x: Vec<f64> = (0..24).map(|_| r.random_range(-1.0..1.0)).collect();
    (Tensor::new(vec![4, 6], x).expect("fixed shape"), vec![0, 2, 1, 2])
}

/// Finite-difference checks for every variant in both precisions plus
/// the projection-oracle comparison on random pairs.
pub fn check_grads(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let (x, labels) = probe_inputs(seed);
    for v in Variant::ALL {
        let arch = ArchSpec::mlp(v, 6, 8, 3)?;
        let m32: SplitModel<f32> = SplitModel::build(&arch, seed);
        let m64: SplitModel<f64> = m32.cast();
        let e32 = finite_difference_check(&m32, &ProbeLoss::CrossEntropy, &x, &labels, 1e-6)?;
        out.push(CheckResult::below(format!("fd variant {v} f32"), e32, 1e-4));
        let e64 = finite_difference_check(&m64, &ProbeLoss::CrossEntropy, &x, &labels, 1e-6)?;
        out.push(CheckResult::below(format!("fd variant {v} f64"), e64, 1e-6));
    }

    let mut r = rng::stream(seed, &[tag::SYNTH, 0x0AC1E]);
    let mut worst = 0.0f64;
    let mut worst_feas = 0.0f64;
    for _ in 0..1000 {
        let dim = r.random_range(2..=512);
        let layout = std::sync::Arc::new(Layout::flat(crate::grad::Group::Intermediate, dim));
        let mut draw = || -> Result<GradientSet> {
            let v: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
            GradientSet::from_groups(layout.clone(), [Vec::new(), v, Vec::new()])
        };
        let (g_in, g_local) = (draw()?, draw()?);
        let z = resolve_analytic(&g_in, &g_local)?;
        let o = projection_oracle(&g_in, &g_local)?;
        worst = z.iter().zip(o.iter()).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        let scale = g_local.norm() * z.norm().max(1.0);
        worst_feas = worst_feas.max(-frobenius_inner(&z, &g_local)? / scale);
    }
    out.push(CheckResult::below("resolve vs projection oracle".into(), worst, 1e-6));
    out.push(CheckResult::below("resolve feasibility violation".into(), worst_feas, 1e-8));
    Ok(out)
}

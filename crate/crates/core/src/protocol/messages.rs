use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::checkpoint::{self, Record};
use crate::error::{Error, Result};
use crate::grad::Group;
use crate::model::{Param, SplitModel};
use crate::tensor::{Scalar, Tensor};

/// One captured `(s_in, s_out)` sample with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair {
    pub s_in: Vec<f32>,
    pub s_out: Vec<f32>,
    pub client_id: usize,
    pub round: usize,
}

/// Weights that travel between clients and server: always the
/// extractor and classifier, plus the intermediate layers when whole
/// models are averaged (FedAvg).
#[derive(Clone, Debug, PartialEq)]
pub struct Shells<T = f32> {
    pub extractor: Vec<Param<T>>,
    pub classifier: Vec<Param<T>>,
    pub intermediate: Option<Vec<Param<T>>>,
}

impl<T: Scalar> Shells<T> {
    pub fn from_model(model: &SplitModel<T>, with_intermediate: bool) -> Self {
        Self {
            extractor: model.params(Group::Extractor).to_vec(),
            classifier: model.params(Group::Classifier).to_vec(),
            intermediate: with_intermediate.then(|| model.params(Group::Intermediate).to_vec()),
        }
    }

    /// Overwrites the matching groups of `model`.
    pub fn install(&self, model: &mut SplitModel<T>) -> Result<()> {
        model.set_group(Group::Extractor, &self.extractor)?;
        model.set_group(Group::Classifier, &self.classifier)?;
        if let Some(inter) = &self.intermediate {
            model.set_group(Group::Intermediate, inter)?;
        }
        Ok(())
    }

    pub fn groups(&self) -> impl Iterator<Item = (Group, &[Param<T>])> {
        [
            (Group::Extractor, Some(self.extractor.as_slice())),
            (Group::Intermediate, self.intermediate.as_deref()),
            (Group::Classifier, Some(self.classifier.as_slice())),
        ]
        .into_iter()
        .filter_map(|(g, p)| p.map(|p| (g, p)))
    }

    /// `(name, shape)` of every tensor, in group order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.groups()
            .flat_map(|(_, ps)| ps.iter().map(|p| (p.name.clone(), p.tensor.shape().to_vec())))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate<T = f32> {
    pub client_id: usize,
    pub shells: Shells<T>,
    pub pairs: Vec<FeaturePair>,
    pub local_loss: f32,
    pub in_loss: Option<f32>,
    /// Local training samples, used only by sample-weighted aggregation.
    pub num_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerBroadcast {
    /// `None` in the initial round, before any aggregation.
    pub shells: Option<Shells<f32>>,
    pub sample: Vec<FeaturePair>,
    pub round: usize,
}

// Integers ride in f32 records; 2^24 is the largest contiguous range.
const MAX_EXACT: usize = 1 << 24;

fn int_record(name: &str, v: usize) -> Result<Record> {
    if v > MAX_EXACT {
        return Err(Error::validation(format!("{name} = {v} is too large to serialize")));
    }
    Ok((name.to_owned(), Tensor::scalar(v as f32)))
}

fn float_record(name: &str, v: f32) -> Record {
    (name.to_owned(), Tensor::scalar(v))
}

fn pair_records(pairs: &[FeaturePair]) -> Result<Vec<Record>> {
    let Some(first) = pairs.first() else {
        return Ok(Vec::new());
    };
    let (din, dout) = (first.s_in.len(), first.s_out.len());
    if pairs.iter().any(|p| p.s_in.len() != din || p.s_out.len() != dout) {
        return Err(Error::validation("feature pairs have inconsistent widths"));
    }
    let mut origin = Vec::with_capacity(pairs.len() * 2);
    for p in pairs {
        if p.client_id > MAX_EXACT || p.round > MAX_EXACT {
            return Err(Error::validation("feature pair provenance too large to serialize"));
        }
        origin.extend([p.client_id as f32, p.round as f32]);
    }
    let n = pairs.len();
    Ok(vec![
        (
            "pairs.s_in".into(),
            Tensor::new(vec![n, din], pairs.iter().flat_map(|p| p.s_in.iter().copied()).collect())?,
        ),
        (
            "pairs.s_out".into(),
            Tensor::new(vec![n, dout], pairs.iter().flat_map(|p| p.s_out.iter().copied()).collect())?,
        ),
        ("pairs.origin".into(), Tensor::new(vec![n, 2], origin)?),
    ])
}

fn shell_records(shells: &Shells<f32>) -> Vec<Record> {
    shells
        .groups()
        .flat_map(|(_, ps)| ps.iter().map(|p| (p.name.clone(), p.tensor.clone())))
        .collect()
}

#[derive(Default)]
struct Parsed {
    meta: Vec<(String, f32)>,
    groups: [Vec<Param<f32>>; 3],
    s_in: Option<Tensor<f32>>,
    s_out: Option<Tensor<f32>>,
    origin: Option<Tensor<f32>>,
}

impl Parsed {
    fn from_records(records: Vec<Record>) -> Result<Self> {
        let mut p = Parsed::default();
        for (name, tensor) in records {
            if let Some(key) = name.strip_prefix("meta.") {
                if tensor.len() != 1 {
                    return Err(Error::contract(format!("{name} must be a scalar record")));
                }
                p.meta.push((key.to_owned(), tensor.values()[0]));
            } else if let Some(g) = Group::from_prefix(&name) {
                p.groups[g.index()].push(Param { name, tensor });
            } else {
                match name.as_str() {
                    "pairs.s_in" => p.s_in = Some(tensor),
                    "pairs.s_out" => p.s_out = Some(tensor),
                    "pairs.origin" => p.origin = Some(tensor),
                    _ => return Err(Error::contract(format!("unexpected record {name}"))),
                }
            }
        }
        Ok(p)
    }

    fn meta(&self, key: &str) -> Option<f32> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    fn required(&self, key: &str) -> Result<f32> {
        self.meta(key)
            .ok_or_else(|| Error::contract(format!("missing record meta.{key}")))
    }

    fn shells(&mut self) -> Option<Shells<f32>> {
        let [e, i, c] = std::mem::take(&mut self.groups);
        if e.is_empty() && c.is_empty() {
            return None;
        }
        Some(Shells {
            extractor: e,
            classifier: c,
            intermediate: (!i.is_empty()).then_some(i),
        })
    }

    fn pairs(&mut self) -> Result<Vec<FeaturePair>> {
        match (self.s_in.take(), self.s_out.take(), self.origin.take()) {
            (None, None, None) => Ok(Vec::new()),
            (Some(si), Some(so), Some(or)) => {
                let n = si.rows();
                if so.rows() != n || or.shape() != [n, 2] {
                    return Err(Error::contract("pair records disagree on the pair count"));
                }
                Ok((0..n)
                    .map(|i| FeaturePair {
                        s_in: si.row(i).to_vec(),
                        s_out: so.row(i).to_vec(),
                        client_id: or.row(i)[0] as usize,
                        round: or.row(i)[1] as usize,
                    })
                    .collect())
            }
            _ => Err(Error::contract("incomplete feature pair records")),
        }
    }
}

impl ClientUpdate<f32> {
    pub fn to_records(&self) -> Result<Vec<Record>> {
        let mut out = vec![
            int_record("meta.client_id", self.client_id)?,
            int_record("meta.num_samples", self.num_samples)?,
            float_record("meta.local_loss", self.local_loss),
        ];
        if let Some(l) = self.in_loss {
            out.push(float_record("meta.in_loss", l));
        }
        out.extend(shell_records(&self.shells));
        out.extend(pair_records(&self.pairs)?);
        Ok(out)
    }

    pub fn from_records(records: Vec<Record>) -> Result<Self> {
        let mut p = Parsed::from_records(records)?;
        let shells = p
            .shells()
            .ok_or_else(|| Error::contract("client update carries no shell weights"))?;
        Ok(Self {
            client_id: p.required("client_id")? as usize,
            num_samples: p.required("num_samples")? as usize,
            local_loss: p.required("local_loss")?,
            in_loss: p.meta("in_loss"),
            pairs: p.pairs()?,
            shells,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_records(path.as_ref(), &self.to_records()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_records(load_records(path.as_ref())?)
    }
}

impl ServerBroadcast {
    pub fn to_records(&self) -> Result<Vec<Record>> {
        let mut out = vec![int_record("meta.round", self.round)?];
        if let Some(s) = &self.shells {
            out.extend(shell_records(s));
        }
        out.extend(pair_records(&self.sample)?);
        Ok(out)
    }

    pub fn from_records(records: Vec<Record>) -> Result<Self> {
        let mut p = Parsed::from_records(records)?;
        Ok(Self {
            round: p.required("round")? as usize,
            shells: p.shells(),
            sample: p.pairs()?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_records(path.as_ref(), &self.to_records()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_records(load_records(path.as_ref())?)
    }
}

fn save_records(path: &Path, records: &[Record]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    checkpoint::write_records(BufWriter::new(file), records.iter().map(|(n, t)| (n.as_str(), t)))
}

fn load_records(path: &Path) -> Result<Vec<Record>> {
    let file = File::open(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    checkpoint::read_records(BufReader::new(file))
}

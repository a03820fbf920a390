use serde::{Deserialize, Serialize};

use super::messages::{ClientUpdate, Shells};
use crate::error::{Error, Result};
use crate::model::Param;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Plain mean over clients.
    #[default]
    Uniform,
    /// Mean weighted by each client's sample count.
    SampleWeighted,
}

/// Unweighted elementwise mean of the shells, summed in ascending
/// client id order.
pub fn aggregate_shells<T: Scalar>(updates: &[ClientUpdate<T>]) -> Result<Shells<T>> {
    aggregate_shells_with(updates, Aggregation::Uniform)
}

pub fn aggregate_shells_with<T: Scalar>(updates: &[ClientUpdate<T>], how: Aggregation) -> Result<Shells<T>> {
    if updates.is_empty() {
        return Err(Error::contract("aggregation needs at least one update"));
    }
    let mut ordered: Vec<&ClientUpdate<T>> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    if ordered.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::contract("duplicate client id in aggregation"));
    }
    let weights: Vec<T> = match how {
        Aggregation::Uniform => vec![T::one(); ordered.len()],
        Aggregation::SampleWeighted => ordered.iter().map(|u| T::from_f64(u.num_samples as f64)).collect(),
    };
    let total = weights.iter().fold(T::zero(), |a, &w| a + w);
    if !(total > T::zero()) {
        return Err(Error::contract("aggregation weights sum to zero"));
    }

    let with_inter = ordered[0].shells.intermediate.is_some();
    if ordered.iter().any(|u| u.shells.intermediate.is_some() != with_inter) {
        return Err(Error::contract("updates disagree on whether intermediate weights are shared"));
    }
    let mean = |pick: &dyn Fn(&Shells<T>) -> &[Param<T>]| -> Result<Vec<Param<T>>> {
        let first = pick(&ordered[0].shells);
        let mut out = Vec::with_capacity(first.len());
        for (i, template) in first.iter().enumerate() {
            let mut acc = vec![T::zero(); template.tensor.len()];
            for (u, &w) in ordered.iter().zip(&weights) {
                let p = pick(&u.shells).get(i).filter(|p| p.name == template.name).ok_or_else(|| {
                    Error::contract(format!("client {} lacks tensor {}", u.client_id, template.name))
                })?;
                if p.tensor.shape() != template.tensor.shape() {
                    return Err(Error::contract(format!(
                        "shape mismatch for {}: {:?} vs {:?} (client {})",
                        template.name,
                        template.tensor.shape(),
                        p.tensor.shape(),
                        u.client_id
                    )));
                }
                for (a, &v) in acc.iter_mut().zip(p.tensor.values()) {
                    *a = *a + w * v;
                }
            }
            acc.iter_mut().for_each(|a| *a = *a / total);
            out.push(Param {
                name: template.name.clone(),
                tensor: Tensor::new(template.tensor.shape().to_vec(), acc)?,
            });
        }
        if ordered.iter().any(|u| pick(&u.shells).len() != first.len()) {
            return Err(Error::contract("clients carry different numbers of shell tensors"));
        }
        Ok(out)
    };
    Ok(Shells {
        extractor: mean(&|s| &s.extractor)?,
        classifier: mean(&|s| &s.classifier)?,
        intermediate: if with_inter {
            Some(mean(&|s| s.intermediate.as_deref().unwrap_or(&[]))?)
        } else {
            None
        },
    })
}

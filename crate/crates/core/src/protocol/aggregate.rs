use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ProtocolError, WorkingCopy};
use crate::autodiff::Real;
use crate::models::{mean, weighted_mean, BodyParams, HeadParams, ParamGroup, TailParams};

/// How body tensors left untouched by some clients are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyAverage {
    /// Mean over all participants; a client that did not update a tensor
    /// contributes its round-start value.
    #[default]
    RoundStart,
    /// Mean over the clients that updated the tensor; unchanged if none did.
    UpdatersOnly,
}

/// End-of-round body aggregation, applied tensor by tensor.
pub fn average_body(
    start: &BodyParams,
    updates: &BTreeMap<usize, WorkingCopy>,
    participants: &[usize],
    rule: BodyAverage,
) -> Result<BodyParams, ProtocolError> {
    if participants.is_empty() {
        return Ok(start.clone());
    }
    let mut records = Vec::with_capacity(participants.len());
    for &c in participants {
        let rec = updates.get(&c).ok_or(ProtocolError::MissingRecord(c))?;
        if !rec.body.same_layout(start) || rec.touched.len() != start.len() {
            return Err(ProtocolError::Divergent(format!("client {c} body layout differs from the server body")));
        }
        records.push(rec);
    }
    let mut out = start.clone();
    let starts = start.tensors();
    for (t, dst) in out.tensors_mut().into_iter().enumerate() {
        let contributors: Vec<&[Real]> = match rule {
            BodyAverage::RoundStart => records
                .iter()
                .map(|r| if r.touched[t] { r.body.tensors()[t].data() } else { starts[t].data() })
                .collect(),
            BodyAverage::UpdatersOnly => {
                records.iter().filter(|r| r.touched[t]).map(|r| r.body.tensors()[t].data()).collect()
            }
        };
        if contributors.is_empty() {
            continue;
        }
        let n = contributors.len() as Real;
        for (i, d) in dst.data_mut().iter_mut().enumerate() {
            let sum: Real = contributors.iter().map(|c| c[i]).sum();
            *d = sum / n;
        }
    }
    Ok(out)
}

/// Unweighted mean of all heads and of all tails.
pub fn unify_heads_tails(heads: &[&HeadParams], tails: &[&TailParams]) -> Result<(HeadParams, TailParams), ProtocolError> {
    if heads.is_empty() || heads.len() != tails.len() {
        return Err(ProtocolError::Divergent(format!("{} heads and {} tails", heads.len(), tails.len())));
    }
    if let Some(i) = heads.iter().position(|h| !h.same_layout(heads[0])) {
        return Err(ProtocolError::Divergent(format!("head of client {i} has a different layout")));
    }
    if let Some(i) = tails.iter().position(|t| !t.same_layout(tails[0])) {
        return Err(ProtocolError::Divergent(format!("tail of client {i} has a different layout")));
    }
    Ok((mean(heads), mean(tails)))
}

/// Sample-count weighted average, the classical federated-averaging rule.
pub fn fedavg<P: ParamGroup>(models: &[&P], samples: &[usize]) -> Result<P, ProtocolError> {
    if models.is_empty() || models.len() != samples.len() || samples.iter().sum::<usize>() == 0 {
        return Err(ProtocolError::Divergent("federated averaging needs matching, non-empty inputs".into()));
    }
    if models.iter().any(|m| !m.same_layout(models[0])) {
        return Err(ProtocolError::Divergent("model layouts differ".into()));
    }
    let weights: Vec<f64> = samples.iter().map(|&n| n as f64).collect();
    Ok(weighted_mean(models, &weights))
}

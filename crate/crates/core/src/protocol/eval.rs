use std::collections::HashMap;

use super::{ClientState, ProtocolError, ServerState, Settings, Variant};
use crate::autodiff::{Graph, Real, Tensor};
use crate::data::Dataset;
use crate::harness::balanced_accuracy;
use crate::models::{
    body_full_cls_forward, body_prefix_forward, head_forward, projection_forward, tail_forward, BodyBinding,
    ModelParams, ParamGroup,
};

const EVAL_CHUNK: usize = 200;

/// The stack a client would use at inference: its own, or its head and
/// tail around the server body.
pub fn client_model(client: &ClientState, server: &ServerState) -> ModelParams {
    client.own_model().unwrap_or_else(|| ModelParams {
        head: client.head.clone(),
        body: server.body.clone(),
        projection: server.projection.clone(),
        tail: client.tail.clone(),
    })
}

fn softmax_rows(logits: &Tensor) -> Vec<Real> {
    let k = logits.shape()[1];
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Predicted class per image, without noise. Sampling variants average the
/// softmax over blocks `1..=S` when `ensemble` is set and use block `S`
/// otherwise.
pub fn predict(s: &Settings, model: &ModelParams, images: &Tensor, ensemble: bool) -> Result<Vec<usize>, ProtocolError> {
    let cfg = &s.model;
    let n = images.shape().first().copied().unwrap_or(0);
    let k = cfg.classes;
    let depths: Vec<usize> = match s.variant {
        Variant::Svibs | Variant::Fesvibs if ensemble => (1..=cfg.sample_limit).collect(),
        Variant::Svibs | Variant::Fesvibs => vec![cfg.sample_limit],
        Variant::FedavgMono => vec![model.body.blocks.len()],
        Variant::Local | Variant::Slvit | Variant::Festa => vec![0],
    };
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        let chunk = images.narrow(0, start, len)?;
        let mut probs = vec![0.0 as Real; len * k];
        for &depth in &depths {
            let mut g = Graph::new();
            let x = g.constant(chunk.clone());
            let hv = model.head.bind(&mut g, false);
            let h = head_forward(&mut g, cfg, &hv, x)?;
            let feature = if depth == 0 {
                let blocks = model.body.blocks.len();
                let bv = model.body.bind(&mut g, BodyBinding { depth: blocks, with_cls: true, trainable: false, train_pos: false })?;
                body_full_cls_forward(&mut g, cfg, &bv, h)?
            } else {
                let bv = model.body.bind(&mut g, BodyBinding { depth, with_cls: false, trainable: false, train_pos: false })?;
                let z = body_prefix_forward(&mut g, cfg, &bv, h, depth)?;
                let pv = model.projection.bind(&mut g, false);
                projection_forward(&mut g, cfg, &pv, z)?
            };
            let tv = model.tail.bind(&mut g, false);
            let logits = tail_forward(&mut g, cfg, &tv, feature)?;
            for (p, q) in probs.iter_mut().zip(softmax_rows(g.value(logits))) {
                *p += q;
            }
        }
        out.extend(probs.chunks(k).map(|row| {
            (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        }));
        start += len;
    }
    Ok(out)
}

/// Balanced accuracy of every client's model on the shared test set.
/// Identical models are scored once.
pub fn evaluate_clients(
    s: &Settings,
    clients: &[ClientState],
    server: &ServerState,
    test: &Dataset,
    ensemble: bool,
) -> Result<Vec<f64>, ProtocolError> {
    let mut cache: HashMap<String, f64> = HashMap::new();
    let mut out = Vec::with_capacity(clients.len());
    for client in clients {
        let model = client_model(client, server);
        let key = model.checksum();
        let acc = match cache.get(&key) {
            Some(&a) => a,
            None => {
                let pred = predict(s, &model, test.images(), ensemble)?;
                let a = balanced_accuracy(test.labels(), &pred, test.classes())
                    .map_err(|e| ProtocolError::Config(e.to_string()))?;
                cache.insert(key, a);
                a
            }
        };
        out.push(acc);
    }
    Ok(out)
}

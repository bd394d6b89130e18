use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ProtocolError, Settings, Variant};
use crate::autodiff::{adam_step, AdamState, Graph, Tensor};
use crate::data::{Batch, Dataset};
use crate::models::{
    body_full_cls_forward, body_prefix_forward, head_forward, projection_forward, tail_forward, BodyBinding,
    BodyParams, HeadParams, ModelParams, ParamGroup, ProjectionParams, TailParams,
};
use crate::privacy::clip_and_noise_var;
use crate::transport::{Endpoint, ProtocolMessage, WireTensor};

/// Body and projection held by a client that trains without a server.
#[derive(Clone, Debug)]
pub struct OwnModel {
    pub body: BodyParams,
    pub projection: ProjectionParams,
    body_opt: AdamState,
    projection_opt: AdamState,
}

impl OwnModel {
    fn new(body: BodyParams, projection: ProjectionParams) -> Self {
        let body_opt = AdamState::new(body.tensors());
        let projection_opt = AdamState::new(projection.tensors());
        Self { body, projection, body_opt, projection_opt }
    }
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub head: HeadParams,
    pub tail: TailParams,
    head_opt: AdamState,
    tail_opt: AdamState,
    /// Present for the variants that train the whole stack locally.
    pub own: Option<OwnModel>,
    data: Arc<Dataset>,
    noise_rng: ChaCha8Rng,
    loss_sum: f64,
    loss_batches: usize,
}

/// Gradients computed in one step, taken before the optimizer update.
#[derive(Clone, Debug)]
pub struct ClientStepReport {
    pub loss: f64,
    pub sampled: Option<usize>,
    pub head_grads: Vec<Option<Tensor>>,
    pub tail_grads: Vec<Option<Tensor>>,
    /// Body then projection gradients, for locally trained stacks only.
    pub own_grads: Option<(Vec<Option<Tensor>>, Vec<Option<Tensor>>)>,
}

fn unexpected(expected: &'static str, msg: ProtocolMessage) -> ProtocolError {
    match msg {
        ProtocolMessage::Error { code, detail } => ProtocolError::Remote { code, detail },
        other => ProtocolError::OutOfOrder { expected, got: other.kind().to_string() },
    }
}

fn check_ids(
    what: &'static str,
    got: (u32, u32, u32),
    want: (u32, u32, u32),
) -> Result<(), ProtocolError> {
    if got != want {
        return Err(ProtocolError::OutOfOrder {
            expected: what,
            got: format!("{what} for (client, round, batch) {got:?} instead of {want:?}"),
        });
    }
    Ok(())
}

impl ClientState {
    pub fn new(id: usize, init: &ModelParams, data: Arc<Dataset>, variant: Variant, noise_seed: u64) -> Self {
        let own = matches!(variant, Variant::Local | Variant::FedavgMono)
            .then(|| OwnModel::new(init.body.clone(), init.projection.clone()));
        Self {
            id,
            head: init.head.clone(),
            tail: init.tail.clone(),
            head_opt: AdamState::new(init.head.tensors()),
            tail_opt: AdamState::new(init.tail.tensors()),
            own,
            data,
            noise_rng: ChaCha8Rng::seed_from_u64(noise_seed),
            loss_sum: 0.0,
            loss_batches: 0,
        }
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Mean batch loss since the last call, `None` if no batch ran.
    pub fn take_round_loss(&mut self) -> Option<f64> {
        let out = (self.loss_batches > 0).then(|| self.loss_sum / self.loss_batches as f64);
        self.loss_sum = 0.0;
        self.loss_batches = 0;
        out
    }

    fn record(&mut self, loss: f64) {
        self.loss_sum += loss;
        self.loss_batches += 1;
    }

    /// One staged exchange with the server: upload the smashed
    /// representation, receive the token, return its gradient, receive the
    /// head gradient, then update head and tail.
    pub fn split_step(
        &mut self,
        ep: &mut dyn Endpoint,
        s: &Settings,
        round: u32,
        batch_idx: u32,
        batch: &Batch,
    ) -> Result<ClientStepReport, ProtocolError> {
        let cfg = &s.model;
        let ids = (self.id as u32, round, batch_idx);
        let mut g = Graph::new();
        let x = g.constant(batch.images.clone());
        let hv = self.head.bind(&mut g, true);
        let h = head_forward(&mut g, cfg, &hv, x)?;
        let h_up = if s.privacy.enabled { clip_and_noise_var(&mut g, h, &s.privacy, &mut self.noise_rng)? } else { h };
        ep.send(ProtocolMessage::SmashedUpload {
            client: ids.0,
            round,
            batch: batch_idx,
            h: WireTensor::new(g.value(h_up).clone(), s.wire),
        })?;

        let (sampled, b) = match ep.recv()? {
            ProtocolMessage::PseudoTokenDown { client, round, batch, sampled, b } if s.variant.samples_blocks() => {
                check_ids("PseudoTokenDown", (client, round, batch), ids)?;
                (Some(sampled as usize), b)
            }
            ProtocolMessage::ClsTokenDown { client, round, batch, b } if !s.variant.samples_blocks() => {
                check_ids("ClsTokenDown", (client, round, batch), ids)?;
                (None, b)
            }
            other => return Err(unexpected("token download", other)),
        };
        let rows = batch.labels.len();
        if b.shape() != [rows, cfg.dim] {
            return Err(ProtocolError::Shape(format!("token: expected [{rows}, {}], got {:?}", cfg.dim, b.shape())));
        }
        let bv = g.param(b.into_tensor());
        let tv = self.tail.bind(&mut g, true);
        let logits = tail_forward(&mut g, cfg, &tv, bv)?;
        let loss = g.cross_entropy(logits, &batch.labels)?;
        let loss_value = g.value(loss).item() as f64;
        g.backward(loss)?;
        let grad_b = g.grad(bv).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(bv).to_vec()));
        ep.send(ProtocolMessage::TailGradUp { client: ids.0, round, batch: batch_idx, grad: WireTensor::new(grad_b, s.wire) })?;

        let grad_h = match ep.recv()? {
            ProtocolMessage::HeadGradDown { client, round, batch, grad } => {
                check_ids("HeadGradDown", (client, round, batch), ids)?;
                grad
            }
            other => return Err(unexpected("HeadGradDown", other)),
        };
        if grad_h.shape() != g.shape(h_up) {
            return Err(ProtocolError::Shape(format!(
                "head gradient: expected {:?}, got {:?}",
                g.shape(h_up),
                grad_h.shape()
            )));
        }
        g.backward_with(h_up, grad_h.into_tensor())?;
        let head_grads = hv.grads(&g);
        let tail_grads = tv.grads(&g);
        adam_step(&mut self.head.tensors_mut(), &head_grads, &mut self.head_opt, &s.optimizer)?;
        adam_step(&mut self.tail.tensors_mut(), &tail_grads, &mut self.tail_opt, &s.optimizer)?;
        self.record(loss_value);
        Ok(ClientStepReport { loss: loss_value, sampled, head_grads, tail_grads, own_grads: None })
    }

    /// One step on the locally held stack. `Local` uses the class-token
    /// path; `FedavgMono` runs every body block, then the projection.
    pub fn local_step(&mut self, s: &Settings, batch: &Batch) -> Result<ClientStepReport, ProtocolError> {
        let cfg = &s.model;
        let own = self
            .own
            .as_mut()
            .ok_or_else(|| ProtocolError::Config(format!("{} clients hold no body", s.variant)))?;
        let cls_path = s.variant == Variant::Local;
        let depth = own.body.blocks.len();
        let mut g = Graph::new();
        let x = g.constant(batch.images.clone());
        let hv = self.head.bind(&mut g, true);
        let h = head_forward(&mut g, cfg, &hv, x)?;
        let bv = own.body.bind(
            &mut g,
            BodyBinding { depth, with_cls: cls_path, trainable: true, train_pos: cfg.train_pos_embed },
        )?;
        let (feature, pv) = if cls_path {
            (body_full_cls_forward(&mut g, cfg, &bv, h)?, None)
        } else {
            let z = body_prefix_forward(&mut g, cfg, &bv, h, depth)?;
            let pv = own.projection.bind(&mut g, true);
            (projection_forward(&mut g, cfg, &pv, z)?, Some(pv))
        };
        let tv = self.tail.bind(&mut g, true);
        let logits = tail_forward(&mut g, cfg, &tv, feature)?;
        let loss = g.cross_entropy(logits, &batch.labels)?;
        let loss_value = g.value(loss).item() as f64;
        g.backward(loss)?;

        let head_grads = hv.grads(&g);
        let tail_grads = tv.grads(&g);
        let body_grads = bv.grads(&g);
        let proj_grads = pv.map(|p| p.grads(&g)).unwrap_or_else(|| vec![None; own.projection.len()]);
        adam_step(&mut self.head.tensors_mut(), &head_grads, &mut self.head_opt, &s.optimizer)?;
        adam_step(&mut own.body.tensors_mut(), &body_grads, &mut own.body_opt, &s.optimizer)?;
        adam_step(&mut own.projection.tensors_mut(), &proj_grads, &mut own.projection_opt, &s.optimizer)?;
        adam_step(&mut self.tail.tensors_mut(), &tail_grads, &mut self.tail_opt, &s.optimizer)?;
        self.record(loss_value);
        Ok(ClientStepReport {
            loss: loss_value,
            sampled: None,
            head_grads,
            tail_grads,
            own_grads: Some((body_grads, proj_grads)),
        })
    }

    pub fn params_upload(&self, round: u32, s: &Settings) -> ProtocolMessage {
        let wire = |ts: Vec<&Tensor>| ts.into_iter().map(|t| WireTensor::new(t.clone(), s.wire)).collect();
        ProtocolMessage::ParamsUpload { client: self.id as u32, round, head: wire(self.head.tensors()), tail: wire(self.tail.tensors()) }
    }

    /// Replaces head and tail with the broadcast average.
    pub fn apply_unify(&mut self, msg: ProtocolMessage, round: u32) -> Result<(), ProtocolError> {
        let (head, tail) = match msg {
            ProtocolMessage::UnifyBroadcast { round: r, head, tail } if r == round => (head, tail),
            other => return Err(unexpected("UnifyBroadcast", other)),
        };
        self.head = fill_group(&self.head, head)?;
        self.tail = fill_group(&self.tail, tail)?;
        Ok(())
    }

    /// Overwrites every shared parameter, used after federated averaging.
    pub fn load_model(&mut self, model: &ModelParams) {
        self.head = model.head.clone();
        self.tail = model.tail.clone();
        if let Some(own) = &mut self.own {
            own.body = model.body.clone();
            own.projection = model.projection.clone();
        }
    }

    /// The whole locally trained stack, for variants that have one.
    pub fn own_model(&self) -> Option<ModelParams> {
        self.own.as_ref().map(|o| ModelParams {
            head: self.head.clone(),
            body: o.body.clone(),
            projection: o.projection.clone(),
            tail: self.tail.clone(),
        })
    }
}

/// Copies a received tensor list into a group of the same layout.
pub(crate) fn fill_group<P: ParamGroup>(template: &P, tensors: Vec<WireTensor>) -> Result<P, ProtocolError> {
    let mut out = template.clone();
    let slots = out.tensors_mut();
    if slots.len() != tensors.len() {
        return Err(ProtocolError::Divergent(format!("expected {} tensors, received {}", slots.len(), tensors.len())));
    }
    for (slot, t) in slots.into_iter().zip(tensors) {
        if slot.shape() != t.shape() {
            return Err(ProtocolError::Divergent(format!("tensor shape {:?} where {:?} expected", t.shape(), slot.shape())));
        }
        *slot = t.into_tensor();
    }
    Ok(out)
}

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{average_body, sample_block, ProtocolError, Settings};
use crate::autodiff::{adam_step, AdamState, Graph, Tensor};
use crate::models::{
    body_full_cls_forward, body_prefix_forward, projection_forward, BodyBinding, BodyParams, ModelParams,
    ParamGroup, ProjectionParams,
};
use crate::transport::{Endpoint, ProtocolMessage, WireTensor};

/// A client's private copy of the body for the current round.
#[derive(Clone, Debug)]
pub struct WorkingCopy {
    pub body: BodyParams,
    /// Canonical body tensors this client has updated this round.
    pub touched: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct ServerStepReport {
    pub client: usize,
    pub sampled: Option<usize>,
    pub body_grads: Vec<Option<Tensor>>,
    pub projection_grads: Vec<Option<Tensor>>,
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub body: BodyParams,
    pub projection: ProjectionParams,
    projection_opt: AdamState,
    body_opts: Vec<AdamState>,
    rng: ChaCha8Rng,
    round: u32,
    round_start: BodyParams,
    working: BTreeMap<usize, WorkingCopy>,
    sampled: BTreeMap<usize, usize>,
    last_seen: Vec<Option<(u32, u32)>>,
}

impl ServerState {
    pub fn new(init: &ModelParams, clients: usize, sampling_seed: u64) -> Self {
        Self {
            body: init.body.clone(),
            projection: init.projection.clone(),
            projection_opt: AdamState::new(init.projection.tensors()),
            body_opts: (0..clients).map(|_| AdamState::new(init.body.tensors())).collect(),
            rng: ChaCha8Rng::seed_from_u64(sampling_seed),
            round: 0,
            round_start: init.body.clone(),
            working: BTreeMap::new(),
            sampled: BTreeMap::new(),
            last_seen: vec![None; clients],
        }
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn begin_round(&mut self, round: u32) {
        self.round = round;
        self.round_start = self.body.clone();
        self.working.clear();
        self.sampled.clear();
    }

    /// Opens the client's round: draws its block (sampling variants) and
    /// starts its working copy from the round-start body.
    pub fn begin_client(&mut self, client: usize, s: &Settings) -> Result<Option<usize>, ProtocolError> {
        if client >= self.body_opts.len() {
            return Err(ProtocolError::Config(format!("client {client} unknown to a server of {}", self.body_opts.len())));
        }
        let sampled = if s.variant.samples_blocks() {
            let l = sample_block(&mut self.rng, s.model.sample_limit, self.body.blocks.len())?;
            self.sampled.insert(client, l);
            Some(l)
        } else {
            None
        };
        self.working.insert(
            client,
            WorkingCopy { body: self.round_start.clone(), touched: vec![false; self.round_start.len()] },
        );
        Ok(sampled)
    }

    /// Replaces the drawn block for `client` in the current round.
    pub fn force_block(&mut self, client: usize, l: usize) {
        self.sampled.insert(client, l);
    }

    /// Sampled block per client for the current round.
    pub fn sampled(&self) -> &BTreeMap<usize, usize> {
        &self.sampled
    }

    pub fn working(&self) -> &BTreeMap<usize, WorkingCopy> {
        &self.working
    }

    /// Serves one batch exchange for `client`. Returns `None` when the
    /// client signals the end of its round.
    pub fn serve_batch(
        &mut self,
        ep: &mut dyn Endpoint,
        client: usize,
        s: &Settings,
    ) -> Result<Option<ServerStepReport>, ProtocolError> {
        let cfg = &s.model;
        let (round, batch, h) = match ep.recv()? {
            ProtocolMessage::SmashedUpload { client: c, round, batch, h } => {
                if c as usize != client || round != self.round {
                    return Err(ProtocolError::OutOfOrder {
                        expected: "SmashedUpload",
                        got: format!("upload for client {c} round {round} while serving client {client} round {}", self.round),
                    });
                }
                if let Some(last) = self.last_seen[client] {
                    if (round, batch) <= last {
                        return Err(ProtocolError::OutOfOrder {
                            expected: "SmashedUpload",
                            got: format!("non-increasing (round, batch) {:?} after {last:?}", (round, batch)),
                        });
                    }
                }
                (round, batch, h)
            }
            ProtocolMessage::RoundEnd { round } if round == self.round => return Ok(None),
            ProtocolMessage::Error { code, detail } => return Err(ProtocolError::Remote { code, detail }),
            other => return Err(ProtocolError::OutOfOrder { expected: "SmashedUpload", got: other.kind().to_string() }),
        };
        let shape = h.shape().to_vec();
        if shape.len() != 3 || shape[0] == 0 || shape[1] != cfg.dim || shape[2] != cfg.tokens() {
            return Err(ProtocolError::Shape(format!(
                "smashed representation: expected [B >= 1, {}, {}], got {shape:?}",
                cfg.dim,
                cfg.tokens()
            )));
        }
        self.last_seen[client] = Some((round, batch));
        let ids = (client as u32, round, batch);

        let work = self.working.get_mut(&client).ok_or(ProtocolError::MissingRecord(client))?;
        let mut g = Graph::new();
        let hv = g.param(h.into_tensor());
        let sampled = if s.variant.samples_blocks() {
            Some(*self.sampled.get(&client).ok_or(ProtocolError::MissingRecord(client))?)
        } else {
            None
        };
        let (bv, pv, b) = match sampled {
            Some(l) => {
                let bv = work.body.bind(
                    &mut g,
                    BodyBinding { depth: l, with_cls: false, trainable: true, train_pos: cfg.train_pos_embed },
                )?;
                let z = body_prefix_forward(&mut g, cfg, &bv, hv, l)?;
                let pv = self.projection.bind(&mut g, true);
                let b = projection_forward(&mut g, cfg, &pv, z)?;
                (bv, Some(pv), b)
            }
            None => {
                let depth = work.body.blocks.len();
                let bv = work.body.bind(
                    &mut g,
                    BodyBinding { depth, with_cls: true, trainable: true, train_pos: cfg.train_pos_embed },
                )?;
                let b = body_full_cls_forward(&mut g, cfg, &bv, hv)?;
                (bv, None, b)
            }
        };
        let token = WireTensor::new(g.value(b).clone(), s.wire);
        ep.send(match sampled {
            Some(l) => ProtocolMessage::PseudoTokenDown { client: ids.0, round, batch, sampled: l as u32, b: token },
            None => ProtocolMessage::ClsTokenDown { client: ids.0, round, batch, b: token },
        })?;

        let grad = match ep.recv()? {
            ProtocolMessage::TailGradUp { client: c, round: r, batch: bi, grad } if (c, r, bi) == ids => grad,
            ProtocolMessage::Error { code, detail } => return Err(ProtocolError::Remote { code, detail }),
            other => {
                return Err(ProtocolError::OutOfOrder { expected: "TailGradUp", got: format!("{} {:?}", other.kind(), ids) })
            }
        };
        if grad.shape() != g.shape(b) {
            return Err(ProtocolError::Shape(format!("token gradient: expected {:?}, got {:?}", g.shape(b), grad.shape())));
        }
        g.backward_with(b, grad.into_tensor())?;

        let body_grads = bv.grads(&g);
        let projection_grads = pv.map(|p| p.grads(&g)).unwrap_or_default();
        if !projection_grads.is_empty() {
            adam_step(&mut self.projection.tensors_mut(), &projection_grads, &mut self.projection_opt, &s.optimizer)?;
        }
        adam_step(&mut work.body.tensors_mut(), &body_grads, &mut self.body_opts[client], &s.optimizer)?;
        for (t, grad) in work.touched.iter_mut().zip(&body_grads) {
            *t |= grad.is_some();
        }
        let grad_h = g.grad(hv).cloned().unwrap_or_else(|| Tensor::zeros(shape));
        ep.send(ProtocolMessage::HeadGradDown { client: ids.0, round, batch, grad: WireTensor::new(grad_h, s.wire) })?;
        Ok(Some(ServerStepReport { client, sampled, body_grads, projection_grads }))
    }

    /// Aggregates the working copies of `participants` into the body.
    pub fn end_round(&mut self, participants: &[usize], s: &Settings) -> Result<(), ProtocolError> {
        self.body = average_body(&self.round_start, &self.working, participants, s.body_average)?;
        Ok(())
    }
}

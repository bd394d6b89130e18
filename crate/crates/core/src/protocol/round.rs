use super::client::fill_group;
use super::{fedavg, unify_heads_tails, ClientState, ProtocolError, ServerState, Settings, Variant};
use crate::data::{batch_iter, BatchIter, Dataset};
use crate::autodiff::Tensor;
use crate::models::{HeadParams, ModelParams, ParamGroup, TailParams};
use crate::seed;
use crate::transport::{channel_pair, stream_pair, Endpoint, ProtocolMessage, TransportError, TransportKind, WireTensor};

/// What happens in one round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundPlan {
    /// 1-based round index.
    pub round: u32,
    pub unify: bool,
    /// Participating clients in processing order.
    pub clients: Vec<usize>,
    pub batch_size: usize,
    pub batch_seed: u64,
}

impl RoundPlan {
    pub fn new(round: u32, variant: Variant, unify_period: u32, clients: usize, batch_size: usize, batch_seed: u64) -> Self {
        Self {
            round,
            unify: variant.unifies() && unify_period > 0 && round % unify_period == 0,
            clients: (0..clients).collect(),
            batch_size,
            batch_seed,
        }
    }

    /// One local epoch, shuffled per (client, round).
    pub fn batches<'a>(&self, client: usize, data: &'a Dataset) -> BatchIter<'a> {
        batch_iter(data, self.batch_size, seed::derive(self.batch_seed, &[client as u64]), self.round as u64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    pub round: u32,
    /// Mean batch loss per client id.
    pub train_loss: Vec<Option<f64>>,
    /// Sampled block per client id, for sampling variants.
    pub sampled: Vec<Option<usize>>,
    /// Messages that crossed the transport in either direction.
    pub messages: usize,
}

/// Runs one round. On error every client and the server are restored to
/// their state at round start.
pub fn run_round(
    plan: &RoundPlan,
    clients: &mut [ClientState],
    server: &mut ServerState,
    s: &Settings,
    transport: TransportKind,
) -> Result<RoundOutcome, ProtocolError> {
    if let Some(&bad) = plan.clients.iter().find(|&&c| c >= clients.len()) {
        return Err(ProtocolError::Config(format!("plan names client {bad} of {}", clients.len())));
    }
    let saved_clients = clients.to_vec();
    let saved_server = server.clone();
    let result = if s.variant.is_split() {
        split_round(plan, clients, server, s, transport)
    } else {
        local_round(plan, clients, s)
    };
    match result {
        Ok(messages) => {
            let mut train_loss = vec![None; clients.len()];
            let mut sampled = vec![None; clients.len()];
            for &c in &plan.clients {
                train_loss[c] = clients[c].take_round_loss();
                sampled[c] = server.sampled().get(&c).copied();
            }
            Ok(RoundOutcome { round: plan.round, train_loss, sampled, messages })
        }
        Err(e) => {
            clients.clone_from_slice(&saved_clients);
            *server = saved_server;
            Err(e)
        }
    }
}

fn local_round(plan: &RoundPlan, clients: &mut [ClientState], s: &Settings) -> Result<usize, ProtocolError> {
    for &c in &plan.clients {
        let data = clients[c].data().clone();
        for batch in plan.batches(c, &data) {
            clients[c].local_step(s, &batch)?;
        }
    }
    if s.variant == Variant::FedavgMono {
        let models = plan
            .clients
            .iter()
            .map(|&c| clients[c].own_model().ok_or(ProtocolError::MissingRecord(c)))
            .collect::<Result<Vec<ModelParams>, _>>()?;
        let refs: Vec<&ModelParams> = models.iter().collect();
        let samples: Vec<usize> = plan.clients.iter().map(|&c| clients[c].data().len()).collect();
        let global = fedavg(&refs, &samples)?;
        for &c in &plan.clients {
            clients[c].load_model(&global);
        }
    }
    Ok(0)
}

struct Counted<E> {
    inner: E,
    sent: usize,
    received: usize,
}

impl<E: Endpoint> Endpoint for Counted<E> {
    fn send(&mut self, msg: ProtocolMessage) -> Result<(), TransportError> {
        self.inner.send(msg)?;
        self.sent += 1;
        Ok(())
    }

    fn recv(&mut self) -> Result<ProtocolMessage, TransportError> {
        let m = self.inner.recv()?;
        self.received += 1;
        Ok(m)
    }
}

type Links = (Vec<Box<dyn Endpoint>>, Vec<Box<dyn Endpoint>>);

fn open_links(kind: TransportKind, n: usize, max_payload: usize) -> Result<Links, ProtocolError> {
    let mut client_side: Vec<Box<dyn Endpoint>> = Vec::with_capacity(n);
    let mut server_side: Vec<Box<dyn Endpoint>> = Vec::with_capacity(n);
    for _ in 0..n {
        match kind {
            TransportKind::Inproc => {
                let (a, b) = channel_pair(4);
                client_side.push(Box::new(a));
                server_side.push(Box::new(b));
            }
            TransportKind::Stream => {
                let (a, b) = stream_pair()?;
                client_side.push(Box::new(a.with_max_payload(max_payload)));
                server_side.push(Box::new(b.with_max_payload(max_payload)));
            }
        }
    }
    Ok((client_side, server_side))
}

/// Best-effort report of a local failure to the peer.
fn report(ep: &mut dyn Endpoint, e: &ProtocolError) {
    if !matches!(e, ProtocolError::Remote { .. } | ProtocolError::Transport(_)) {
        let _ = ep.send(ProtocolMessage::Error { code: e.wire_code(), detail: e.to_string() });
    }
}

fn split_round(
    plan: &RoundPlan,
    clients: &mut [ClientState],
    server: &mut ServerState,
    s: &Settings,
    transport: TransportKind,
) -> Result<usize, ProtocolError> {
    let (client_eps, server_eps) = open_links(transport, clients.len(), s.max_payload)?;
    let mut client_eps: Vec<Counted<Box<dyn Endpoint>>> =
        client_eps.into_iter().map(|inner| Counted { inner, sent: 0, received: 0 }).collect();
    let (client_result, server_result) = std::thread::scope(|scope| {
        let handle = scope.spawn(move || serve_round(plan, server, server_eps, s));
        let client_result = drive_clients(plan, clients, &mut client_eps, s);
        let counted: usize = client_eps.iter().map(|e| e.sent + e.received).sum();
        drop(client_eps);
        let server_result = handle.join().expect("server thread panicked");
        (client_result.map(|_| counted), server_result)
    });
    match (client_result, server_result) {
        (Ok(n), Ok(())) => Ok(n),
        (Err(ProtocolError::Remote { .. } | ProtocolError::Transport(_)), Err(root)) => Err(root),
        (Err(e), _) => Err(e),
        (Ok(_), Err(e)) => Err(e),
    }
}

fn drive_clients(
    plan: &RoundPlan,
    clients: &mut [ClientState],
    eps: &mut [Counted<Box<dyn Endpoint>>],
    s: &Settings,
) -> Result<(), ProtocolError> {
    let round = plan.round;
    for &c in &plan.clients {
        let data = clients[c].data().clone();
        for (i, batch) in plan.batches(c, &data).enumerate() {
            if let Err(e) = clients[c].split_step(&mut eps[c], s, round, i as u32, &batch) {
                report(&mut eps[c], &e);
                return Err(e);
            }
        }
        eps[c].send(ProtocolMessage::RoundEnd { round })?;
    }
    if plan.unify {
        for &c in &plan.clients {
            eps[c].send(clients[c].params_upload(round, s))?;
        }
        for &c in &plan.clients {
            let msg = eps[c].recv()?;
            if let Err(e) = clients[c].apply_unify(msg, round) {
                report(&mut eps[c], &e);
                return Err(e);
            }
        }
    }
    Ok(())
}

fn serve_round(
    plan: &RoundPlan,
    server: &mut ServerState,
    mut eps: Vec<Box<dyn Endpoint>>,
    s: &Settings,
) -> Result<(), ProtocolError> {
    let mut current = None;
    let result = serve_round_inner(plan, server, &mut eps, s, &mut current);
    if let (Err(e), Some(c)) = (&result, current) {
        report(&mut eps[c], e);
    }
    result
}

fn serve_round_inner(
    plan: &RoundPlan,
    server: &mut ServerState,
    eps: &mut [Box<dyn Endpoint>],
    s: &Settings,
    current: &mut Option<usize>,
) -> Result<(), ProtocolError> {
    server.begin_round(plan.round);
    for &c in &plan.clients {
        *current = Some(c);
        server.begin_client(c, s)?;
        while server.serve_batch(&mut eps[c], c, s)?.is_some() {}
    }
    *current = None;
    server.end_round(&plan.clients, s)?;
    if !plan.unify {
        return Ok(());
    }
    let mut heads = Vec::with_capacity(plan.clients.len());
    let mut tails = Vec::with_capacity(plan.clients.len());
    let (head_template, tail_template) = (HeadParams::zeros(&s.model), TailParams::zeros(&s.model));
    for &c in &plan.clients {
        *current = Some(c);
        match eps[c].recv()? {
            ProtocolMessage::ParamsUpload { client, round, head, tail } if client as usize == c && round == plan.round => {
                heads.push(fill_group(&head_template, head)?);
                tails.push(fill_group(&tail_template, tail)?);
            }
            ProtocolMessage::Error { code, detail } => return Err(ProtocolError::Remote { code, detail }),
            other => return Err(ProtocolError::OutOfOrder { expected: "ParamsUpload", got: other.kind().to_string() }),
        }
    }
    let (head, tail) = unify_heads_tails(&heads.iter().collect::<Vec<_>>(), &tails.iter().collect::<Vec<_>>())?;
    let wire = |ts: Vec<&Tensor>| ts.into_iter().map(|t| WireTensor::new(t.clone(), s.wire)).collect::<Vec<_>>();
    let msg = ProtocolMessage::UnifyBroadcast { round: plan.round, head: wire(head.tensors()), tail: wire(tail.tensors()) };
    for &c in &plan.clients {
        *current = Some(c);
        eps[c].send(msg.clone())?;
    }
    Ok(())
}

//! U-shaped split learning over three party-owned segments.
//!
//! The client holds the input layers (theta1) and output layers (theta3);
//! the server holds the middle (theta2). One round exchanges exactly four
//! boundary messages: o1 up, o2 down, dL/do2 up, input gradient down. The
//! server API only ever receives `ProtocolMessage` values, so by
//! construction its state never contains theta1, theta3, raw inputs, or
//! labels.
//!
//! Segment forward/backward goes through the same slice functions as
//! monolithic training, which is what makes split and monolithic runs
//! bit-identical (checked in the integration suite).

use crate::error::{Error, Result};
use crate::layer::Layer;
use crate::network::{
    backward_layers, forward_eval, forward_layers, slice_params_mut, ActivationTrace, Network,
};
use crate::loss::softmax_cross_entropy;
use crate::optim::SgdMomentum;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Layer counts per segment; must sum to the network's layer count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n_input: usize,
    pub n_server: usize,
    pub n_output: usize,
}

impl SplitPlan {
    pub fn new(n_input: usize, n_server: usize, n_output: usize) -> Self {
        SplitPlan {
            n_input,
            n_server,
            n_output,
        }
    }

    pub fn validate(&self, total_layers: usize) -> Result<()> {
        if self.n_input == 0 || self.n_server == 0 || self.n_output == 0 {
            return Err(Error::config(format!(
                "every split segment needs at least one layer, got {self:?}"
            )));
        }
        let sum = self.n_input + self.n_server + self.n_output;
        if sum != total_layers {
            return Err(Error::config(format!(
                "split plan covers {sum} layers but the network has {total_layers}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::ClientToServer => "client->server",
            Direction::ServerToClient => "server->client",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsgKind {
    Activation,
    Gradient,
}

impl fmt::Display for MsgKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MsgKind::Activation => "activation",
            MsgKind::Gradient => "gradient",
        })
    }
}

/// One boundary message. `batch_id` increases strictly across the run
/// (four ids per round).
#[derive(Debug, Clone)]
pub struct ProtocolMessage {
    pub direction: Direction,
    pub kind: MsgKind,
    pub batch_id: u64,
    pub payload: Tensor,
}

/// FNV-1a over the little-endian bytes of the payload.
pub fn payload_checksum(t: &Tensor) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for v in t.data() {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Client-visible record of one boundary message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub round: u64,
    pub direction: Direction,
    pub kind: MsgKind,
    pub shape: Vec<usize>,
    pub checksum: u64,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "round={} dir={} kind={} shape={:?} checksum={:016x}",
            self.round, self.direction, self.kind, self.shape, self.checksum
        )
    }
}

/// Line-delimited log of every boundary message in a run.
#[derive(Debug, Clone, Default)]
pub struct TraceLog {
    pub records: Vec<TraceRecord>,
}

impl TraceLog {
    pub fn new() -> Self {
        TraceLog::default()
    }

    pub fn record(&mut self, round: u64, msg: &ProtocolMessage) {
        self.records.push(TraceRecord {
            round,
            direction: msg.direction,
            kind: msg.kind,
            shape: msg.payload.shape().to_vec(),
            checksum: payload_checksum(&msg.payload),
        });
    }

    pub fn lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }

    /// Metadata only: what an observer sees without reading payload bytes.
    pub fn signature(&self) -> Vec<(u64, Direction, MsgKind, Vec<usize>)> {
        self.records
            .iter()
            .map(|r| (r.round, r.direction, r.kind, r.shape.clone()))
            .collect()
    }
}

/// The clients' shared half of the model: theta1 and theta3.
#[derive(Debug, Clone)]
pub struct ClientParty {
    input_layers: Vec<Layer>,
    output_layers: Vec<Layer>,
    opt_input: SgdMomentum,
    opt_output: SgdMomentum,
    pending_input: Option<ActivationTrace>,
}

impl ClientParty {
    /// Forward theta1 and emit the o1 activation message.
    pub fn forward_input(&mut self, x: &Tensor, batch_id: u64) -> Result<ProtocolMessage> {
        let trace = forward_layers(&self.input_layers, x)?;
        let o1 = trace.output.clone();
        self.pending_input = Some(trace);
        Ok(ProtocolMessage {
            direction: Direction::ClientToServer,
            kind: MsgKind::Activation,
            batch_id,
            payload: o1,
        })
    }

    /// Forward theta3 on o2, compute the loss, update theta3, and emit the
    /// dL/do2 gradient message.
    pub fn loss_and_tail_backward(
        &mut self,
        o2_msg: &ProtocolMessage,
        labels: &[usize],
    ) -> Result<(f64, ProtocolMessage)> {
        expect_msg(o2_msg, Direction::ServerToClient, MsgKind::Activation)?;
        let trace = forward_layers(&self.output_layers, &o2_msg.payload)?;
        let (loss, dlogits) = softmax_cross_entropy(&trace.output, labels)?;
        let (grads, d_o2) = backward_layers(&self.output_layers, &trace, &dlogits)?;
        self.opt_output
            .step(&mut slice_params_mut(&mut self.output_layers), &grads)?;
        Ok((
            loss,
            ProtocolMessage {
                direction: Direction::ClientToServer,
                kind: MsgKind::Gradient,
                batch_id: o2_msg.batch_id + 1,
                payload: d_o2,
            },
        ))
    }

    /// Backward theta1 with the gradient returned by the server and update.
    pub fn apply_input_gradient(&mut self, g_msg: &ProtocolMessage) -> Result<()> {
        expect_msg(g_msg, Direction::ServerToClient, MsgKind::Gradient)?;
        let trace = self
            .pending_input
            .take()
            .ok_or_else(|| Error::internal("input gradient arrived before any forward"))?;
        let (grads, _) = backward_layers(&self.input_layers, &trace, &g_msg.payload)?;
        self.opt_input
            .step(&mut slice_params_mut(&mut self.input_layers), &grads)?;
        Ok(())
    }

    pub fn input_layers(&self) -> &[Layer] {
        &self.input_layers
    }

    pub fn output_layers(&self) -> &[Layer] {
        &self.output_layers
    }
}

/// The server's half: theta2 only.
#[derive(Debug, Clone)]
pub struct ServerParty {
    layers: Vec<Layer>,
    opt: SgdMomentum,
    pending: Option<ActivationTrace>,
    observed_o1: Option<Tensor>,
}

impl ServerParty {
    /// Forward theta2 on the received o1 and emit the o2 message.
    pub fn forward(&mut self, o1_msg: &ProtocolMessage) -> Result<ProtocolMessage> {
        expect_msg(o1_msg, Direction::ClientToServer, MsgKind::Activation)?;
        let trace = forward_layers(&self.layers, &o1_msg.payload)?;
        let o2 = trace.output.clone();
        self.observed_o1 = Some(o1_msg.payload.clone());
        self.pending = Some(trace);
        Ok(ProtocolMessage {
            direction: Direction::ServerToClient,
            kind: MsgKind::Activation,
            batch_id: o1_msg.batch_id + 1,
            payload: o2,
        })
    }

    /// Backward theta2, update it, and emit the honest input gradient g1.
    pub fn backward(&mut self, grad_msg: &ProtocolMessage) -> Result<ProtocolMessage> {
        expect_msg(grad_msg, Direction::ClientToServer, MsgKind::Gradient)?;
        let trace = self
            .pending
            .take()
            .ok_or_else(|| Error::internal("gradient arrived before any forward"))?;
        let (grads, g1) = backward_layers(&self.layers, &trace, &grad_msg.payload)?;
        self.opt
            .step(&mut slice_params_mut(&mut self.layers), &grads)?;
        Ok(ProtocolMessage {
            direction: Direction::ServerToClient,
            kind: MsgKind::Gradient,
            batch_id: grad_msg.batch_id + 1,
            payload: g1,
        })
    }

    /// The o1 batch observed in the current round; what a malicious server
    /// legitimately sees.
    pub fn observed_o1(&self) -> Result<&Tensor> {
        self.observed_o1
            .as_ref()
            .ok_or_else(|| Error::internal("no activation observed yet"))
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }
}

fn expect_msg(msg: &ProtocolMessage, direction: Direction, kind: MsgKind) -> Result<()> {
    if msg.direction != direction || msg.kind != kind {
        return Err(Error::internal(format!(
            "protocol violation: expected {direction}/{kind}, got {}/{}",
            msg.direction, msg.kind
        )));
    }
    Ok(())
}

/// The partitioned model plus the round counter driving message ids.
#[derive(Debug, Clone)]
pub struct SplitModel {
    pub client: ClientParty,
    pub server: ServerParty,
    round: u64,
}

impl SplitModel {
    /// Moves the network's layers into party-owned segments.
    pub fn partition(net: Network, plan: &SplitPlan, lr: f64, momentum: f64) -> Result<Self> {
        plan.validate(net.num_layers())?;
        let mut layers: Vec<Layer> = Vec::from(net.layers());
        let output_layers = layers.split_off(plan.n_input + plan.n_server);
        let server_layers = layers.split_off(plan.n_input);
        Ok(SplitModel {
            client: ClientParty {
                input_layers: layers,
                output_layers,
                opt_input: SgdMomentum::new(lr, momentum)?,
                opt_output: SgdMomentum::new(lr, momentum)?,
                pending_input: None,
            },
            server: ServerParty {
                layers: server_layers,
                opt: SgdMomentum::new(lr, momentum)?,
                pending: None,
                observed_o1: None,
            },
            round: 0,
        })
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub(crate) fn next_batch_id(&self) -> u64 {
        self.round * 4
    }

    pub(crate) fn finish_round(&mut self) {
        self.round += 1;
    }

    /// End-to-end forward through all three segments (no training state).
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let o1 = forward_eval(self.client.input_layers(), x)?;
        let o2 = forward_eval(self.server.layers(), &o1)?;
        forward_eval(self.client.output_layers(), &o2)
    }

    /// Clones all segments back into one network (checkpoints, probes).
    pub fn to_network(&self, sample_shape: Vec<usize>) -> Result<Network> {
        let mut layers = Vec::new();
        layers.extend_from_slice(self.client.input_layers());
        layers.extend_from_slice(self.server.layers());
        layers.extend_from_slice(self.client.output_layers());
        Network::new(layers, sample_shape)
    }
}

/// One honest round: four messages, three segment updates.
pub fn honest_round(
    model: &mut SplitModel,
    x: &Tensor,
    labels: &[usize],
    mut trace: Option<&mut TraceLog>,
) -> Result<f64> {
    let round = model.round();
    let id = model.next_batch_id();
    let m1 = model.client.forward_input(x, id)?;
    if let Some(t) = trace.as_deref_mut() {
        t.record(round, &m1);
    }
    let m2 = model.server.forward(&m1)?;
    if let Some(t) = trace.as_deref_mut() {
        t.record(round, &m2);
    }
    let (loss, m3) = model.client.loss_and_tail_backward(&m2, labels)?;
    if let Some(t) = trace.as_deref_mut() {
        t.record(round, &m3);
    }
    let m4 = model.server.backward(&m3)?;
    if let Some(t) = trace.as_deref_mut() {
        t.record(round, &m4);
    }
    model.client.apply_input_gradient(&m4)?;
    model.finish_round();
    Ok(loss)
}

/// Runs `t_rounds` honest rounds, one round-robin client per round, batches
/// drawn with the shared batch stream. Returns per-round losses.
pub fn train_honest(
    model: &mut SplitModel,
    shards: &[crate::data::Dataset],
    t_rounds: usize,
    batch_size: usize,
    seed: u64,
    mut trace: Option<&mut TraceLog>,
) -> Result<Vec<f64>> {
    if shards.is_empty() {
        return Err(Error::input("train_honest needs at least one client shard"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut rng = crate::rng::stream_rng(seed, crate::rng::Stream::Batches);
    let mut losses = Vec::with_capacity(t_rounds);
    for t in 0..t_rounds {
        let shard = &shards[t % shards.len()];
        let (x, y) = crate::data::sample_batch(shard, batch_size, &mut rng)?;
        losses.push(honest_round(model, &x, &y, trace.as_deref_mut())?);
    }
    Ok(losses)
}

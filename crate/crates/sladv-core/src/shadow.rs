//! Malicious-server shadow training.
//!
//! While the protocol runs, the server trains its own input layers theta1'
//! to mimic the observed o1 on attacker-owned data, and fuses the resulting
//! similarity gradient into the gradient it returns to clients:
//! `g = g1 + alpha * g2`. Every shadow-side random draw comes from the
//! attacker's private stream, so with alpha = 0 the client and server
//! trajectories are bit-identical to the honest protocol while theta1'
//! still trains.

use crate::data::{sample_batch, Dataset};
use crate::error::{Error, Result};
use crate::layer::Layer;
use crate::network::{backward_layers, forward_layers, slice_params_mut};
use crate::optim::SgdMomentum;
use crate::rng::{stream_rng, Stream};
use crate::split::{Direction, MsgKind, ProtocolMessage, SplitModel, TraceLog};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Norm floor shared by the similarity loss and its gradient.
const SIM_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ShadowConfig {
    /// Similarity constraint alpha; 0 disables fusion (honest payloads).
    pub alpha: f64,
    /// Architecture for theta1', parameters ignored (freshly initialized).
    pub shadow_arch: Vec<Layer>,
    pub shadow_lr: f64,
    /// The attacker's dataset D2; labels unused.
    pub attacker_dataset: Dataset,
}

impl ShadowConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::config(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if !self.shadow_lr.is_finite() || self.shadow_lr <= 0.0 {
            return Err(Error::config(format!(
                "shadow_lr must be positive, got {}",
                self.shadow_lr
            )));
        }
        if self.shadow_arch.is_empty() {
            return Err(Error::config("shadow_arch must not be empty"));
        }
        if self.attacker_dataset.is_empty() {
            return Err(Error::input("attacker dataset is empty"));
        }
        Ok(())
    }
}

/// Server-side training state for theta1'.
#[derive(Debug, Clone)]
pub struct ShadowState {
    layers: Vec<Layer>,
    opt: SgdMomentum,
    rng: ChaCha8Rng,
    /// Per-round L_sim values, in order.
    pub sim_history: Vec<f64>,
}

impl ShadowState {
    /// Initializes theta1' from the config's architecture and checks that it
    /// maps attacker samples onto o1's shape.
    pub fn new(cfg: &ShadowConfig, o1_sample_shape: &[usize], seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut shape = vec![1usize];
        shape.extend_from_slice(&cfg.attacker_dataset.sample_shape());
        for layer in &cfg.shadow_arch {
            shape = layer.out_shape(&shape)?;
        }
        if shape[1..] != *o1_sample_shape {
            return Err(Error::config(format!(
                "shadow_arch produces {:?} per sample but o1 is {:?}",
                &shape[1..],
                o1_sample_shape
            )));
        }
        let mut rng = stream_rng(seed, Stream::Attacker);
        let mut layers = cfg.shadow_arch.clone();
        for layer in &mut layers {
            layer.init(&mut rng);
        }
        Ok(ShadowState {
            layers,
            opt: SgdMomentum::new(cfg.shadow_lr, 0.0)?,
            rng,
            sim_history: Vec::new(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mean L_sim over consecutive windows of `window` rounds.
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        assert!(window > 0);
        self.sim_history
            .chunks(window)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Similarity loss `L_sim = mean_i ||shadow_out_i - o1_i||_2` and its
/// gradients w.r.t. both arguments.
///
/// Per sample the gradient is `r_i / (N * max(||r_i||, floor))` with
/// `r = shadow_out - o1`; the o1 side is its negation. A zero residual has
/// zero gradient (the numerator vanishes first).
pub fn sim_loss(shadow_out: &Tensor, o1: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    if shadow_out.shape() != o1.shape() {
        return Err(Error::config(format!(
            "shadow output {:?} does not match o1 {:?}; wrong shadow_arch",
            shadow_out.shape(),
            o1.shape()
        )));
    }
    let n = shadow_out.batch_len();
    let m = shadow_out.sample_len();
    let s = shadow_out.data();
    let o = o1.data();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d_s = vec![0.0; s.len()];
    for i in 0..n {
        let base = i * m;
        let mut sq = 0.0;
        for j in 0..m {
            let r = s[base + j] - o[base + j];
            sq += r * r;
        }
        let norm = sq.sqrt();
        loss += norm * inv_n;
        let scale = inv_n / norm.max(SIM_NORM_FLOOR);
        for j in 0..m {
            d_s[base + j] = (s[base + j] - o[base + j]) * scale;
        }
    }
    let d_shadow = Tensor::new(shadow_out.shape().to_vec(), d_s)?;
    let d_o1 = d_shadow.scale(-1.0);
    Ok((loss, d_shadow, d_o1))
}

/// `g = g1 + alpha * g2`. With alpha = 0 the honest gradient is returned
/// unchanged (same bytes), which keeps the disabled attack byte-identical
/// to the honest protocol.
pub fn fuse_gradients(g1: &Tensor, g2: &Tensor, alpha: f64) -> Result<Tensor> {
    if g1.shape() != g2.shape() {
        return Err(Error::internal(format!(
            "fusing gradients of shapes {:?} and {:?}",
            g1.shape(),
            g2.shape()
        )));
    }
    if alpha == 0.0 {
        return Ok(g1.clone());
    }
    g1.zip_map(g2, |a, b| a + alpha * b)
}

/// One malicious round. Identical to [`crate::split::honest_round`] on the
/// wire except
/// that the final gradient message carries the fused payload; additionally
/// the server updates theta1' from L_sim. Returns (task loss, L_sim).
pub fn shadow_round(
    model: &mut SplitModel,
    state: &mut ShadowState,
    cfg: &ShadowConfig,
    x: &Tensor,
    labels: &[usize],
    mut trace: Option<&mut TraceLog>,
) -> Result<(f64, f64)> {
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
    let g1_msg = model.server.backward(&m3)?;

    // Server's shadow turn: fit theta1' to the observed o1 on its own data.
    let o1 = model.server.observed_o1()?.clone();
    let batch = x.batch_len();
    let (x_prime, _) = sample_batch(&cfg.attacker_dataset, batch, &mut state.rng)?;
    let strace = forward_layers(&state.layers, &x_prime)?;
    let (l_sim, d_shadow_out, g2) = sim_loss(&strace.output, &o1)?;
    let (shadow_grads, _) = backward_layers(&state.layers, &strace, &d_shadow_out)?;
    state
        .opt
        .step(&mut slice_params_mut(&mut state.layers), &shadow_grads)?;
    state.sim_history.push(l_sim);

    let fused = fuse_gradients(&g1_msg.payload, &g2, cfg.alpha)?;
    let m4 = ProtocolMessage {
        direction: Direction::ServerToClient,
        kind: MsgKind::Gradient,
        batch_id: g1_msg.batch_id,
        payload: fused,
    };
    if let Some(t) = trace.as_deref_mut() {
        t.record(round, &m4);
    }
    model.client.apply_input_gradient(&m4)?;
    model.finish_round();
    Ok((loss, l_sim))
}

/// Runs `t_rounds` malicious rounds with round-robin clients; mirrors
/// [`crate::split::train_honest`] draw for draw on the client side.
pub fn train_shadow(
    model: &mut SplitModel,
    state: &mut ShadowState,
    cfg: &ShadowConfig,
    shards: &[Dataset],
    t_rounds: usize,
    batch_size: usize,
    seed: u64,
    mut trace: Option<&mut TraceLog>,
) -> Result<Vec<f64>> {
    if shards.is_empty() {
        return Err(Error::input("train_shadow needs at least one client shard"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut rng = stream_rng(seed, Stream::Batches);
    let mut losses = Vec::with_capacity(t_rounds);
    for t in 0..t_rounds {
        let shard = &shards[t % shards.len()];
        let (x, y) = sample_batch(shard, batch_size, &mut rng)?;
        let (loss, _) = shadow_round(model, state, cfg, &x, &y, trace.as_deref_mut())?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Convenience: run honest training with the same signature shape, so
/// harness code can branch on "shadow enabled" without duplicating loops.
pub fn train(
    model: &mut SplitModel,
    shadow: Option<(&mut ShadowState, &ShadowConfig)>,
    shards: &[Dataset],
    t_rounds: usize,
    batch_size: usize,
    seed: u64,
    trace: Option<&mut TraceLog>,
) -> Result<Vec<f64>> {
    match shadow {
        None => honest_train(model, shards, t_rounds, batch_size, seed, trace),
        Some((state, cfg)) => {
            train_shadow(model, state, cfg, shards, t_rounds, batch_size, seed, trace)
        }
    }
}

fn honest_train(
    model: &mut SplitModel,
    shards: &[Dataset],
    t_rounds: usize,
    batch_size: usize,
    seed: u64,
    trace: Option<&mut TraceLog>,
) -> Result<Vec<f64>> {
    crate::split::train_honest(model, shards, t_rounds, batch_size, seed, trace)
}

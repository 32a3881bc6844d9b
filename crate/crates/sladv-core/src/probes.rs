//! Runnable measurements of the theory section's quantities: output
//! distance between true and shadow input layers, alignment of crafted
//! attack directions, the linearized closed-form perturbation, and the
//! loss-gradient sign condition at o2.

use crate::attack::{craft, AdversarialBatch, AttackConfig, COSINE_FLOOR};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layer::Layer;
use crate::loss::softmax_cross_entropy;
use crate::network::{backward_layers, forward_eval, forward_layers};
use crate::tensor::{cosine, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Empirical max per-sample L2 distance between theta1 and theta1'
    /// outputs over the probe set.
    pub d_hat: f64,
    /// Mean cosine between one-step attack directions crafted through the
    /// shadow pipeline vs. the true pipeline.
    pub alignment_cos: f64,
    /// Fraction of test samples with grad_{o2} L . o2 < 0.
    pub sign_fraction: f64,
    /// Mean cosine between clean and adversarial o2 on the true pipeline.
    pub transfer_cos: f64,
}

impl ProbeReport {
    pub fn validate(&self) -> Result<()> {
        let ok = self.d_hat.is_finite()
            && self.d_hat >= 0.0
            && self.alignment_cos.is_finite()
            && (0.0..=1.0).contains(&self.sign_fraction)
            && self.transfer_cos.is_finite();
        if !ok {
            return Err(Error::internal(format!("probe report out of domain: {self:?}")));
        }
        Ok(())
    }
}

/// `max_i ||F_theta1(x_i) - F_theta1p(x_i)||_2` over the probe set.
pub fn probe_output_distance(
    theta1: &[Layer],
    theta1p: &[Layer],
    probe_set: &Tensor,
) -> Result<f64> {
    let a = forward_eval(theta1, probe_set)?;
    let b = forward_eval(theta1p, probe_set)?;
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "probe outputs {:?} and {:?} differ in shape",
            a.shape(),
            b.shape()
        )));
    }
    let mut worst = 0.0f64;
    for i in 0..a.batch_len() {
        let d: f64 = a
            .sample(i)
            .iter()
            .zip(b.sample(i))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(d);
    }
    Ok(worst)
}

/// One-step attack gradient rows through a pipeline at delta = 0: the
/// linearized-cosine upstream `o2 / max(||o2||^2, floor)` backpropagated to
/// the input. Degenerate samples get zero rows.
fn attack_direction(pipeline: &[Layer], x: &Tensor) -> Result<Tensor> {
    let trace = forward_layers(pipeline, x)?;
    let o2 = &trace.output;
    let m = o2.sample_len();
    let mut upstream = vec![0.0; o2.len()];
    for i in 0..o2.batch_len() {
        let row = o2.sample(i);
        let sq: f64 = row.iter().map(|v| v * v).sum();
        if sq.sqrt() <= COSINE_FLOOR {
            continue;
        }
        let denom = sq.max(COSINE_FLOOR);
        for (u, &v) in upstream[i * m..(i + 1) * m].iter_mut().zip(row) {
            *u = v / denom;
        }
    }
    let upstream = Tensor::new(o2.shape().to_vec(), upstream)?;
    let (_, g) = backward_layers(pipeline, &trace, &upstream)?;
    Ok(g)
}

/// Mean per-sample cosine between one-step attack deltas crafted through
/// `theta1p . theta2` and through `theta1 . theta2`. The epsilon clip
/// saturates a crafting step coordinate-wise, so the delta a pipeline
/// actually applies is the sign pattern of its gradient; comparing the
/// saturated steps (rather than raw gradients, whose cosine washes out in
/// high dimension) is what decides whether the attacks land on the same
/// corner of the epsilon ball. Samples where either direction is zero are
/// skipped; 0 is returned if none remain.
pub fn probe_alignment(
    theta1: &[Layer],
    theta1p: &[Layer],
    theta2: &[Layer],
    samples: &Tensor,
) -> Result<f64> {
    let true_pipe: Vec<Layer> = theta1.iter().chain(theta2).cloned().collect();
    let shadow_pipe: Vec<Layer> = theta1p.iter().chain(theta2).cloned().collect();
    // Not f64::signum, which sends 0.0 to 1.0 and would turn the zero rows
    // of degenerate samples into countable directions.
    let saturate = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let g_true = attack_direction(&true_pipe, samples)?.map(saturate);
    let g_shadow = attack_direction(&shadow_pipe, samples)?.map(saturate);
    let mut total = 0.0;
    let mut counted = 0usize;
    for i in 0..samples.batch_len() {
        let a = g_true.sample(i);
        let b = g_shadow.sample(i);
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na <= COSINE_FLOOR || nb <= COSINE_FLOOR {
            continue;
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        total += (dot / (na * nb)).clamp(-1.0, 1.0);
        counted += 1;
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}

/// The linearized-optimal perturbation: per sample,
/// `delta = -epsilon * v / ||v||` with `v = grad_x (o2_clean . proxy(x))`,
/// the clean activation treated as a constant.
pub fn closed_form_delta(
    theta1p: &[Layer],
    theta2: &[Layer],
    x: &Tensor,
    epsilon: f64,
) -> Result<Tensor> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if epsilon == 0.0 {
        return Ok(Tensor::zeros(x.shape()));
    }
    let proxy: Vec<Layer> = theta1p.iter().chain(theta2).cloned().collect();
    let trace = forward_layers(&proxy, x)?;
    let clean = trace.output.clone();
    let (_, v) = backward_layers(&proxy, &trace, &clean)?;
    let m = v.sample_len();
    let mut out = vec![0.0; v.len()];
    for i in 0..v.batch_len() {
        let row = v.sample(i);
        let n: f64 = row.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n <= COSINE_FLOOR {
            return Err(Error::degenerate(format!(
                "objective gradient of sample {i} is zero"
            )));
        }
        let scale = -epsilon / n;
        for (o, &a) in out[i * m..(i + 1) * m].iter_mut().zip(row) {
            *o = a * scale;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Fraction of samples whose loss gradient at o2 points against o2, i.e.
/// `grad_{o2} L(F_theta3(o2), y) . o2 < 0`.
pub fn probe_loss_sign(
    theta1: &[Layer],
    theta2: &[Layer],
    theta3: &[Layer],
    ds: &Dataset,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::input("sign probe needs a non-empty dataset"));
    }
    let o1 = forward_eval(theta1, &ds.images)?;
    let o2 = forward_eval(theta2, &o1)?;
    let trace = forward_layers(theta3, &o2)?;
    let (_, dlogits) = softmax_cross_entropy(&trace.output, &ds.labels)?;
    let (_, d_o2) = backward_layers(theta3, &trace, &dlogits)?;
    let mut negative = 0usize;
    for i in 0..o2.batch_len() {
        let dot: f64 = d_o2
            .sample(i)
            .iter()
            .zip(o2.sample(i))
            .map(|(g, v)| g * v)
            .sum();
        if dot < 0.0 {
            negative += 1;
        }
    }
    Ok(negative as f64 / ds.len() as f64)
}

/// Mean cosine between clean and adversarial o2 on the true pipeline, for
/// perturbations crafted elsewhere (typically on the proxy).
pub fn probe_transfer(theta1: &[Layer], theta2: &[Layer], adv: &AdversarialBatch) -> Result<f64> {
    let pipe: Vec<Layer> = theta1.iter().chain(theta2).cloned().collect();
    let clean = forward_eval(&pipe, &adv.clean)?;
    let perturbed = forward_eval(&pipe, &adv.x_adv())?;
    let mut total = 0.0;
    let mut counted = 0usize;
    for i in 0..clean.batch_len() {
        let a = clean.sample(i);
        let b = perturbed.sample(i);
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na <= COSINE_FLOOR || nb <= COSINE_FLOOR {
            continue;
        }
        total += cosine(a, b, COSINE_FLOOR);
        counted += 1;
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}

/// Stacks two batches along the sample axis (tail shapes must agree).
pub fn stack_batches(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::config(format!(
            "cannot stack batches of shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

/// Runs the full probe suite for one trained model/shadow pair.
///
/// `d_hat` is measured over the union of the test set and the attacker
/// pool; alignment and the sign fraction over the test set; transfer over
/// a batch crafted on the proxy with `cfg`.
#[allow(clippy::too_many_arguments)]
pub fn run_probes(
    theta1: &[Layer],
    theta2: &[Layer],
    theta3: &[Layer],
    shadow: &[Layer],
    testset: &Dataset,
    attacker_images: &Tensor,
    cfg: &AttackConfig,
) -> Result<ProbeReport> {
    let probe_set = stack_batches(&testset.images, attacker_images)?;
    let d_hat = probe_output_distance(theta1, shadow, &probe_set)?;
    let alignment_cos = probe_alignment(theta1, shadow, theta2, &testset.images)?;
    let sign_fraction = probe_loss_sign(theta1, theta2, theta3, testset)?;
    let proxy: Vec<Layer> = shadow.iter().chain(theta2).cloned().collect();
    let adv = craft(&proxy, &testset.images, cfg)?;
    let transfer_cos = probe_transfer(theta1, theta2, &adv)?;
    let report = ProbeReport {
        d_hat,
        alignment_cos,
        sign_fraction,
        transfer_cos,
    };
    report.validate()?;
    Ok(report)
}

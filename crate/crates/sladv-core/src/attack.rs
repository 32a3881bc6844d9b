//! Adversarial crafting against the proxy pipeline theta1' . theta2.
//!
//! The attack minimizes the cosine similarity between the server-layer
//! outputs of clean and perturbed inputs, under an infinity-norm budget,
//! starting from delta = 0. The reported loss is the true cosine; the
//! descent direction linearizes it by holding both norms constant at their
//! current values (the inner-product objective of the closed-form
//! analysis), because the exact cosine gradient vanishes identically at the
//! delta = 0 starting point and would make a one-step attack a no-op.
//! Updates use the raw gradient, not its sign.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layer::Layer;
use crate::loss::accuracy;
use crate::network::{backward_layers, forward_eval, forward_layers};
use crate::rng::{stream_rng, Stream};
use crate::split::SplitModel;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Denominator floor for every cosine in the attack path.
pub const COSINE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Infinity-norm budget epsilon.
    pub epsilon: f64,
    /// Step size beta for the raw-gradient update.
    pub beta: f64,
    /// Number of optimization iterations.
    pub k: usize,
    /// Valid pixel interval [lo, hi]; x + delta is clamped into it.
    pub input_range: (f64, f64),
}

impl AttackConfig {
    /// The shipped defaults: budget 0.3, step 0.3, one iteration, unit range.
    pub fn paper_default() -> Self {
        AttackConfig {
            epsilon: 0.3,
            beta: 0.3,
            k: 1,
            input_range: (0.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.input_range;
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::config(format!(
                "input_range must be a finite interval, got [{lo}, {hi}]"
            )));
        }
        if !self.epsilon.is_finite() || self.epsilon < 0.0 || self.epsilon > hi - lo {
            return Err(Error::config(format!(
                "epsilon must lie in [0, {}], got {}",
                hi - lo,
                self.epsilon
            )));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(Error::config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        Ok(())
    }
}

/// Crafted batch: clean inputs plus the perturbation, with bookkeeping for
/// samples that had to be skipped (zero clean activation).
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub clean: Tensor,
    pub delta: Tensor,
    pub skipped: usize,
}

impl AdversarialBatch {
    pub fn x_adv(&self) -> Tensor {
        self.clean.add(&self.delta).expect("clean and delta share a shape")
    }

    pub fn len(&self) -> usize {
        self.clean.batch_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean cosine between paired rows of `o2` and `o2p`, plus the per-sample
/// descent gradient w.r.t. `o2p`.
///
/// Row i of the gradient holds the gradient of that sample's linearized
/// cosine (norms frozen), `o2_i / max(||o2_i|| * ||o2p_i||, floor)`; rows
/// are not rescaled by the batch size, so each sample follows its own
/// objective when crafting.
pub fn attack_loss(o2: &Tensor, o2p: &Tensor) -> Result<(f64, Tensor)> {
    if o2.shape() != o2p.shape() {
        return Err(Error::config(format!(
            "activation shapes {:?} and {:?} differ",
            o2.shape(),
            o2p.shape()
        )));
    }
    let n = o2.batch_len();
    let mut total = 0.0;
    let mut grad = vec![0.0; o2.len()];
    for i in 0..n {
        let a = o2.sample(i);
        let b = o2p.sample(i);
        let na = norm(a);
        if na <= COSINE_FLOOR {
            return Err(Error::degenerate(format!(
                "clean activation of sample {i} has zero norm"
            )));
        }
        let nb = norm(b);
        let denom = (na * nb).max(COSINE_FLOOR);
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        total += (dot / denom).clamp(-1.0, 1.0);
        let g = &mut grad[i * o2.sample_len()..(i + 1) * o2.sample_len()];
        for (gj, &aj) in g.iter_mut().zip(a) {
            *gj = aj / denom;
        }
    }
    // The mean of clamped cosines lies in [-1, 1]; keep that exact under
    // accumulated rounding as well.
    let mean = (total / n as f64).clamp(-1.0, 1.0);
    Ok((mean, Tensor::new(o2p.shape().to_vec(), grad)?))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Clamp `delta` into the epsilon-ball, then pull `x + delta` back into the
/// input range. Both constraints hold exactly in f64 arithmetic: the
/// rounded boundary difference can overshoot by an ulp, so out-of-range
/// sums are repaired by stepping the perturbation toward zero (which can
/// only shrink its magnitude). Requires in-range `x`; idempotent.
pub fn clip_to_budget(delta: &Tensor, x: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    let (lo, hi) = cfg.input_range;
    if x.data().iter().any(|&v| !(lo..=hi).contains(&v)) {
        return Err(Error::input(format!(
            "clean input has values outside [{lo}, {hi}]"
        )));
    }
    let eps = cfg.epsilon;
    delta.zip_map(x, |d, xv| {
        let mut r = d.clamp(-eps, eps);
        loop {
            let z = xv + r;
            if (lo..=hi).contains(&z) {
                return r;
            }
            // z out of range implies r strictly overshoots the boundary
            // difference, so the jump below shrinks |r|; if rounding makes
            // it a fixed point instead, fall back to single ulp steps.
            let target = if z > hi { hi - xv } else { lo - xv };
            r = if (z > hi && target < r) || (z < lo && target > r) {
                target
            } else {
                toward_zero(r)
            };
        }
    })
}

fn toward_zero(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        f64::from_bits(v.to_bits() - 1)
    }
}

/// Concatenated proxy pipeline from the shadow and server segments.
pub fn proxy_layers(shadow: &[Layer], server: &[Layer]) -> Vec<Layer> {
    shadow.iter().chain(server).cloned().collect()
}

/// Algorithm: delta = 0; K times, step along the descent gradient of the
/// cosine through the proxy and clip to budget. Samples whose clean proxy
/// activation is zero are skipped (their delta stays 0) and counted.
pub fn craft(proxy: &[Layer], x: &Tensor, cfg: &AttackConfig) -> Result<AdversarialBatch> {
    cfg.validate()?;
    let clean_o2 = forward_eval(proxy, x)?;
    let n = x.batch_len();
    let m = clean_o2.sample_len();
    let clean_norms: Vec<f64> = (0..n).map(|i| norm(clean_o2.sample(i))).collect();
    let skipped = clean_norms.iter().filter(|&&v| v <= COSINE_FLOOR).count();

    let mut delta = Tensor::zeros(x.shape());
    for _ in 0..cfg.k {
        let xp = x.add(&delta)?;
        let trace = forward_layers(proxy, &xp)?;
        let o2p = &trace.output;
        let mut upstream = vec![0.0; o2p.len()];
        for i in 0..n {
            if clean_norms[i] <= COSINE_FLOOR {
                continue;
            }
            let denom = (clean_norms[i] * norm(o2p.sample(i))).max(COSINE_FLOOR);
            let a = clean_o2.sample(i);
            let u = &mut upstream[i * m..(i + 1) * m];
            for (uj, &aj) in u.iter_mut().zip(a) {
                *uj = aj / denom;
            }
        }
        let upstream = Tensor::new(o2p.shape().to_vec(), upstream)?;
        let (_, g) = backward_layers(proxy, &trace, &upstream)?;
        let stepped = delta.zip_map(&g, |d, gv| d - cfg.beta * gv)?;
        delta = clip_to_budget(&stepped, x, cfg)?;
    }
    Ok(AdversarialBatch {
        clean: x.clone(),
        delta,
        skipped,
    })
}

/// Attack metrics on the true target model. Accuracies and drops are in
/// percent, so `accuracy_drop` is directly in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackEvaluation {
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
    pub accuracy_drop: f64,
    pub random_noise_accuracy: f64,
    pub random_noise_drop: f64,
    pub skipped_samples: usize,
}

/// Crafts on the proxy, evaluates on the target, and runs the equal-budget
/// uniform-noise baseline.
pub fn evaluate_attack(
    target: &SplitModel,
    testset: &Dataset,
    proxy: &[Layer],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackEvaluation> {
    if testset.is_empty() {
        return Err(Error::input("evaluation needs a non-empty test set"));
    }
    cfg.validate()?;
    let clean_logits = target.forward_eval(&testset.images)?;
    let clean = accuracy(&clean_logits, &testset.labels)? * 100.0;

    let adv = craft(proxy, &testset.images, cfg)?;
    let adv_logits = target.forward_eval(&adv.x_adv())?;
    let adversarial = accuracy(&adv_logits, &testset.labels)? * 100.0;

    let mut rng = stream_rng(seed, Stream::EvalNoise);
    let noise = testset
        .images
        .map(|_| rng.gen_range(-cfg.epsilon..=cfg.epsilon));
    let noise = clip_to_budget(&noise, &testset.images, cfg)?;
    let noisy = testset.images.add(&noise)?;
    let noise_logits = target.forward_eval(&noisy)?;
    let noise_acc = accuracy(&noise_logits, &testset.labels)? * 100.0;

    Ok(AttackEvaluation {
        clean_accuracy: clean,
        adversarial_accuracy: adversarial,
        accuracy_drop: clean - adversarial,
        random_noise_accuracy: noise_acc,
        random_noise_drop: clean - noise_acc,
        skipped_samples: adv.skipped,
    })
}

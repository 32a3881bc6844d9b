//! Randomized crafting invariants, shared between the fuzz suite and the
//! acceptance gate: whatever the proxy, the budget, or the input box, a
//! crafted batch never leaves the epsilon ball, never leaves the input
//! range, and never reports a loss outside [-1, 1].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sladv_core::attack::{attack_loss, craft, AttackConfig};
use sladv_core::network::forward_eval;
use sladv_core::{Layer, Tensor};

pub fn random_proxy(rng: &mut ChaCha8Rng) -> (Vec<Layer>, Vec<usize>) {
    let mut layers = Vec::new();
    let mut sample_shape = vec![rng.gen_range(3..7usize)];
    let mut features = sample_shape[0];
    if rng.gen_bool(0.4) {
        let ch = rng.gen_range(1..3usize);
        let side = rng.gen_range(4..7usize);
        sample_shape = vec![ch, side, side];
        let out_ch = rng.gen_range(2..4usize);
        layers.push(Layer::conv2d(ch, out_ch, 3, 1, 1));
        if rng.gen_bool(0.5) {
            layers.push(Layer::relu());
        }
        layers.push(Layer::flatten());
        features = out_ch * side * side;
    }
    let hidden = rng.gen_range(2..6usize);
    layers.push(Layer::dense(features, hidden));
    if rng.gen_bool(0.5) {
        layers.push(Layer::relu());
    }
    // The pipeline ends in a dense layer, so output rows are almost surely
    // nonzero and the craft has directions to work with.
    layers.push(Layer::dense(hidden, rng.gen_range(2..5usize)));
    for layer in &mut layers {
        layer.init(rng);
    }
    (layers, sample_shape)
}

/// Runs `cases` random crafts; returns (crafts performed, violations).
/// Degenerate batches (every clean row zero) are refusals, not crafts.
pub fn run_craft_fuzz(cases: usize) -> (usize, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xFA22);
    let mut violations = Vec::new();
    let mut crafted = 0usize;

    for case in 0..cases {
        let (proxy, sample_shape) = random_proxy(&mut rng);
        let lo = rng.gen_range(-1.0..0.5);
        let hi = lo + rng.gen_range(0.2..2.0);
        let cfg = AttackConfig {
            epsilon: rng.gen_range(0.0..(hi - lo)),
            beta: 10f64.powf(rng.gen_range(-2.0..3.0)),
            k: rng.gen_range(1..=4),
            input_range: (lo, hi),
        };

        let batch_len = rng.gen_range(1..5usize);
        let mut shape = vec![batch_len];
        shape.extend_from_slice(&sample_shape);
        let len: usize = shape.iter().product();
        let x = Tensor::new(shape, (0..len).map(|_| rng.gen_range(lo..=hi)).collect()).unwrap();

        let batch = match craft(&proxy, &x, &cfg) {
            Ok(b) => b,
            Err(sladv_core::Error::Degenerate(_)) => continue,
            Err(e) => {
                violations.push(format!("case {case}: unexpected error {e}"));
                continue;
            }
        };
        crafted += 1;

        if batch.delta.max_abs() > cfg.epsilon {
            violations.push(format!(
                "case {case}: |delta|_inf = {} > epsilon = {}",
                batch.delta.max_abs(),
                cfg.epsilon
            ));
        }
        let x_adv = batch.x_adv();
        if x_adv.data().iter().any(|&v| !(lo..=hi).contains(&v)) {
            violations.push(format!("case {case}: x_adv left [{lo}, {hi}]"));
        }
        let clean_o2 = forward_eval(&proxy, &batch.clean).unwrap();
        let adv_o2 = forward_eval(&proxy, &x_adv).unwrap();
        match attack_loss(&clean_o2, &adv_o2) {
            Ok((loss, _)) => {
                if !(-1.0..=1.0).contains(&loss) {
                    violations.push(format!("case {case}: loss {loss} outside [-1, 1]"));
                }
            }
            Err(e) => violations.push(format!("case {case}: loss evaluation failed: {e}")),
        }
    }
    (crafted, violations)
}

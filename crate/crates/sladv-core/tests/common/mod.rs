//! Shared micro-scale configs for the integration suite: small enough to
//! train in milliseconds, structured like the full desk profile.

// Each test binary compiles this module separately and uses its own subset.
#![allow(dead_code)]

pub mod fd;
pub mod fuzz;
pub mod oracle;

use sladv_core::attack::AttackConfig;
use sladv_core::data::{AttackerSource, Family, Scheme, SynthSpec};
use sladv_core::experiment::{
    ExperimentConfig, LayerSpec, ShadowSpec, TaskSpec, TrainingSpec,
};
use sladv_core::split::SplitPlan;

/// Four-class 8x8 bars task, one conv stem, malicious server with a shifted
/// blob pool. The attacker source is `Shifted` so honest runs from the same
/// seed see identical client shards (both leave the shuffled order intact).
pub fn micro_shadow_config(seed: u64, alpha: f64) -> ExperimentConfig {
    let synth = |per_class: usize| SynthSpec {
        classes: 4,
        size: 8,
        samples_per_class: per_class,
        generator: Family::Bars,
    };
    ExperimentConfig {
        seed,
        task: TaskSpec::Synth {
            train: synth(20),
            test: synth(8),
        },
        model: vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_features: 192,
                out_features: 4,
            },
        ],
        plan: SplitPlan::new(1, 2, 1),
        training: TrainingSpec {
            t_rounds: 6,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 8,
            n_clients: 2,
            scheme: Scheme::Iid,
        },
        shadow: Some(ShadowSpec {
            alpha,
            arch: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
            ],
            shadow_lr: 0.1,
            attacker: AttackerSource::Shifted {
                spec: SynthSpec {
                    classes: 4,
                    size: 8,
                    samples_per_class: 8,
                    generator: Family::Blobs,
                },
                size: None,
            },
        }),
        attack: AttackConfig {
            epsilon: 0.3,
            beta: 5.0,
            k: 1,
            input_range: (0.0, 1.0),
        },
        probes: false,
    }
}

/// Like [`micro_shadow_config`] but trained long enough to actually
/// classify: more rounds, a bigger test set, and a bigger attacker pool.
pub fn micro_trained_config(seed: u64, alpha: f64) -> ExperimentConfig {
    let mut cfg = micro_shadow_config(seed, alpha);
    cfg.training.t_rounds = 400;
    if let TaskSpec::Synth { test, .. } = &mut cfg.task {
        test.samples_per_class = 25;
    }
    if let Some(shadow) = cfg.shadow.as_mut() {
        if let AttackerSource::Shifted { spec, .. } = &mut shadow.attacker {
            spec.samples_per_class = 16;
        }
    }
    cfg
}

//! Monolithic-training oracle shared between the equivalence suite and the
//! acceptance gate. The oracle trains the unpartitioned network with one
//! optimizer over the whole parameter list and knows nothing about parties
//! or messages; split training must match it bit for bit.

use sladv_core::data::{
    partition, sample_batch, AttackerSource, Dataset, Family, PartitionPlan, Scheme, SynthSpec,
};
use sladv_core::loss::softmax_cross_entropy;
use sladv_core::optim::SgdMomentum;
use sladv_core::rng::{stream_rng, Stream};
use sladv_core::split::{train_honest, SplitModel, SplitPlan};
use sladv_core::{Layer, Network, Tensor};

pub const ROUNDS: usize = 50;
pub const BATCH: usize = 8;
pub const LR: f64 = 0.05;
pub const MOMENTUM: f64 = 0.9;

pub fn test_net(seed: u64) -> Network {
    let layers = vec![
        Layer::conv2d(1, 3, 3, 1, 1),
        Layer::relu(),
        Layer::flatten(),
        Layer::dense(108, 8),
        Layer::relu(),
        Layer::dense(8, 4),
    ];
    let mut net = Network::new(layers, vec![1, 6, 6]).unwrap();
    net.init(&mut stream_rng(seed, Stream::ModelInit));
    net
}

pub fn shards_for(seed: u64) -> Vec<Dataset> {
    let spec = SynthSpec {
        classes: 4,
        size: 6,
        samples_per_class: 20,
        generator: Family::Bars,
    };
    let ds = sladv_core::data::synth_with_stream(&spec, seed, Stream::TaskData).unwrap();
    let plan = PartitionPlan {
        n_clients: 2,
        scheme: Scheme::Iid,
        seed,
        attacker: AttackerSource::SameDistribution { size: 0 },
    };
    let (shards, _) = partition(&ds, &plan).unwrap();
    shards
}

/// Plain centralized SGD-with-momentum training, batches drawn from the
/// identical stream the split protocol uses.
pub fn train_monolithic(
    net: &mut Network,
    shards: &[Dataset],
    t_rounds: usize,
    batch_size: usize,
    seed: u64,
) -> Vec<f64> {
    let mut opt = SgdMomentum::new(LR, MOMENTUM).unwrap();
    let mut rng = stream_rng(seed, Stream::Batches);
    let mut losses = Vec::with_capacity(t_rounds);
    for t in 0..t_rounds {
        let shard = &shards[t % shards.len()];
        let (x, y) = sample_batch(shard, batch_size, &mut rng).unwrap();
        let trace = net.forward(&x).unwrap();
        let (loss, dlogits) = softmax_cross_entropy(&trace.output, &y).unwrap();
        let (grads, _) = net.backward(&trace, &dlogits).unwrap();
        opt.step(&mut net.params_mut(), &grads).unwrap();
        losses.push(loss);
    }
    losses
}

pub fn assert_bit_identical(a: &[&Tensor], b: &[&Tensor], context: &str) {
    assert_eq!(a.len(), b.len(), "{context}: parameter count differs");
    for (i, (ta, tb)) in a.iter().zip(b).enumerate() {
        assert_eq!(ta.shape(), tb.shape(), "{context}: param {i} shape differs");
        for (j, (va, vb)) in ta.data().iter().zip(tb.data()).enumerate() {
            assert_eq!(
                va.to_bits(),
                vb.to_bits(),
                "{context}: param {i} coordinate {j}: {va} vs {vb}"
            );
        }
    }
}

/// The full criterion: 50 honest rounds, bit-identical losses and reunited
/// parameters, across the given seeds and three split plans.
pub fn equivalence_suite(seeds: std::ops::RangeInclusive<u64>) {
    let plans = [
        SplitPlan::new(1, 4, 1),
        SplitPlan::new(2, 3, 1),
        SplitPlan::new(1, 3, 2),
    ];
    for seed in seeds {
        let shards = shards_for(seed);
        let mut mono = test_net(seed);
        let mono_losses = train_monolithic(&mut mono, &shards, ROUNDS, BATCH, seed);

        for plan in &plans {
            let mut model = SplitModel::partition(test_net(seed), plan, LR, MOMENTUM).unwrap();
            let split_losses =
                train_honest(&mut model, &shards, ROUNDS, BATCH, seed, None).unwrap();

            assert_eq!(split_losses.len(), mono_losses.len());
            for (r, (a, b)) in split_losses.iter().zip(&mono_losses).enumerate() {
                assert_eq!(
                    a.to_bits(),
                    b.to_bits(),
                    "seed {seed} plan {plan:?} round {r}: losses diverged"
                );
            }

            let reunited = model.to_network(vec![1, 6, 6]).unwrap();
            assert_bit_identical(
                &reunited.params(),
                &mono.params(),
                &format!("seed {seed} plan {plan:?}"),
            );
        }
    }
}

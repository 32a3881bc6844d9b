//! Finite-difference oracle machinery shared between the gradient suite
//! and the acceptance gate. Central differences, step 1e-5, tolerance 1e-4,
//! 20 seeds per case.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sladv_core::gradcheck::{max_rel_error, numeric_gradient};
use sladv_core::loss::softmax_cross_entropy;
use sladv_core::network::{backward_layers, forward_eval, forward_layers, slice_params_mut};
use sladv_core::shadow::sim_loss;
use sladv_core::{Layer, Network, Tensor};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;

pub type Case = (&'static str, fn() -> (Vec<Layer>, Vec<usize>));

/// Random values in +-[0.1, 1]: nonzero magnitude keeps relu (and the
/// sim-loss norm) away from non-differentiable points.
pub fn bounded(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Scalar head for FD: a fixed random weighting of the network output.
fn weighted_sum(layers: &[Layer], x: &Tensor, w: &Tensor) -> sladv_core::Result<f64> {
    let out = forward_eval(layers, x)?;
    Ok(out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
}

/// Checks analytic parameter and input gradients of `make()` against
/// central differences for `SEEDS` seeds. Panics with the offending seed.
pub fn check_case(name: &str, make: fn() -> (Vec<Layer>, Vec<usize>)) {
    for seed in 0..SEEDS {
        let (mut layers, sample_shape) = make();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0000 + seed);
        for p in slice_params_mut(&mut layers) {
            *p = bounded(p.shape().to_vec(), &mut rng);
        }
        let mut in_shape = vec![3usize];
        in_shape.extend_from_slice(&sample_shape);
        let x = bounded(in_shape, &mut rng);

        let trace = forward_layers(&layers, &x).unwrap();
        let w = bounded(trace.output.shape().to_vec(), &mut rng);
        let (param_grads, input_grad) = backward_layers(&layers, &trace, &w).unwrap();

        let numeric_input = numeric_gradient(|t| weighted_sum(&layers, t, &w), &x, H).unwrap();
        let err = max_rel_error(&input_grad, &numeric_input);
        assert!(err < TOL, "{name} seed {seed}: input gradient rel error {err:.2e}");

        let originals: Vec<Tensor> = slice_params_mut(&mut layers)
            .into_iter()
            .map(|p| p.clone())
            .collect();
        for (i, orig) in originals.iter().enumerate() {
            let numeric = numeric_gradient(
                |t| {
                    let mut probe = layers.clone();
                    *slice_params_mut(&mut probe)[i] = t.clone();
                    weighted_sum(&probe, &x, &w)
                },
                orig,
                H,
            )
            .unwrap();
            let err = max_rel_error(&param_grads[i], &numeric);
            assert!(err < TOL, "{name} seed {seed}: param {i} rel error {err:.2e}");
        }
    }
}

fn dense_case() -> (Vec<Layer>, Vec<usize>) {
    (vec![Layer::dense(7, 5)], vec![7])
}

fn conv_pad_case() -> (Vec<Layer>, Vec<usize>) {
    (vec![Layer::conv2d(2, 3, 3, 1, 1)], vec![2, 5, 5])
}

fn conv_stride_case() -> (Vec<Layer>, Vec<usize>) {
    (vec![Layer::conv2d(3, 2, 3, 2, 0)], vec![3, 7, 7])
}

fn relu_case() -> (Vec<Layer>, Vec<usize>) {
    (vec![Layer::relu()], vec![11])
}

fn avgpool_case() -> (Vec<Layer>, Vec<usize>) {
    (vec![Layer::avg_pool2d(2, 2)], vec![2, 6, 6])
}

fn avgpool_overlap_case() -> (Vec<Layer>, Vec<usize>) {
    (vec![Layer::avg_pool2d(3, 2)], vec![1, 7, 7])
}

fn flatten_case() -> (Vec<Layer>, Vec<usize>) {
    (vec![Layer::flatten()], vec![2, 3, 4])
}

fn residual_case() -> (Vec<Layer>, Vec<usize>) {
    (
        vec![Layer::residual(vec![
            Layer::conv2d(2, 2, 3, 1, 1),
            Layer::relu(),
        ])],
        vec![2, 4, 4],
    )
}

fn convnet_case() -> (Vec<Layer>, Vec<usize>) {
    // conv(1->4) 40 params + dense(64->10) 650 params = 690.
    let layers = vec![
        Layer::conv2d(1, 4, 3, 1, 1),
        Layer::relu(),
        Layer::avg_pool2d(2, 2),
        Layer::flatten(),
        Layer::dense(64, 10),
    ];
    assert_eq!(
        Network::new(layers.clone(), vec![1, 8, 8]).unwrap().param_count(),
        690
    );
    (layers, vec![1, 8, 8])
}

fn mlp_case() -> (Vec<Layer>, Vec<usize>) {
    // 208 + 272 + 68 = 548 params.
    let layers = vec![
        Layer::dense(12, 16),
        Layer::relu(),
        Layer::dense(16, 16),
        Layer::relu(),
        Layer::dense(16, 4),
    ];
    assert_eq!(
        Network::new(layers.clone(), vec![12]).unwrap().param_count(),
        548
    );
    (layers, vec![12])
}

fn resnet_case() -> (Vec<Layer>, Vec<usize>) {
    // 76 + 148 + 870 = 1094 params, under the 2000 cap.
    let layers = vec![
        Layer::conv2d(2, 4, 3, 1, 1),
        Layer::residual(vec![Layer::conv2d(4, 4, 3, 1, 1), Layer::relu()]),
        Layer::relu(),
        Layer::flatten(),
        Layer::dense(144, 6),
    ];
    let net = Network::new(layers.clone(), vec![2, 6, 6]).unwrap();
    assert!(net.param_count() <= 2000, "{}", net.param_count());
    (layers, vec![2, 6, 6])
}

/// One case per layer kind, including the parameterized variants.
pub const LAYER_CASES: [Case; 8] = [
    ("dense", dense_case),
    ("conv_pad", conv_pad_case),
    ("conv_stride", conv_stride_case),
    ("relu", relu_case),
    ("avgpool", avgpool_case),
    ("avgpool_overlap", avgpool_overlap_case),
    ("flatten", flatten_case),
    ("residual", residual_case),
];

/// Three composed networks, each at most 2000 parameters.
pub const COMPOSED_CASES: [Case; 3] = [
    ("convnet", convnet_case),
    ("mlp", mlp_case),
    ("resnet", resnet_case),
];

pub fn cross_entropy_suite() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(0xCE00 + seed);
        let logits = bounded(vec![4, 6], &mut rng);
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
        let (_, analytic) = softmax_cross_entropy(&logits, &labels).unwrap();
        let numeric = numeric_gradient(
            |t| Ok(softmax_cross_entropy(t, &labels).unwrap().0),
            &logits,
            H,
        )
        .unwrap();
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < TOL, "cross-entropy seed {seed}: rel error {err:.2e}");
    }
}

pub fn sim_loss_suite() {
    // L_sim is mean per-sample euclidean distance; differentiable wherever
    // no residual is exactly zero, which bounded() guarantees.
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(0x51_0000 + seed);
        let shadow_out = bounded(vec![5, 7], &mut rng);
        let o1 = bounded(vec![5, 7], &mut rng);
        let (_, d_shadow, d_o1) = sim_loss(&shadow_out, &o1).unwrap();

        let numeric_shadow =
            numeric_gradient(|t| Ok(sim_loss(t, &o1).unwrap().0), &shadow_out, H).unwrap();
        let err = max_rel_error(&d_shadow, &numeric_shadow);
        assert!(err < TOL, "sim_loss d_shadow seed {seed}: rel error {err:.2e}");

        let numeric_o1 =
            numeric_gradient(|t| Ok(sim_loss(&shadow_out, t).unwrap().0), &o1, H).unwrap();
        let err = max_rel_error(&d_o1, &numeric_o1);
        assert!(err < TOL, "sim_loss d_o1 seed {seed}: rel error {err:.2e}");
    }
}

/// The whole oracle suite in one call; used by the acceptance gate.
pub fn full_suite() -> usize {
    let mut cases = 0;
    for (name, case) in LAYER_CASES.iter().chain(&COMPOSED_CASES) {
        check_case(name, *case);
        cases += 1;
    }
    cross_entropy_suite();
    sim_loss_suite();
    cases + 2
}

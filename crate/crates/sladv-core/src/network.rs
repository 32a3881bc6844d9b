//! Layer stacks and the traced forward/backward passes.
//!
//! Both the monolithic trainer and the split-protocol parties call the same
//! free functions over `&[Layer]` slices, so a partitioned model replays the
//! exact floating-point operation sequence of the whole one.

use crate::error::{Error, Result};
use crate::layer::Layer;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Activations recorded during a forward pass: the input to each layer plus
/// the final output.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub inputs: Vec<Tensor>,
    pub output: Tensor,
}

/// Forward through a layer slice, keeping per-layer inputs for backprop.
pub fn forward_layers(layers: &[Layer], x: &Tensor) -> Result<ActivationTrace> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for layer in layers {
        let next = layer.forward(&cur)?;
        inputs.push(cur);
        cur = next;
    }
    Ok(ActivationTrace {
        inputs,
        output: cur,
    })
}

/// Forward without keeping activations; used for evaluation.
pub fn forward_eval(layers: &[Layer], x: &Tensor) -> Result<Tensor> {
    let mut cur = x.clone();
    for layer in layers {
        cur = layer.forward(&cur)?;
    }
    Ok(cur)
}

/// Backward through a layer slice. Returns parameter gradients flattened in
/// the same order as [`slice_params`], plus the gradient w.r.t. the slice
/// input.
pub fn backward_layers(
    layers: &[Layer],
    trace: &ActivationTrace,
    upstream: &Tensor,
) -> Result<(Vec<Tensor>, Tensor)> {
    if trace.inputs.len() != layers.len() {
        return Err(Error::internal(format!(
            "trace holds {} activations for {} layers",
            trace.inputs.len(),
            layers.len()
        )));
    }
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut up = upstream.clone();
    for (layer, input) in layers.iter().zip(&trace.inputs).rev() {
        let (pg, ig) = layer.backward(input, &up)?;
        per_layer.push(pg);
        up = ig;
    }
    let mut grads = Vec::new();
    for pg in per_layer.into_iter().rev() {
        grads.extend(pg);
    }
    Ok((grads, up))
}

pub fn slice_params(layers: &[Layer]) -> Vec<&Tensor> {
    layers.iter().flat_map(|l| l.params()).collect()
}

pub fn slice_params_mut(layers: &mut [Layer]) -> Vec<&mut Tensor> {
    layers.iter_mut().flat_map(|l| l.params_mut()).collect()
}

/// A sequential stack of layers with a fixed input shape (batch axis free).
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    /// Per-sample input shape, without the batch axis.
    sample_shape: Vec<usize>,
}

impl Network {
    /// Builds a network and validates that the layers compose over
    /// `sample_shape` (per-sample, no batch axis).
    pub fn new(layers: Vec<Layer>, sample_shape: Vec<usize>) -> Result<Self> {
        let net = Network {
            layers,
            sample_shape,
        };
        net.output_shape()?;
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Per-sample output shape, without the batch axis.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = Vec::with_capacity(self.sample_shape.len() + 1);
        shape.push(1);
        shape.extend_from_slice(&self.sample_shape);
        for layer in &self.layers {
            shape = layer.out_shape(&shape)?;
        }
        Ok(shape[1..].to_vec())
    }

    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        for layer in &mut self.layers {
            layer.init(rng);
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<ActivationTrace> {
        forward_layers(&self.layers, x)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        forward_eval(&self.layers, x)
    }

    pub fn backward(
        &self,
        trace: &ActivationTrace,
        upstream: &Tensor,
    ) -> Result<(Vec<Tensor>, Tensor)> {
        backward_layers(&self.layers, trace, upstream)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        slice_params(&self.layers)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        slice_params_mut(&mut self.layers)
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Splits the stack into three segments at the given layer counts:
    /// `[0, cut1)`, `[cut1, cut2)`, `[cut2, end)`.
    pub fn segments(&self, cut1: usize, cut2: usize) -> Result<(&[Layer], &[Layer], &[Layer])> {
        if cut1 == 0 || cut2 <= cut1 || cut2 >= self.layers.len() {
            return Err(Error::config(format!(
                "cut points ({cut1}, {cut2}) must satisfy 0 < cut1 < cut2 < {}",
                self.layers.len()
            )));
        }
        Ok((
            &self.layers[..cut1],
            &self.layers[cut1..cut2],
            &self.layers[cut2..],
        ))
    }
}

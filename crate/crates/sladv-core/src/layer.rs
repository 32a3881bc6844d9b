//! Layer kinds, their forward passes, and hand-derived backward passes.
//!
//! Six kinds are supported: dense, conv2d, relu, avgpool2d, flatten, and
//! residual blocks (skip addition around an inner layer stack). Everything
//! runs in `f64` with the batch along the leading axis.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out_ch, in_ch, k, k]`
    pub weight: Tensor,
    /// `[out_ch]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AvgPool2d {
    pub kernel: usize,
    pub stride: usize,
}

/// Skip addition around an inner layer stack: `y = x + body(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub body: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu,
    AvgPool2d(AvgPool2d),
    Flatten,
    Residual(Residual),
}

impl Layer {
    pub fn dense(in_features: usize, out_features: usize) -> Self {
        Layer::Dense(Dense {
            in_features,
            out_features,
            weight: Tensor::zeros(&[out_features, in_features]),
            bias: Tensor::zeros(&[out_features]),
        })
    }

    pub fn dense_with(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.ndim() != 2 || bias.ndim() != 1 || bias.shape()[0] != weight.shape()[0] {
            return Err(Error::config(format!(
                "dense parameters inconsistent: weight {:?}, bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Layer::Dense(Dense {
            in_features: weight.shape()[1],
            out_features: weight.shape()[0],
            weight,
            bias,
        }))
    }

    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Layer::Conv2d(Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: Tensor::zeros(&[out_channels]),
        })
    }

    pub fn conv2d_with(
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if weight.ndim() != 4 || weight.shape()[2] != weight.shape()[3] {
            return Err(Error::config(format!(
                "conv2d weight must be [out, in, k, k], got {:?}",
                weight.shape()
            )));
        }
        if bias.ndim() != 1 || bias.shape()[0] != weight.shape()[0] {
            return Err(Error::config(format!(
                "conv2d bias {:?} does not match weight {:?}",
                bias.shape(),
                weight.shape()
            )));
        }
        Ok(Layer::Conv2d(Conv2d {
            in_channels: weight.shape()[1],
            out_channels: weight.shape()[0],
            kernel: weight.shape()[2],
            stride,
            padding,
            weight,
            bias,
        }))
    }

    pub fn relu() -> Self {
        Layer::Relu
    }

    pub fn avg_pool2d(kernel: usize, stride: usize) -> Self {
        Layer::AvgPool2d(AvgPool2d { kernel, stride })
    }

    pub fn flatten() -> Self {
        Layer::Flatten
    }

    pub fn residual(body: Vec<Layer>) -> Self {
        Layer::Residual(Residual { body })
    }

    /// Output shape for a given input shape; errors on any mismatch.
    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => {
                if in_shape.len() != 2 || in_shape[1] != d.in_features {
                    return Err(Error::config(format!(
                        "dense({}->{}) cannot take input {:?}",
                        d.in_features, d.out_features, in_shape
                    )));
                }
                Ok(vec![in_shape[0], d.out_features])
            }
            Layer::Conv2d(c) => {
                if in_shape.len() != 4 || in_shape[1] != c.in_channels {
                    return Err(Error::config(format!(
                        "conv2d({}ch) cannot take input {:?}",
                        c.in_channels, in_shape
                    )));
                }
                let (h, w) = (in_shape[2], in_shape[3]);
                let oh = conv_out(h, c.kernel, c.stride, c.padding)?;
                let ow = conv_out(w, c.kernel, c.stride, c.padding)?;
                Ok(vec![in_shape[0], c.out_channels, oh, ow])
            }
            Layer::Relu => Ok(in_shape.to_vec()),
            Layer::AvgPool2d(p) => {
                if in_shape.len() != 4 {
                    return Err(Error::config(format!(
                        "avgpool2d needs [N,C,H,W] input, got {in_shape:?}"
                    )));
                }
                let oh = pool_out(in_shape[2], p.kernel, p.stride)?;
                let ow = pool_out(in_shape[3], p.kernel, p.stride)?;
                Ok(vec![in_shape[0], in_shape[1], oh, ow])
            }
            Layer::Flatten => {
                if in_shape.len() < 2 {
                    return Err(Error::config(format!(
                        "flatten needs a batch plus at least one axis, got {in_shape:?}"
                    )));
                }
                Ok(vec![in_shape[0], in_shape[1..].iter().product()])
            }
            Layer::Residual(r) => {
                let mut shape = in_shape.to_vec();
                for layer in &r.body {
                    shape = layer.out_shape(&shape)?;
                }
                if shape != in_shape {
                    return Err(Error::config(format!(
                        "residual body maps {in_shape:?} to {shape:?}; skip addition needs equal shapes"
                    )));
                }
                Ok(shape)
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(d) => dense_forward(d, x),
            Layer::Conv2d(c) => conv2d_forward(c, x),
            Layer::Relu => Ok(x.map(|v| if v > 0.0 { v } else { 0.0 })),
            Layer::AvgPool2d(p) => avgpool_forward(p, x),
            Layer::Flatten => {
                let shape = self.out_shape(x.shape())?;
                x.reshape(&shape)
            }
            Layer::Residual(r) => {
                let mut y = x.clone();
                for layer in &r.body {
                    y = layer.forward(&y)?;
                }
                if y.shape() != x.shape() {
                    return Err(Error::config(format!(
                        "residual body output {:?} does not match input {:?}",
                        y.shape(),
                        x.shape()
                    )));
                }
                y.add(x)
            }
        }
    }

    /// Gradients of `sum(upstream * output)` w.r.t. parameters and input.
    ///
    /// `x` must be the same tensor the forward pass saw.
    pub fn backward(&self, x: &Tensor, upstream: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        match self {
            Layer::Dense(d) => dense_backward(d, x, upstream),
            Layer::Conv2d(c) => conv2d_backward(c, x, upstream),
            Layer::Relu => {
                let grad = x.zip_map(upstream, |xi, u| if xi > 0.0 { u } else { 0.0 })?;
                Ok((vec![], grad))
            }
            Layer::AvgPool2d(p) => Ok((vec![], avgpool_backward(p, x, upstream)?)),
            Layer::Flatten => Ok((vec![], upstream.reshape(x.shape())?)),
            Layer::Residual(r) => {
                // Recompute the body's activations; the outer trace only
                // keeps block inputs.
                let mut inputs = Vec::with_capacity(r.body.len());
                let mut y = x.clone();
                for layer in &r.body {
                    inputs.push(y.clone());
                    y = layer.forward(&y)?;
                }
                let mut grads_rev = Vec::new();
                let mut up = upstream.clone();
                for (layer, input) in r.body.iter().zip(&inputs).rev() {
                    let (pg, ig) = layer.backward(input, &up)?;
                    grads_rev.push(pg);
                    up = ig;
                }
                let mut param_grads = Vec::new();
                for pg in grads_rev.into_iter().rev() {
                    param_grads.extend(pg);
                }
                let input_grad = up.add(upstream)?;
                Ok((param_grads, input_grad))
            }
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::Relu | Layer::AvgPool2d(_) | Layer::Flatten => vec![],
            Layer::Residual(r) => r.body.iter().flat_map(|l| l.params()).collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Relu | Layer::AvgPool2d(_) | Layer::Flatten => vec![],
            Layer::Residual(r) => r.body.iter_mut().flat_map(|l| l.params_mut()).collect(),
        }
    }

    /// He-style scaled-uniform weight init, zero biases.
    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        match self {
            Layer::Dense(d) => {
                let limit = (6.0 / d.in_features as f64).sqrt();
                fill_uniform(&mut d.weight, limit, rng);
            }
            Layer::Conv2d(c) => {
                let fan_in = (c.in_channels * c.kernel * c.kernel) as f64;
                let limit = (6.0 / fan_in).sqrt();
                fill_uniform(&mut c.weight, limit, rng);
            }
            Layer::Relu | Layer::AvgPool2d(_) | Layer::Flatten => {}
            Layer::Residual(r) => {
                for layer in &mut r.body {
                    layer.init(rng);
                }
            }
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::AvgPool2d(_) => "avgpool2d",
            Layer::Flatten => "flatten",
            Layer::Residual(_) => "residual",
        }
    }
}

fn fill_uniform(t: &mut Tensor, limit: f64, rng: &mut ChaCha8Rng) {
    for v in t.data_mut() {
        *v = rng.gen_range(-limit..limit);
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::config("conv2d kernel and stride must be positive"));
    }
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(Error::config(format!(
            "conv2d kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn pool_out(size: usize, kernel: usize, stride: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::config("avgpool2d kernel and stride must be positive"));
    }
    if size < kernel {
        return Err(Error::config(format!(
            "avgpool2d kernel {kernel} larger than input {size}"
        )));
    }
    Ok((size - kernel) / stride + 1)
}

fn dense_forward(d: &Dense, x: &Tensor) -> Result<Tensor> {
    let out_shape = Layer::Dense(d.clone()).out_shape(x.shape())?;
    let n = x.shape()[0];
    let (fi, fo) = (d.in_features, d.out_features);
    let xd = x.data();
    let w = d.weight.data();
    let b = d.bias.data();
    let mut y = vec![0.0; n * fo];
    for s in 0..n {
        let xr = &xd[s * fi..(s + 1) * fi];
        let yr = &mut y[s * fo..(s + 1) * fo];
        for o in 0..fo {
            let wr = &w[o * fi..(o + 1) * fi];
            let mut acc = b[o];
            for i in 0..fi {
                acc += xr[i] * wr[i];
            }
            yr[o] = acc;
        }
    }
    Tensor::new(out_shape, y)
}

fn dense_backward(d: &Dense, x: &Tensor, upstream: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
    let n = x.shape()[0];
    let (fi, fo) = (d.in_features, d.out_features);
    if upstream.shape() != [n, fo] {
        return Err(Error::config(format!(
            "dense upstream {:?} does not match output [{n}, {fo}]",
            upstream.shape()
        )));
    }
    let xd = x.data();
    let u = upstream.data();
    let w = d.weight.data();
    let mut dw = vec![0.0; fo * fi];
    let mut db = vec![0.0; fo];
    let mut dx = vec![0.0; n * fi];
    for s in 0..n {
        let xr = &xd[s * fi..(s + 1) * fi];
        let ur = &u[s * fo..(s + 1) * fo];
        let dxr = &mut dx[s * fi..(s + 1) * fi];
        for o in 0..fo {
            let uo = ur[o];
            db[o] += uo;
            let wr = &w[o * fi..(o + 1) * fi];
            let dwr = &mut dw[o * fi..(o + 1) * fi];
            for i in 0..fi {
                dwr[i] += uo * xr[i];
                dxr[i] += uo * wr[i];
            }
        }
    }
    Ok((
        vec![
            Tensor::new(vec![fo, fi], dw)?,
            Tensor::new(vec![fo], db)?,
        ],
        Tensor::new(x.shape().to_vec(), dx)?,
    ))
}

fn conv2d_forward(c: &Conv2d, x: &Tensor) -> Result<Tensor> {
    let out_shape = Layer::Conv2d(c.clone()).out_shape(x.shape())?;
    let (n, ic, h, w) = dims4(x.shape());
    let (oc, k, s, p) = (c.out_channels, c.kernel, c.stride as isize, c.padding as isize);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let xd = x.data();
    let wd = c.weight.data();
    let bd = c.bias.data();
    let mut y = vec![0.0; n * oc * oh * ow];
    for ni in 0..n {
        for o in 0..oc {
            let yb = (ni * oc + o) * oh * ow;
            for r in 0..oh {
                let ih0 = r as isize * s - p;
                for q in 0..ow {
                    let iw0 = q as isize * s - p;
                    let mut acc = bd[o];
                    for ci in 0..ic {
                        let xb = (ni * ic + ci) * h * w;
                        let wb = ((o * ic + ci) * k) * k;
                        for ku in 0..k {
                            let ih = ih0 + ku as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = xb + ih as usize * w;
                            let wrow = wb + ku * k;
                            for kv in 0..k {
                                let iw = iw0 + kv as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                acc += xd[xrow + iw as usize] * wd[wrow + kv];
                            }
                        }
                    }
                    y[yb + r * ow + q] = acc;
                }
            }
        }
    }
    Tensor::new(out_shape, y)
}

fn conv2d_backward(c: &Conv2d, x: &Tensor, upstream: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
    let out_shape = Layer::Conv2d(c.clone()).out_shape(x.shape())?;
    if upstream.shape() != out_shape {
        return Err(Error::config(format!(
            "conv2d upstream {:?} does not match output {:?}",
            upstream.shape(),
            out_shape
        )));
    }
    let (n, ic, h, w) = dims4(x.shape());
    let (oc, k, s, p) = (c.out_channels, c.kernel, c.stride as isize, c.padding as isize);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let xd = x.data();
    let wd = c.weight.data();
    let u = upstream.data();
    let mut dw = vec![0.0; oc * ic * k * k];
    let mut db = vec![0.0; oc];
    let mut dx = vec![0.0; n * ic * h * w];
    for ni in 0..n {
        for o in 0..oc {
            let ub = (ni * oc + o) * oh * ow;
            for r in 0..oh {
                let ih0 = r as isize * s - p;
                for q in 0..ow {
                    let uo = u[ub + r * ow + q];
                    db[o] += uo;
                    if uo == 0.0 {
                        continue;
                    }
                    let iw0 = q as isize * s - p;
                    for ci in 0..ic {
                        let xb = (ni * ic + ci) * h * w;
                        let wb = ((o * ic + ci) * k) * k;
                        for ku in 0..k {
                            let ih = ih0 + ku as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = xb + ih as usize * w;
                            let wrow = wb + ku * k;
                            for kv in 0..k {
                                let iw = iw0 + kv as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                dw[wrow + kv] += uo * xd[xrow + iw as usize];
                                dx[xrow + iw as usize] += uo * wd[wrow + kv];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        vec![
            Tensor::new(vec![oc, ic, k, k], dw)?,
            Tensor::new(vec![oc], db)?,
        ],
        Tensor::new(x.shape().to_vec(), dx)?,
    ))
}

fn avgpool_forward(p: &AvgPool2d, x: &Tensor) -> Result<Tensor> {
    let out_shape = Layer::AvgPool2d(p.clone()).out_shape(x.shape())?;
    let (n, c, h, w) = dims4(x.shape());
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let (k, s) = (p.kernel, p.stride);
    let inv = 1.0 / (k * k) as f64;
    let xd = x.data();
    let mut y = vec![0.0; n * c * oh * ow];
    for nc in 0..n * c {
        let xb = nc * h * w;
        let yb = nc * oh * ow;
        for r in 0..oh {
            for q in 0..ow {
                let mut acc = 0.0;
                for ku in 0..k {
                    let row = xb + (r * s + ku) * w + q * s;
                    for kv in 0..k {
                        acc += xd[row + kv];
                    }
                }
                y[yb + r * ow + q] = acc * inv;
            }
        }
    }
    Tensor::new(out_shape, y)
}

fn avgpool_backward(p: &AvgPool2d, x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    let out_shape = Layer::AvgPool2d(p.clone()).out_shape(x.shape())?;
    if upstream.shape() != out_shape {
        return Err(Error::config(format!(
            "avgpool2d upstream {:?} does not match output {:?}",
            upstream.shape(),
            out_shape
        )));
    }
    let (n, c, h, w) = dims4(x.shape());
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let (k, s) = (p.kernel, p.stride);
    let inv = 1.0 / (k * k) as f64;
    let u = upstream.data();
    let mut dx = vec![0.0; n * c * h * w];
    for nc in 0..n * c {
        let xb = nc * h * w;
        let ub = nc * oh * ow;
        for r in 0..oh {
            for q in 0..ow {
                let g = u[ub + r * ow + q] * inv;
                for ku in 0..k {
                    let row = xb + (r * s + ku) * w + q * s;
                    for kv in 0..k {
                        dx[row + kv] += g;
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

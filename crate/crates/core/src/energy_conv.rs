//! Convolutional energy: a stack of valid convolutions, non-overlapping max
//! pools and dense layers whose final activations are summed, plus the same
//! quadratic prior as the dense model.
//!
//! Activations are `[channels, height, width]` maps until the first dense
//! layer, which flattens its input row-major.
//!
//! A convolution layer computes `z_j = Σ_k valid(h_k, flip(W_jk)) + b_j`.
//! Its backward step gates the incoming gradient by `σ(z_j)` and then
//! full-correlates with the unflipped filter. A pool layer sends each
//! gradient entry back to the recorded argmax position and zero elsewhere.

use serde::{Deserialize, Serialize};

use crate::energy_dense::glorot;
use crate::error::{DsebmError, Result};
use crate::model::Parameters;
use crate::numerics::{sigmoid, softplus, xcorr_full_acc, xcorr_valid_acc, RngStream, Tensor};

#[cfg(test)]
thread_local! {
    /// Negates the convolution backward step; used to prove the gradient
    /// checks can fail.
    pub(crate) static FLIP_CONV_BACKWARD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Shape-only description of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv { filters: usize, size: usize },
    Pool { window: usize },
    Dense { units: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvLayer {
    /// `w` is `K_out x K_in x k x k`, `b` has `K_out` entries.
    Conv { w: Tensor, b: Tensor },
    MaxPool { window: usize },
    /// `w` is `n_in x K` over the flattened input.
    Dense { w: Tensor, b: Tensor },
}

impl ConvLayer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            ConvLayer::Conv { w, .. } => LayerSpec::Conv {
                filters: w.shape()[0],
                size: w.shape()[2],
            },
            ConvLayer::MaxPool { window } => LayerSpec::Pool { window: *window },
            ConvLayer::Dense { b, .. } => LayerSpec::Dense { units: b.len() },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvEnergyParams {
    input_shape: [usize; 3],
    layers: Vec<ConvLayer>,
    b_prime: Tensor,
}

/// Output shape of a layer given its input shape.
fn next_shape(spec: &LayerSpec, shape: &[usize], index: usize) -> Result<Vec<usize>> {
    let err = |msg: String| Err(DsebmError::Shape(format!("layer {index}: {msg}")));
    match (*spec, shape) {
        (LayerSpec::Conv { filters, size }, &[_, h, w]) => {
            if filters == 0 || size == 0 {
                return err("filters and size must be positive".into());
            }
            if size > h || size > w {
                return err(format!("{size}x{size} filter exceeds {h}x{w} input"));
            }
            Ok(vec![filters, h - size + 1, w - size + 1])
        }
        (LayerSpec::Pool { window }, &[c, h, w]) => {
            if window == 0 || h % window != 0 || w % window != 0 {
                return err(format!("pool window {window} does not divide {h}x{w}"));
            }
            Ok(vec![c, h / window, w / window])
        }
        (LayerSpec::Dense { units }, _) => {
            if units == 0 {
                return err("dense width must be positive".into());
            }
            Ok(vec![units])
        }
        (_, s) => err(format!("spatial layer after dense output {s:?}")),
    }
}

/// Activation shapes `[input, after layer 1, ...]` implied by the specs.
pub fn shape_chain(input_shape: [usize; 3], specs: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    if input_shape.contains(&0) {
        return Err(DsebmError::Shape("input extents must be positive".into()));
    }
    let mut shapes = vec![input_shape.to_vec()];
    for (i, spec) in specs.iter().enumerate() {
        let next = next_shape(spec, shapes.last().unwrap(), i)?;
        shapes.push(next);
    }
    Ok(shapes)
}

/// Cached values of one layer during a forward pass.
#[derive(Debug, Clone)]
struct LayerCache {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    input: Vec<f64>,
    pre: Vec<f64>,
    argmax: Vec<usize>,
}

/// Forward pass results.
#[derive(Debug, Clone)]
pub struct ConvForward {
    pub energy: f64,
    caches: Vec<LayerCache>,
    output: Vec<f64>,
}

impl ConvForward {
    /// Activation of every layer, input first.
    pub fn activations(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.caches.iter().map(|c| c.input.as_slice()).collect();
        out.push(&self.output);
        out
    }

    /// Flat input positions selected by the pool layer at `index`, one per
    /// output entry; `None` for other layer kinds.
    pub fn pool_argmax(&self, index: usize) -> Option<&[usize]> {
        self.caches
            .get(index)
            .filter(|c| !c.argmax.is_empty())
            .map(|c| c.argmax.as_slice())
    }
}

fn conv_forward(w: &Tensor, b: &Tensor, input: &[f64], in_shape: &[usize]) -> Vec<f64> {
    let (k_out, k_in, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (h, wd) = (in_shape[1], in_shape[2]);
    let (oh, ow) = (h - kh + 1, wd - kw + 1);
    let fsize = kh * kw;
    let mut z = vec![0.0; k_out * oh * ow];
    let mut flipped = vec![0.0; fsize];
    for j in 0..k_out {
        let out = &mut z[j * oh * ow..(j + 1) * oh * ow];
        for k in 0..k_in {
            let off = (j * k_in + k) * fsize;
            flipped.copy_from_slice(&w.data()[off..off + fsize]);
            flipped.reverse();
            xcorr_valid_acc(&input[k * h * wd..(k + 1) * h * wd], h, wd, &flipped, kh, kw, out);
        }
        let bj = b.data()[j];
        out.iter_mut().for_each(|v| *v += bj);
    }
    z
}

/// `Σ_j full(grad_j, W_jk)` for every input channel `k`.
fn conv_adjoint_input(w: &Tensor, grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    let (k_out, k_in, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let (h, wd) = (in_shape[1], in_shape[2]);
    let fsize = kh * kw;
    let mut out = vec![0.0; k_in * h * wd];
    for j in 0..k_out {
        let g = &grad[j * oh * ow..(j + 1) * oh * ow];
        for k in 0..k_in {
            let off = (j * k_in + k) * fsize;
            xcorr_full_acc(g, oh, ow, &w.data()[off..off + fsize], kh, kw, &mut out[k * h * wd..(k + 1) * h * wd]);
        }
    }
    out
}

/// Gradient with respect to `W_jk` of `⟨weight_j, valid(data_k, flip(W_jk))⟩`
/// summed over all `j, k`: `flip(valid(data_k, weight_j))`.
fn conv_filter_grad(
    gw: &mut Tensor,
    data: &[f64],
    data_shape: &[usize],
    weight: &[f64],
    weight_shape: &[usize],
) {
    let (k_out, k_in, kh, kw) = (gw.shape()[0], gw.shape()[1], gw.shape()[2], gw.shape()[3]);
    let (h, wd) = (data_shape[1], data_shape[2]);
    let (oh, ow) = (weight_shape[1], weight_shape[2]);
    let fsize = kh * kw;
    let mut tmp = vec![0.0; fsize];
    for j in 0..k_out {
        let wj = &weight[j * oh * ow..(j + 1) * oh * ow];
        for k in 0..k_in {
            tmp.iter_mut().for_each(|v| *v = 0.0);
            xcorr_valid_acc(&data[k * h * wd..(k + 1) * h * wd], h, wd, wj, oh, ow, &mut tmp);
            let off = (j * k_in + k) * fsize;
            for (dst, src) in gw.data_mut()[off..off + fsize].iter_mut().zip(tmp.iter().rev()) {
                *dst += src;
            }
        }
    }
}

fn pool_forward(window: usize, input: &[f64], in_shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h / window, w / window);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for k in 0..c {
        for p in 0..oh {
            for q in 0..ow {
                let mut best = k * h * w + p * window * w + q * window;
                for i in 0..window {
                    for j in 0..window {
                        let idx = k * h * w + (p * window + i) * w + q * window + j;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

fn pool_route(argmax: &[usize], grad: &[f64], in_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; in_len];
    for (&idx, &g) in argmax.iter().zip(grad) {
        out[idx] += g;
    }
    out
}

impl ConvEnergyParams {
    pub fn new(input_shape: [usize; 3], layers: Vec<ConvLayer>, b_prime: Tensor) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(ConvLayer::spec).collect();
        let shapes = shape_chain(input_shape, &specs)?;
        if b_prime.shape() != input_shape {
            return Err(DsebmError::Shape(format!(
                "b_prime has shape {:?}, expected {input_shape:?}",
                b_prime.shape()
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            let in_shape = &shapes[i];
            let ok = match layer {
                ConvLayer::Conv { w, b } => {
                    w.rank() == 4 && w.shape()[1] == in_shape[0] && w.shape()[2] == w.shape()[3] && b.shape() == [w.shape()[0]]
                }
                ConvLayer::MaxPool { .. } => true,
                ConvLayer::Dense { w, b } => {
                    let n_in: usize = in_shape.iter().product();
                    w.rank() == 2 && w.shape()[0] == n_in && b.shape() == [w.shape()[1]]
                }
            };
            if !ok {
                return Err(DsebmError::Shape(format!(
                    "layer {i} parameters do not fit input {in_shape:?}"
                )));
            }
        }
        Ok(Self {
            input_shape,
            layers,
            b_prime,
        })
    }

    pub fn zeros(input_shape: [usize; 3], specs: &[LayerSpec]) -> Result<Self> {
        let shapes = shape_chain(input_shape, specs)?;
        let layers = specs
            .iter()
            .zip(&shapes)
            .map(|(spec, in_shape)| match *spec {
                LayerSpec::Conv { filters, size } => ConvLayer::Conv {
                    w: Tensor::zeros(&[filters, in_shape[0], size, size]),
                    b: Tensor::zeros(&[filters]),
                },
                LayerSpec::Pool { window } => ConvLayer::MaxPool { window },
                LayerSpec::Dense { units } => ConvLayer::Dense {
                    w: Tensor::zeros(&[in_shape.iter().product(), units]),
                    b: Tensor::zeros(&[units]),
                },
            })
            .collect();
        Self::new(input_shape, layers, Tensor::zeros(&input_shape))
    }

    /// Glorot-uniform filters and weights, zero biases, prior at `prior_center`.
    pub fn init(
        input_shape: [usize; 3],
        specs: &[LayerSpec],
        prior_center: &[f64],
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut p = Self::zeros(input_shape, specs)?;
        for layer in &mut p.layers {
            match layer {
                ConvLayer::Conv { w, .. } => {
                    let s = w.shape().to_vec();
                    let area = s[2] * s[3];
                    *w = glorot(rng, s[1] * area, s[0] * area, &s);
                }
                ConvLayer::Dense { w, .. } => {
                    let s = w.shape().to_vec();
                    *w = glorot(rng, s[0], s[1], &s);
                }
                ConvLayer::MaxPool { .. } => {}
            }
        }
        p.b_prime = Tensor::new(input_shape.to_vec(), prior_center.to_vec())?;
        Ok(p)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn b_prime(&self) -> &Tensor {
        &self.b_prime
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(ConvLayer::spec).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape {
            return Err(DsebmError::Shape(format!(
                "image has shape {:?}, model expects {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<ConvForward> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = x.data().to_vec();
        let mut shape = self.input_shape.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let out_shape = next_shape(&layer.spec(), &shape, i)?;
            let (pre, out, argmax) = match layer {
                ConvLayer::Conv { w, b } => {
                    let z = conv_forward(w, b, &act, &shape);
                    let h = z.iter().map(|&v| softplus(v)).collect();
                    (z, h, Vec::new())
                }
                ConvLayer::MaxPool { window } => {
                    let (h, argmax) = pool_forward(*window, &act, &shape);
                    (Vec::new(), h, argmax)
                }
                ConvLayer::Dense { w, b } => {
                    let mut z = w.t_matvec(&act);
                    z.iter_mut().zip(b.data()).for_each(|(zi, bi)| *zi += bi);
                    let h = z.iter().map(|&v| softplus(v)).collect();
                    (z, h, Vec::new())
                }
            };
            caches.push(LayerCache {
                in_shape: std::mem::replace(&mut shape, out_shape.clone()),
                out_shape,
                input: std::mem::replace(&mut act, out),
                pre,
                argmax,
            });
        }
        let prior: f64 = x
            .data()
            .iter()
            .zip(self.b_prime.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let energy = 0.5 * prior - act.iter().sum::<f64>();
        if !energy.is_finite() {
            return Err(DsebmError::NonFinite("convolutional energy".into()));
        }
        Ok(ConvForward {
            energy,
            caches,
            output: act,
        })
    }

    pub fn energy(&self, x: &Tensor) -> Result<f64> {
        Ok(self.forward(x)?.energy)
    }

    /// Backward sweep from an all-ones top gradient. Returns `h′` at every
    /// layer boundary (`h′_0` first).
    fn backward_sweep(&self, fwd: &ConvForward) -> Vec<Vec<f64>> {
        let depth = self.layers.len();
        let mut hp = vec![Vec::new(); depth + 1];
        hp[depth] = vec![1.0; fwd.output.len()];
        for l in (0..depth).rev() {
            let cache = &fwd.caches[l];
            hp[l] = match &self.layers[l] {
                ConvLayer::Conv { w, .. } => {
                    let g: Vec<f64> = cache
                        .pre
                        .iter()
                        .zip(&hp[l + 1])
                        .map(|(z, h)| sigmoid(*z) * h)
                        .collect();
                    #[allow(unused_mut)]
                    let mut back = conv_adjoint_input(w, &g, &cache.out_shape, &cache.in_shape);
                    #[cfg(test)]
                    if FLIP_CONV_BACKWARD.with(|f| f.get()) {
                        back.iter_mut().for_each(|v| *v = -*v);
                    }
                    back
                }
                ConvLayer::MaxPool { .. } => pool_route(&cache.argmax, &hp[l + 1], cache.input.len()),
                ConvLayer::Dense { w, .. } => {
                    let g: Vec<f64> = cache
                        .pre
                        .iter()
                        .zip(&hp[l + 1])
                        .map(|(z, h)| sigmoid(*z) * h)
                        .collect();
                    w.matvec(&g)
                }
            };
        }
        hp
    }

    /// `∇ₓE(x)`, shaped like the input image.
    pub fn score(&self, x: &Tensor) -> Result<Tensor> {
        let fwd = self.forward(x)?;
        let hp = self.backward_sweep(&fwd);
        let data = x
            .data()
            .iter()
            .zip(self.b_prime.data())
            .zip(&hp[0])
            .map(|((xi, bi), hi)| (xi - bi) - hi)
            .collect();
        Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), data))
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        x.sub(&self.score(x)?)
    }

    /// Loss `½‖clean − f(noisy)‖²` and its parameter gradient.
    pub fn param_grad(&self, clean: &Tensor, noisy: &Tensor) -> Result<(f64, Self)> {
        self.check_input(clean)?;
        let fwd = self.forward(noisy)?;
        let hp = self.backward_sweep(&fwd);
        let depth = self.layers.len();

        let residual: Vec<f64> = self
            .b_prime
            .data()
            .iter()
            .zip(&hp[0])
            .zip(clean.data())
            .map(|((b, h), c)| b + h - c)
            .collect();
        let loss = 0.5 * residual.iter().map(|r| r * r).sum::<f64>();
        if !loss.is_finite() {
            return Err(DsebmError::NonFinite("convolutional reconstruction loss".into()));
        }

        let mut grad = self.zeros_like();
        grad.b_prime.data_mut().copy_from_slice(&residual);

        // Adjoints through the backward sweep, bottom layer first.
        let mut hp_bar = residual;
        let mut z_bar: Vec<Vec<f64>> = vec![Vec::new(); depth];
        for l in 0..depth {
            let cache = &fwd.caches[l];
            let upper = &hp[l + 1];
            match (&self.layers[l], &mut grad.layers[l]) {
                (ConvLayer::Conv { w, .. }, ConvLayer::Conv { w: gw, .. }) => {
                    let u: Vec<f64> = cache.pre.iter().map(|&z| sigmoid(z)).collect();
                    let g: Vec<f64> = u.iter().zip(upper).map(|(a, b)| a * b).collect();
                    // hp_in = Σ_j full(g_j, W_jk): filter adjoint is flip(valid(hp̄_in, g)).
                    conv_filter_grad(gw, &hp_bar, &cache.in_shape, &g, &cache.out_shape);
                    let g_bar = conv_forward_nobias(w, &hp_bar, &cache.in_shape);
                    z_bar[l] = g_bar
                        .iter()
                        .zip(upper)
                        .zip(&u)
                        .map(|((gb, h), ui)| gb * h * ui * (1.0 - ui))
                        .collect();
                    hp_bar = g_bar.iter().zip(&u).map(|(gb, ui)| gb * ui).collect();
                }
                (ConvLayer::MaxPool { .. }, _) => {
                    hp_bar = cache.argmax.iter().map(|&i| hp_bar[i]).collect();
                }
                (ConvLayer::Dense { w, .. }, ConvLayer::Dense { w: gw, .. }) => {
                    let u: Vec<f64> = cache.pre.iter().map(|&z| sigmoid(z)).collect();
                    let g: Vec<f64> = u.iter().zip(upper).map(|(a, b)| a * b).collect();
                    gw.add_outer(&hp_bar, &g);
                    let g_bar = w.t_matvec(&hp_bar);
                    z_bar[l] = g_bar
                        .iter()
                        .zip(upper)
                        .zip(&u)
                        .map(|((gb, h), ui)| gb * h * ui * (1.0 - ui))
                        .collect();
                    hp_bar = g_bar.iter().zip(&u).map(|(gb, ui)| gb * ui).collect();
                }
                _ => unreachable!("gradient record mirrors parameter layout"),
            }
        }

        // Adjoints through the forward sweep, top layer first.
        let mut h_bar = vec![0.0; fwd.output.len()];
        for l in (0..depth).rev() {
            let cache = &fwd.caches[l];
            let need_input = l > 0;
            match (&self.layers[l], &mut grad.layers[l]) {
                (ConvLayer::Conv { w, .. }, ConvLayer::Conv { w: gw, b: gb }) => {
                    let zb: Vec<f64> = z_bar[l]
                        .iter()
                        .zip(&h_bar)
                        .zip(&cache.pre)
                        .map(|((a, hb), z)| a + hb * sigmoid(*z))
                        .collect();
                    let plane = cache.out_shape[1] * cache.out_shape[2];
                    for (j, b) in gb.data_mut().iter_mut().enumerate() {
                        *b += zb[j * plane..(j + 1) * plane].iter().sum::<f64>();
                    }
                    conv_filter_grad(gw, &cache.input, &cache.in_shape, &zb, &cache.out_shape);
                    if need_input {
                        h_bar = conv_adjoint_input(w, &zb, &cache.out_shape, &cache.in_shape);
                    }
                }
                (ConvLayer::MaxPool { .. }, _) => {
                    if need_input {
                        h_bar = pool_route(&cache.argmax, &h_bar, cache.input.len());
                    }
                }
                (ConvLayer::Dense { w, .. }, ConvLayer::Dense { w: gw, b: gb }) => {
                    let zb: Vec<f64> = z_bar[l]
                        .iter()
                        .zip(&h_bar)
                        .zip(&cache.pre)
                        .map(|((a, hb), z)| a + hb * sigmoid(*z))
                        .collect();
                    gw.add_outer(&cache.input, &zb);
                    gb.data_mut().iter_mut().zip(&zb).for_each(|(b, v)| *b += v);
                    if need_input {
                        h_bar = w.matvec(&zb);
                    }
                }
                _ => unreachable!("gradient record mirrors parameter layout"),
            }
        }
        Ok((loss, grad))
    }
}

/// `Σ_k valid(data_k, flip(W_jk))` without bias.
fn conv_forward_nobias(w: &Tensor, data: &[f64], in_shape: &[usize]) -> Vec<f64> {
    let zero = Tensor::zeros(&[w.shape()[0]]);
    conv_forward(w, &zero, data, in_shape)
}

impl Parameters for ConvEnergyParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let ConvLayer::Conv { w, b } | ConvLayer::Dense { w, b } = l {
                out.push(w);
                out.push(b);
            }
        }
        out.push(&self.b_prime);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let ConvLayer::Conv { w, b } | ConvLayer::Dense { w, b } = l {
                out.push(w);
                out.push(b);
            }
        }
        out.push(&mut self.b_prime);
        out
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if matches!(l, ConvLayer::Conv { .. } | ConvLayer::Dense { .. }) {
                out.push(format!("layers.{i}.w"));
                out.push(format!("layers.{i}.b"));
            }
        }
        out.push("b_prime".into());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy_dense::{DenseEnergyParams, DenseLayer};
    use crate::gradcheck::param_fd;
    use crate::numerics::{finite_diff_grad, relative_error, DEFAULT_FD_STEP};
    use std::f64::consts::LN_2;

    fn randomize(p: &mut ConvEnergyParams, rng: &mut RngStream, scale: f64) {
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.normal(scale);
            }
        }
    }

    fn image(rng: &mut RngStream, shape: [usize; 3]) -> Tensor {
        Tensor::new(shape.to_vec(), rng.normal_vec(shape.iter().product(), 1.0)).unwrap()
    }

    /// Direct quadruple loop over the convolution definition.
    fn conv_oracle(w: &Tensor, b: &Tensor, x: &[f64], shape: [usize; 3]) -> Vec<f64> {
        let (ko, ki, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let (h, wd) = (shape[1], shape[2]);
        let (oh, ow) = (h - k + 1, wd - k + 1);
        let mut out = vec![0.0; ko * oh * ow];
        for j in 0..ko {
            for p in 0..oh {
                for q in 0..ow {
                    let mut z = b.data()[j];
                    for c in 0..ki {
                        for i in 0..k {
                            for m in 0..k {
                                // true convolution with W̃ == correlation with W flipped twice
                                let wv = w.data()[((j * ki + c) * k + (k - 1 - i)) * k + (k - 1 - m)];
                                z += wv * x[(c * h + p + i) * wd + q + m];
                            }
                        }
                    }
                    out[(j * oh + p) * ow + q] = (1.0 + z.exp()).ln();
                }
            }
        }
        out
    }

    fn pool_oracle(x: &[f64], shape: [usize; 3], win: usize) -> Vec<f64> {
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let mut out = Vec::new();
        for k in 0..c {
            for p in 0..h / win {
                for q in 0..w / win {
                    let mut m = f64::NEG_INFINITY;
                    for i in 0..win {
                        for j in 0..win {
                            m = m.max(x[(k * h + p * win + i) * w + q * win + j]);
                        }
                    }
                    out.push(m);
                }
            }
        }
        out
    }

    #[test]
    fn unit_filter_is_elementwise_softplus() {
        let mut p = ConvEnergyParams::zeros([1, 3, 3], &[LayerSpec::Conv { filters: 1, size: 1 }]).unwrap();
        if let ConvLayer::Conv { w, .. } = &mut p.layers[0] {
            w.data_mut()[0] = 1.0;
        }
        let x = Tensor::new(vec![1, 3, 3], (0..9).map(|v| v as f64 - 4.0).collect()).unwrap();
        let fwd = p.forward(&x).unwrap();
        for (h, xv) in fwd.activations()[1].iter().zip(x.data()) {
            assert!((h - softplus(*xv)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_filters_give_log2_maps() {
        let p = ConvEnergyParams::zeros([2, 4, 4], &[LayerSpec::Conv { filters: 3, size: 3 }]).unwrap();
        let fwd = p.forward(&Tensor::filled(&[2, 4, 4], 0.7)).unwrap();
        assert!(fwd.activations()[1].iter().all(|&v| (v - LN_2).abs() < 1e-15));
        assert_eq!(fwd.activations()[1].len(), 3 * 2 * 2);
    }

    #[test]
    fn conv_layer_matches_loop_oracle() {
        let mut rng = RngStream::new(1);
        let shape = [2, 5, 5];
        let mut p = ConvEnergyParams::zeros(shape, &[LayerSpec::Conv { filters: 1, size: 3 }]).unwrap();
        randomize(&mut p, &mut rng, 0.5);
        let x = image(&mut rng, shape);
        let fwd = p.forward(&x).unwrap();
        let ConvLayer::Conv { w, b } = &p.layers[0] else { unreachable!() };
        let expected = conv_oracle(w, b, x.data(), shape);
        assert!(relative_error(fwd.activations()[1], &expected) < 1e-12);
    }

    #[test]
    fn pool_forward_cases() {
        let (v, arg) = pool_forward(2, &[1.0, 2.0, 3.0, 4.0], &[1, 2, 2]);
        assert_eq!(v, vec![4.0]);
        assert_eq!(arg, vec![3]); // row 1, column 1
        let (_, arg) = pool_forward(2, &[5.0; 16], &[1, 4, 4]);
        assert_eq!(arg, vec![0, 2, 8, 10]);

        let mut rng = RngStream::new(2);
        let x = rng.normal_vec(36, 1.0);
        let (v, arg) = pool_forward(3, &x, &[1, 6, 6]);
        assert_eq!(v, pool_oracle(&x, [1, 6, 6], 3));
        for (val, idx) in v.iter().zip(arg) {
            assert_eq!(*val, x[idx]);
        }
    }

    #[test]
    fn indivisible_pool_rejected() {
        assert!(ConvEnergyParams::zeros([1, 5, 5], &[LayerSpec::Pool { window: 2 }]).is_err());
        assert!(shape_chain([1, 6, 6], &[LayerSpec::Dense { units: 2 }, LayerSpec::Pool { window: 2 }]).is_err());
    }

    #[test]
    fn zero_network_energy() {
        let specs = [
            LayerSpec::Conv { filters: 2, size: 3 },
            LayerSpec::Pool { window: 2 },
            LayerSpec::Dense { units: 5 },
        ];
        let p = ConvEnergyParams::zeros([1, 6, 6], &specs).unwrap();
        let e = p.energy(&Tensor::zeros(&[1, 6, 6])).unwrap();
        assert!((e + 5.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn dense_only_stack_matches_dense_model() {
        let mut rng = RngStream::new(3);
        let specs = [LayerSpec::Dense { units: 4 }, LayerSpec::Dense { units: 3 }];
        let mut p = ConvEnergyParams::zeros([1, 2, 3], &specs).unwrap();
        randomize(&mut p, &mut rng, 0.6);
        let layers = p
            .layers
            .iter()
            .map(|l| match l {
                ConvLayer::Dense { w, b } => DenseLayer { w: w.clone(), b: b.clone() },
                _ => unreachable!(),
            })
            .collect();
        let dense = DenseEnergyParams::new(layers, p.b_prime.clone().reshape(vec![6]).unwrap()).unwrap();
        let x = image(&mut rng, [1, 2, 3]);
        let flat = x.clone().reshape(vec![6]).unwrap();
        assert!((p.energy(&x).unwrap() - dense.energy(&flat).unwrap()).abs() < 1e-12);
        assert!(relative_error(p.score(&x).unwrap().data(), dense.score(&flat).unwrap().data()) < 1e-12);
    }

    #[test]
    fn full_stack_matches_oracle() {
        let mut rng = RngStream::new(4);
        let specs = [
            LayerSpec::Conv { filters: 2, size: 3 },
            LayerSpec::Pool { window: 2 },
            LayerSpec::Dense { units: 3 },
        ];
        let mut p = ConvEnergyParams::zeros([1, 6, 6], &specs).unwrap();
        randomize(&mut p, &mut rng, 0.5);
        let x = image(&mut rng, [1, 6, 6]);
        let ConvLayer::Conv { w, b } = &p.layers[0] else { unreachable!() };
        let h1 = conv_oracle(w, b, x.data(), [1, 6, 6]);
        let h2 = pool_oracle(&h1, [2, 4, 4], 2);
        let ConvLayer::Dense { w, b } = &p.layers[2] else { unreachable!() };
        let mut top = 0.0;
        for j in 0..3 {
            let mut z = b.data()[j];
            for (i, hv) in h2.iter().enumerate() {
                z += w.at(i, j) * hv;
            }
            top += (1.0 + z.exp()).ln();
        }
        let prior: f64 = x.data().iter().zip(p.b_prime.data()).map(|(a, c)| (a - c).powi(2)).sum();
        assert!((p.energy(&x).unwrap() - (0.5 * prior - top)).abs() < 1e-12);
    }

    #[test]
    fn zero_filters_score_is_prior_gradient() {
        let mut p = ConvEnergyParams::zeros([1, 4, 4], &[LayerSpec::Conv { filters: 2, size: 2 }]).unwrap();
        let mut rng = RngStream::new(5);
        p.b_prime = image(&mut rng, [1, 4, 4]);
        let x = image(&mut rng, [1, 4, 4]);
        assert_eq!(p.score(&x).unwrap(), x.sub(&p.b_prime).unwrap());
        // zero score: reconstruction is identity
        assert_eq!(p.reconstruct(&p.b_prime.clone()).unwrap(), p.b_prime);
    }

    fn check_score(specs: &[LayerSpec], shape: [usize; 3], seed: u64) -> f64 {
        let mut rng = RngStream::new(seed);
        let mut p = ConvEnergyParams::zeros(shape, specs).unwrap();
        randomize(&mut p, &mut rng, 0.4);
        let x = image(&mut rng, shape);
        let analytic = p.score(&x).unwrap();
        let numeric = finite_diff_grad(|t| p.energy(t).unwrap(), &x, DEFAULT_FD_STEP).unwrap();
        relative_error(analytic.data(), numeric.data())
    }

    #[test]
    fn score_matches_finite_differences() {
        let conv_only = [LayerSpec::Conv { filters: 2, size: 3 }, LayerSpec::Conv { filters: 2, size: 2 }];
        assert!(check_score(&conv_only, [2, 7, 7], 6) < 1e-6);
        let mixed = [
            LayerSpec::Conv { filters: 2, size: 3 },
            LayerSpec::Pool { window: 2 },
            LayerSpec::Dense { units: 3 },
        ];
        assert!(check_score(&mixed, [1, 8, 8], 7) < 1e-6);
    }

    #[test]
    fn sign_flip_in_backward_is_caught() {
        let specs = [LayerSpec::Conv { filters: 2, size: 3 }];
        FLIP_CONV_BACKWARD.with(|f| f.set(true));
        let err = check_score(&specs, [1, 6, 6], 8);
        FLIP_CONV_BACKWARD.with(|f| f.set(false));
        assert!(err > 1e-2, "mutated backward passed with error {err}");
    }

    #[test]
    fn pool_backward_routes_to_argmax_only() {
        let mut rng = RngStream::new(9);
        let specs = [LayerSpec::Pool { window: 2 }, LayerSpec::Dense { units: 3 }];
        let mut p = ConvEnergyParams::zeros([1, 4, 4], &specs).unwrap();
        randomize(&mut p, &mut rng, 0.5);
        let x = image(&mut rng, [1, 4, 4]);
        let fwd = p.forward(&x).unwrap();
        let hp = p.backward_sweep(&fwd);
        let arg = fwd.pool_argmax(0).unwrap();
        for (i, v) in hp[0].iter().enumerate() {
            if !arg.contains(&i) {
                assert_eq!(*v, 0.0);
            }
        }
        let routed: f64 = hp[0].iter().sum();
        let incoming: f64 = hp[1].iter().sum();
        assert!((routed - incoming).abs() < 1e-14);
    }

    #[test]
    fn reconstruct_plus_score_is_input() {
        let mut rng = RngStream::new(10);
        let specs = [LayerSpec::Conv { filters: 2, size: 3 }, LayerSpec::Dense { units: 2 }];
        let mut p = ConvEnergyParams::zeros([1, 5, 5], &specs).unwrap();
        randomize(&mut p, &mut rng, 0.5);
        let x = image(&mut rng, [1, 5, 5]);
        let sum = p.reconstruct(&x).unwrap().add(&p.score(&x).unwrap()).unwrap();
        assert!(relative_error(sum.data(), x.data()) < 1e-15);
    }

    fn loss(p: &ConvEnergyParams, clean: &Tensor, noisy: &Tensor) -> f64 {
        0.5 * p.reconstruct(noisy).unwrap().sub(clean).unwrap().norm_sq()
    }

    #[test]
    fn param_grad_matches_finite_differences() {
        let mut rng = RngStream::new(11);
        let specs = [
            LayerSpec::Conv { filters: 2, size: 3 },
            LayerSpec::Pool { window: 2 },
            LayerSpec::Dense { units: 3 },
        ];
        let mut p = ConvEnergyParams::zeros([1, 6, 6], &specs).unwrap();
        randomize(&mut p, &mut rng, 0.4);
        let clean = image(&mut rng, [1, 6, 6]);
        let noisy = clean.add(&image(&mut rng, [1, 6, 6]).scale(0.2)).unwrap();
        let (l, grad) = p.param_grad(&clean, &noisy).unwrap();
        assert!((l - loss(&p, &clean, &noisy)).abs() < 1e-12);
        let numeric = param_fd(&p, |q| loss(q, &clean, &noisy), DEFAULT_FD_STEP);
        assert!(relative_error(&grad.flatten(), &numeric) < 1e-5);
    }

    #[test]
    fn stacked_conv_param_grad() {
        let mut rng = RngStream::new(12);
        let specs = [LayerSpec::Conv { filters: 2, size: 2 }, LayerSpec::Conv { filters: 1, size: 2 }];
        let mut p = ConvEnergyParams::zeros([2, 5, 5], &specs).unwrap();
        randomize(&mut p, &mut rng, 0.4);
        let clean = image(&mut rng, [2, 5, 5]);
        let noisy = image(&mut rng, [2, 5, 5]);
        let (_, grad) = p.param_grad(&clean, &noisy).unwrap();
        let numeric = param_fd(&p, |q| loss(q, &clean, &noisy), DEFAULT_FD_STEP);
        assert!(relative_error(&grad.flatten(), &numeric) < 1e-5);
    }

    #[test]
    fn perfect_reconstruction_zero_gradient() {
        let mut rng = RngStream::new(13);
        let specs = [LayerSpec::Conv { filters: 1, size: 3 }, LayerSpec::Dense { units: 2 }];
        let mut p = ConvEnergyParams::zeros([1, 6, 6], &specs).unwrap();
        randomize(&mut p, &mut rng, 0.4);
        let noisy = image(&mut rng, [1, 6, 6]);
        let clean = p.reconstruct(&noisy).unwrap();
        let (l, g) = p.param_grad(&clean, &noisy).unwrap();
        assert!(l < 1e-28);
        assert!(g.flatten().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn realized_shapes_follow_descriptors() {
        let specs = [
            LayerSpec::Conv { filters: 3, size: 3 },
            LayerSpec::Pool { window: 2 },
            LayerSpec::Conv { filters: 2, size: 2 },
            LayerSpec::Dense { units: 4 },
        ];
        let p = ConvEnergyParams::zeros([1, 8, 8], &specs).unwrap();
        let fwd = p.forward(&Tensor::zeros(&[1, 8, 8])).unwrap();
        let chain = shape_chain([1, 8, 8], &specs).unwrap();
        assert_eq!(chain, vec![vec![1, 8, 8], vec![3, 6, 6], vec![3, 3, 3], vec![2, 2, 2], vec![4]]);
        for (act, shape) in fwd.activations().iter().zip(&chain) {
            assert_eq!(act.len(), shape.iter().product::<usize>());
        }
    }
}

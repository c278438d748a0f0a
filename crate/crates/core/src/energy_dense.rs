//! Fully connected energy: a stack of affine + softplus layers whose top
//! activations are summed, plus a quadratic prior around `b_prime`.
//!
//! `E(x) = ½‖x − b′‖² − Σ_j h_{L,j}` with `h_l = softplus(W_lᵀ h_{l−1} + b_l)`.
//! The input gradient is obtained by one backward sweep starting from an
//! all-ones vector at the top layer, and the reconstruction is `x − ∇ₓE`.

use crate::error::{DsebmError, Result};
use crate::model::Parameters;
use crate::numerics::{sigmoid, softplus, RngStream, Tensor};

/// One affine + softplus layer. `w` is `K_in x K_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseEnergyParams {
    layers: Vec<DenseLayer>,
    b_prime: Tensor,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct DenseForward {
    pub energy: f64,
    /// `h_0 = x, h_1, ..., h_L`.
    pub activations: Vec<Vec<f64>>,
    /// `z_1, ..., z_L`, the pre-activations.
    pub pre_activations: Vec<Vec<f64>>,
}

pub(crate) fn glorot(rng: &mut RngStream, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-limit, limit)).collect();
    Tensor::from_parts_unchecked(shape.to_vec(), data)
}

impl DenseEnergyParams {
    pub fn new(layers: Vec<DenseLayer>, b_prime: Tensor) -> Result<Self> {
        if layers.is_empty() {
            return Err(DsebmError::InvalidArgument("at least one layer is required".into()));
        }
        if b_prime.rank() != 1 {
            return Err(DsebmError::Shape("b_prime must be a vector".into()));
        }
        let mut width = b_prime.len();
        for (i, layer) in layers.iter().enumerate() {
            match (layer.w.shape(), layer.b.shape()) {
                (&[rows, cols], &[nb]) if rows == width && cols == nb => width = cols,
                (ws, bs) => {
                    return Err(DsebmError::Shape(format!(
                        "layer {i}: expected W {width}xK and b of length K, got {ws:?} and {bs:?}"
                    )))
                }
            }
        }
        Ok(Self { layers, b_prime })
    }

    /// All-zero parameters for the given widths.
    pub fn zeros(input_dim: usize, hidden: &[usize]) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut prev = input_dim;
        for &k in hidden {
            if k == 0 {
                return Err(DsebmError::InvalidArgument("layer width must be positive".into()));
            }
            layers.push(DenseLayer {
                w: Tensor::zeros(&[prev, k]),
                b: Tensor::zeros(&[k]),
            });
            prev = k;
        }
        if input_dim == 0 {
            return Err(DsebmError::InvalidArgument("input dimension must be positive".into()));
        }
        Self::new(layers, Tensor::zeros(&[input_dim]))
    }

    /// Uniform Glorot weights, zero biases, and `b_prime` at `prior_center`.
    pub fn init(hidden: &[usize], prior_center: &[f64], rng: &mut RngStream) -> Result<Self> {
        let mut params = Self::zeros(prior_center.len(), hidden)?;
        for layer in &mut params.layers {
            let (rows, cols) = (layer.w.shape()[0], layer.w.shape()[1]);
            layer.w = glorot(rng, rows, cols, &[rows, cols]);
        }
        params.b_prime = Tensor::new(vec![prior_center.len()], prior_center.to_vec())?;
        Ok(params)
    }

    pub fn input_dim(&self) -> usize {
        self.b_prime.len()
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.b.len()).collect()
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn b_prime(&self) -> &Tensor {
        &self.b_prime
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(DsebmError::Shape(format!(
                "input has {} entries, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<DenseForward> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(x.data().to_vec());
        for layer in &self.layers {
            let mut z = layer.w.t_matvec(activations.last().unwrap());
            for (zi, bi) in z.iter_mut().zip(layer.b.data()) {
                *zi += bi;
            }
            activations.push(z.iter().map(|&v| softplus(v)).collect());
            pre_activations.push(z);
        }
        let prior: f64 = x
            .data()
            .iter()
            .zip(self.b_prime.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let energy = 0.5 * prior - activations.last().unwrap().iter().sum::<f64>();
        if !energy.is_finite() {
            return Err(DsebmError::NonFinite("dense energy".into()));
        }
        Ok(DenseForward {
            energy,
            activations,
            pre_activations,
        })
    }

    pub fn energy(&self, x: &Tensor) -> Result<f64> {
        Ok(self.forward(x)?.energy)
    }

    /// Backward sweep from `h′_L = 1`; returns `h′_0, ..., h′_L` and the
    /// gates `σ(z_l)`.
    fn backward_sweep(&self, fwd: &DenseForward) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let depth = self.layers.len();
        let gates: Vec<Vec<f64>> = fwd
            .pre_activations
            .iter()
            .map(|z| z.iter().map(|&v| sigmoid(v)).collect())
            .collect();
        let mut hp = vec![Vec::new(); depth + 1];
        hp[depth] = vec![1.0; self.layers[depth - 1].b.len()];
        for l in (0..depth).rev() {
            let g: Vec<f64> = gates[l].iter().zip(&hp[l + 1]).map(|(u, h)| u * h).collect();
            hp[l] = self.layers[l].w.matvec(&g);
        }
        (hp, gates)
    }

    /// `∇ₓE(x)`.
    pub fn score(&self, x: &Tensor) -> Result<Tensor> {
        let fwd = self.forward(x)?;
        let (hp, _) = self.backward_sweep(&fwd);
        let data = x
            .data()
            .iter()
            .zip(self.b_prime.data())
            .zip(&hp[0])
            .map(|((xi, bi), hi)| (xi - bi) - hi)
            .collect();
        Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), data))
    }

    /// `x − ∇ₓE(x)`.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let score = self.score(x)?;
        x.sub(&score)
    }

    /// Loss `½‖clean − f(noisy)‖²` and its gradient with respect to every
    /// parameter, by reverse accumulation through forward and backward sweeps.
    pub fn param_grad(&self, clean: &Tensor, noisy: &Tensor) -> Result<(f64, Self)> {
        self.check_input(clean)?;
        let fwd = self.forward(noisy)?;
        let (hp, gates) = self.backward_sweep(&fwd);
        let depth = self.layers.len();

        let recon = self.reconstruct(noisy)?;
        let residual: Vec<f64> = recon.data().iter().zip(clean.data()).map(|(f, c)| f - c).collect();
        let loss = 0.5 * residual.iter().map(|r| r * r).sum::<f64>();
        if !loss.is_finite() {
            return Err(DsebmError::NonFinite("dense reconstruction loss".into()));
        }

        let mut grad = self.zeros_like();
        grad.b_prime = Tensor::from_parts_unchecked(vec![residual.len()], residual.clone());

        // Adjoints through the backward sweep h′_{l−1} = W_l (σ(z_l) ⊙ h′_l).
        let mut hp_bar = residual;
        let mut z_bar = vec![Vec::new(); depth];
        for l in 0..depth {
            let u = &gates[l];
            let g: Vec<f64> = u.iter().zip(&hp[l + 1]).map(|(a, b)| a * b).collect();
            grad.layers[l].w.add_outer(&hp_bar, &g);
            let g_bar = self.layers[l].w.t_matvec(&hp_bar);
            z_bar[l] = g_bar
                .iter()
                .zip(&hp[l + 1])
                .zip(u)
                .map(|((gb, h), ui)| gb * h * ui * (1.0 - ui))
                .collect();
            hp_bar = g_bar.iter().zip(u).map(|(gb, ui)| gb * ui).collect();
        }

        // Adjoints through the forward sweep; h_L itself does not feed f.
        let mut h_bar = vec![0.0; self.layers[depth - 1].b.len()];
        for l in (0..depth).rev() {
            let zb: Vec<f64> = z_bar[l]
                .iter()
                .zip(&h_bar)
                .zip(&fwd.pre_activations[l])
                .map(|((a, hb), z)| a + hb * sigmoid(*z))
                .collect();
            grad.layers[l].w.add_outer(&fwd.activations[l], &zb);
            for (gb, v) in grad.layers[l].b.data_mut().iter_mut().zip(&zb) {
                *gb += v;
            }
            if l > 0 {
                h_bar = self.layers[l].w.matvec(&zb);
            }
        }
        Ok((loss, grad))
    }
}

impl Parameters for DenseEnergyParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &self.layers {
            out.push(&l.w);
            out.push(&l.b);
        }
        out.push(&self.b_prime);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.b_prime);
        out
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.layers.len() {
            out.push(format!("layers.{i}.w"));
            out.push(format!("layers.{i}.b"));
        }
        out.push("b_prime".into());
        out
    }
}

//! Sequence energy: one softplus-RBM energy per step with the two bias
//! vectors emitted by a softplus RNN.
//!
//! The biases for step `t` come from the hidden state *before* `x^t` is
//! consumed, so step `t`'s parameters depend only on `x^1..x^{t-1}`. The
//! per-step score holds those biases fixed.

use crate::energy_dense::glorot;
use crate::error::{DsebmError, Result};
use crate::model::Parameters;
use crate::numerics::{sigmoid, softplus, RngStream, Tensor};

/// Nonempty list of equal-width step vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    steps: Vec<Tensor>,
}

impl Sequence {
    pub fn new(steps: Vec<Tensor>) -> Result<Self> {
        let d = match steps.first() {
            Some(s) => s.len(),
            None => return Err(DsebmError::Empty("sequence has no steps".into())),
        };
        for (t, s) in steps.iter().enumerate() {
            if s.rank() != 1 || s.len() != d {
                return Err(DsebmError::Shape(format!(
                    "step {t} has shape {:?}, expected [{d}]",
                    s.shape()
                )));
            }
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[Tensor] {
        &self.steps
    }

    pub fn into_steps(self) -> Vec<Tensor> {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.steps[0].len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentEnergyParams {
    /// `d x K_ebm`, shared by every step.
    pub w: Tensor,
    pub b: Tensor,
    pub b_prime: Tensor,
    /// `K_rnn x K_rnn`.
    pub w_hh: Tensor,
    /// `K_rnn x d`.
    pub w_hx: Tensor,
    pub b_h: Tensor,
    /// `K_ebm x K_rnn`.
    pub w_bh: Tensor,
    /// `d x K_rnn`.
    pub w_bph: Tensor,
    pub h0: Tensor,
}

/// Adaptive biases for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBiases {
    pub b: Vec<f64>,
    pub b_prime: Vec<f64>,
}

/// Everything the backward pass needs from a roll over a sequence.
struct Rollout {
    biases: Vec<StepBiases>,
    /// Hidden state consumed by step t: `h^{t-1}`, starting with `h0`.
    prev_hidden: Vec<Vec<f64>>,
    /// RNN pre-activations `a^t`.
    pre: Vec<Vec<f64>>,
}

impl RecurrentEnergyParams {
    pub fn zeros(input_dim: usize, rnn_hidden: usize, ebm_hidden: usize) -> Result<Self> {
        if input_dim == 0 || rnn_hidden == 0 || ebm_hidden == 0 {
            return Err(DsebmError::InvalidArgument("all widths must be positive".into()));
        }
        Ok(Self {
            w: Tensor::zeros(&[input_dim, ebm_hidden]),
            b: Tensor::zeros(&[ebm_hidden]),
            b_prime: Tensor::zeros(&[input_dim]),
            w_hh: Tensor::zeros(&[rnn_hidden, rnn_hidden]),
            w_hx: Tensor::zeros(&[rnn_hidden, input_dim]),
            b_h: Tensor::zeros(&[rnn_hidden]),
            w_bh: Tensor::zeros(&[ebm_hidden, rnn_hidden]),
            w_bph: Tensor::zeros(&[input_dim, rnn_hidden]),
            h0: Tensor::zeros(&[rnn_hidden]),
        })
    }

    /// Glorot-initialized step weights and RNN weights; the bias read-outs
    /// and `h0` start at zero so the untrained model is a plain RBM energy.
    pub fn init(
        rnn_hidden: usize,
        ebm_hidden: usize,
        prior_center: &[f64],
        rng: &mut RngStream,
    ) -> Result<Self> {
        let d = prior_center.len();
        let mut p = Self::zeros(d, rnn_hidden, ebm_hidden)?;
        p.w = glorot(rng, d, ebm_hidden, &[d, ebm_hidden]);
        p.w_hh = glorot(rng, rnn_hidden, rnn_hidden, &[rnn_hidden, rnn_hidden]);
        p.w_hx = glorot(rng, d, rnn_hidden, &[rnn_hidden, d]);
        p.b_prime = Tensor::new(vec![d], prior_center.to_vec())?;
        Ok(p)
    }

    /// Checks every extent against `w`'s `d x K_ebm` and `w_hh`'s `K_rnn`.
    pub fn validate(&self) -> Result<()> {
        let (d, ke) = match self.w.shape() {
            &[d, k] => (d, k),
            s => return Err(DsebmError::Shape(format!("w must be rank 2, got {s:?}"))),
        };
        let kr = self.h0.len();
        let expect: [(&str, &Tensor, Vec<usize>); 8] = [
            ("b", &self.b, vec![ke]),
            ("b_prime", &self.b_prime, vec![d]),
            ("w_hh", &self.w_hh, vec![kr, kr]),
            ("w_hx", &self.w_hx, vec![kr, d]),
            ("b_h", &self.b_h, vec![kr]),
            ("w_bh", &self.w_bh, vec![ke, kr]),
            ("w_bph", &self.w_bph, vec![d, kr]),
            ("h0", &self.h0, vec![kr]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(DsebmError::Shape(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.b_prime.len()
    }

    pub fn rnn_hidden(&self) -> usize {
        self.h0.len()
    }

    pub fn ebm_hidden(&self) -> usize {
        self.b.len()
    }

    fn check(&self, seq: &Sequence) -> Result<()> {
        if seq.dim() != self.input_dim() {
            return Err(DsebmError::Shape(format!(
                "steps have {} entries, model expects {}",
                seq.dim(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn rollout(&self, seq: &Sequence) -> Result<Rollout> {
        self.check(seq)?;
        let mut h = self.h0.data().to_vec();
        let mut biases = Vec::with_capacity(seq.len());
        let mut prev_hidden = Vec::with_capacity(seq.len());
        let mut pre = Vec::with_capacity(seq.len());
        for x in seq.steps() {
            let b = add(&self.w_bh.matvec(&h), self.b.data());
            let b_prime = add(&self.w_bph.matvec(&h), self.b_prime.data());
            biases.push(StepBiases { b, b_prime });
            let mut a = self.w_hh.matvec(&h);
            for ((ai, xi), bi) in a.iter_mut().zip(self.w_hx.matvec(x.data())).zip(self.b_h.data()) {
                *ai += xi + bi;
            }
            prev_hidden.push(std::mem::replace(
                &mut h,
                a.iter().map(|&v| softplus(v)).collect(),
            ));
            pre.push(a);
        }
        Ok(Rollout {
            biases,
            prev_hidden,
            pre,
        })
    }

    /// Adaptive biases `(b^t, b′^t)` for every step.
    pub fn roll(&self, seq: &Sequence) -> Result<Vec<StepBiases>> {
        Ok(self.rollout(seq)?.biases)
    }

    /// Energy of one step with its biases held fixed.
    pub fn step_energy(&self, x: &[f64], bias: &StepBiases) -> f64 {
        let prior: f64 = x.iter().zip(&bias.b_prime).map(|(a, b)| (a - b) * (a - b)).sum();
        let z = add(&self.w.t_matvec(x), &bias.b);
        0.5 * prior - z.iter().map(|&v| softplus(v)).sum::<f64>()
    }

    fn step_score(&self, x: &[f64], bias: &StepBiases) -> Vec<f64> {
        let u: Vec<f64> = add(&self.w.t_matvec(x), &bias.b)
            .iter()
            .map(|&v| sigmoid(v))
            .collect();
        let wu = self.w.matvec(&u);
        x.iter()
            .zip(&bias.b_prime)
            .zip(wu)
            .map(|((xi, bi), wi)| (xi - bi) - wi)
            .collect()
    }

    /// Total energy and per-step energies.
    pub fn seq_energy(&self, seq: &Sequence) -> Result<(f64, Vec<f64>)> {
        let roll = self.rollout(seq)?;
        let per_step: Vec<f64> = seq
            .steps()
            .iter()
            .zip(&roll.biases)
            .map(|(x, bias)| self.step_energy(x.data(), bias))
            .collect();
        let total = per_step.iter().sum::<f64>();
        if !total.is_finite() {
            return Err(DsebmError::NonFinite("sequence energy".into()));
        }
        Ok((total, per_step))
    }

    /// Per-step `∇_{x^t} E(x^t; θ^t)` with `θ^t` held fixed.
    pub fn seq_score(&self, seq: &Sequence) -> Result<Vec<Tensor>> {
        let roll = self.rollout(seq)?;
        Ok(seq
            .steps()
            .iter()
            .zip(&roll.biases)
            .map(|(x, bias)| Tensor::from_parts_unchecked(x.shape().to_vec(), self.step_score(x.data(), bias)))
            .collect())
    }

    pub fn seq_reconstruct(&self, seq: &Sequence) -> Result<Sequence> {
        let scores = self.seq_score(seq)?;
        let steps = seq
            .steps()
            .iter()
            .zip(&scores)
            .map(|(x, s)| x.sub(s))
            .collect::<Result<Vec<_>>>()?;
        Sequence::new(steps)
    }

    /// Loss `½ Σ_t ‖clean^t − f_t(noisy)‖²` and its parameter gradient,
    /// with backpropagation through time into the RNN.
    pub fn seq_param_grad(&self, clean: &Sequence, noisy: &Sequence) -> Result<(f64, Self)> {
        if clean.len() != noisy.len() {
            return Err(DsebmError::Shape(format!(
                "clean has {} steps, noisy has {}",
                clean.len(),
                noisy.len()
            )));
        }
        self.check(clean)?;
        let roll = self.rollout(noisy)?;
        let mut grad = self.zeros_like();
        let mut loss = 0.0;
        let steps = noisy.len();

        // Adjoints of the biases at each step.
        let mut b_bar = Vec::with_capacity(steps);
        let mut bp_bar = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = noisy.steps()[t].data();
            let bias = &roll.biases[t];
            let u: Vec<f64> = add(&self.w.t_matvec(x), &bias.b)
                .iter()
                .map(|&v| sigmoid(v))
                .collect();
            let wu = self.w.matvec(&u);
            let r: Vec<f64> = bias
                .b_prime
                .iter()
                .zip(&wu)
                .zip(clean.steps()[t].data())
                .map(|((bp, w), c)| bp + w - c)
                .collect();
            loss += 0.5 * r.iter().map(|v| v * v).sum::<f64>();

            grad.w.add_outer(&r, &u);
            let u_bar = self.w.t_matvec(&r);
            let z_bar: Vec<f64> = u_bar.iter().zip(&u).map(|(ub, ui)| ub * ui * (1.0 - ui)).collect();
            grad.w.add_outer(x, &z_bar);
            b_bar.push(z_bar);
            bp_bar.push(r);
        }
        if !loss.is_finite() {
            return Err(DsebmError::NonFinite("sequence reconstruction loss".into()));
        }

        let mut carry = vec![0.0; self.rnn_hidden()];
        for t in (0..steps).rev() {
            let prev = &roll.prev_hidden[t];
            // h^t = softplus(a^t), a^t = W_hh h^{t-1} + W_hx x^t + b_h
            let a_bar: Vec<f64> = carry
                .iter()
                .zip(&roll.pre[t])
                .map(|(c, a)| c * sigmoid(*a))
                .collect();
            grad.w_hh.add_outer(&a_bar, prev);
            grad.w_hx.add_outer(&a_bar, noisy.steps()[t].data());
            accumulate(grad.b_h.data_mut(), &a_bar);
            let mut prev_bar = self.w_hh.t_matvec(&a_bar);

            accumulate(grad.b.data_mut(), &b_bar[t]);
            grad.w_bh.add_outer(&b_bar[t], prev);
            accumulate(&mut prev_bar, &self.w_bh.t_matvec(&b_bar[t]));

            accumulate(grad.b_prime.data_mut(), &bp_bar[t]);
            grad.w_bph.add_outer(&bp_bar[t], prev);
            accumulate(&mut prev_bar, &self.w_bph.t_matvec(&bp_bar[t]));

            carry = prev_bar;
        }
        grad.h0.data_mut().copy_from_slice(&carry);
        Ok((loss, grad))
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Parameters for RecurrentEnergyParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.w, &self.b, &self.b_prime, &self.w_hh, &self.w_hx, &self.b_h, &self.w_bh,
            &self.w_bph, &self.h0,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w,
            &mut self.b,
            &mut self.b_prime,
            &mut self.w_hh,
            &mut self.w_hx,
            &mut self.b_h,
            &mut self.w_bh,
            &mut self.w_bph,
            &mut self.h0,
        ]
    }

    fn tensor_names(&self) -> Vec<String> {
        ["w", "b", "b_prime", "w_hh", "w_hx", "b_h", "w_bh", "w_bph", "h0"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

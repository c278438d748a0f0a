//! Denoising score matching: regress clean inputs from Gaussian-corrupted
//! ones through `f(x) = x − ∇ₓE(x)`, with shuffled minibatch SGD and
//! momentum.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DsebmError, Result};
use crate::model::{Detector, Model, ModelSpec, Normalizer, Parameters, Sample};
use crate::numerics::RngStream;
use crate::persistence::param_checksum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Zscore,
    None,
}

impl std::str::FromStr for Normalization {
    type Err = DsebmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(Normalization::Zscore),
            "none" => Ok(Normalization::None),
            other => Err(DsebmError::InvalidArgument(format!("unknown normalization {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Standard deviation of the corruption noise.
    pub noise_sigma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub normalization: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            batch_size: 128,
            epochs: 100,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            normalization: Normalization::Zscore,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DsebmError::InvalidArgument(m.into()));
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        // Zero is accepted: it freezes the parameters.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    /// Mean `‖x − f(x + ε)‖²` over the epoch's samples.
    pub objective: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Objective of the initial parameters, on its own noise draw.
    pub initial_objective: f64,
    pub epochs: Vec<EpochStat>,
    /// Checksum of the final parameters.
    pub checksum: String,
}

impl TrainTrace {
    pub fn first_objective(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.objective)
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.objective)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# checksum {}\nepoch,objective,seconds\n0,{},0\n",
            self.checksum, self.initial_objective
        );
        for e in &self.epochs {
            out.push_str(&format!("{},{},{:.6}\n", e.epoch, e.objective, e.seconds));
        }
        out
    }
}

/// `x + ε` with `ε ~ N(0, σ²I)` drawn from `rng`.
pub fn corrupt(x: &Sample, sigma: f64, rng: &mut RngStream) -> Result<Sample> {
    if !(sigma >= 0.0) {
        return Err(DsebmError::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    x.map_rows(|row| row.iter().map(|v| v + rng.normal(sigma)).collect())
}

/// Anything with a reconstruction map `f`.
pub trait Reconstruct {
    fn reconstruct(&self, x: &Sample) -> Result<Sample>;
}

impl Reconstruct for Model {
    fn reconstruct(&self, x: &Sample) -> Result<Sample> {
        Model::reconstruct(self, x)
    }
}

/// One-draw Monte-Carlo estimate of the mean of `‖x − f(x + ε)‖²` over a
/// batch.
pub fn dae_objective<M: Reconstruct>(model: &M, batch: &[Sample], sigma: f64, rng: &mut RngStream) -> Result<f64> {
    if batch.is_empty() {
        return Err(DsebmError::Empty("objective over an empty batch".into()));
    }
    let mut total = 0.0;
    for x in batch {
        let noisy = corrupt(x, sigma, rng)?;
        let f = model.reconstruct(&noisy)?;
        total += x.sub(&f)?.norm_sq();
    }
    let obj = total / batch.len() as f64;
    if !obj.is_finite() {
        return Err(DsebmError::NonFinite("denoising objective".into()));
    }
    Ok(obj)
}

/// Sum of `‖clean − f(noisy)‖²` and the batch-mean gradient of
/// `½‖clean − f(noisy)‖²`. Per-sample terms are computed in parallel and
/// combined in index order.
pub fn batch_gradient(model: &Model, clean: &[Sample], noisy: &[Sample]) -> Result<(f64, Model)> {
    if clean.is_empty() || clean.len() != noisy.len() {
        return Err(DsebmError::InvalidArgument("batch must be nonempty and paired".into()));
    }
    let parts: Vec<(f64, Model)> = clean
        .par_iter()
        .zip(noisy.par_iter())
        .map(|(c, n)| model.param_grad(c, n))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grad = model.zeros_like();
    let scale = 1.0 / clean.len() as f64;
    for (loss, g) in &parts {
        total += 2.0 * loss;
        for (dst, src) in grad.tensors_mut().into_iter().zip(g.tensors()) {
            dst.data_mut()
                .iter_mut()
                .zip(src.data())
                .for_each(|(d, s)| *d += scale * s);
        }
    }
    Ok((total, grad))
}

/// Heavy-ball SGD: `v ← μv − ηg`, `θ ← θ + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: Model,
    learning_rate: f64,
    momentum: f64,
}

impl Sgd {
    pub fn new(model: &Model, learning_rate: f64, momentum: f64) -> Self {
        Self {
            velocity: model.zeros_like(),
            learning_rate,
            momentum,
        }
    }

    pub fn step(&mut self, model: &mut Model, grad: &Model) {
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((p, v), g) in model
            .tensors_mut()
            .into_iter()
            .zip(self.velocity.tensors_mut())
            .zip(grad.tensors())
        {
            for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = mu * *vi - lr * gi;
                *pi += *vi;
            }
        }
    }
}

/// Trains `model` on `samples` (already in model space).
pub fn train(mut model: Model, samples: &[Sample], config: &TrainConfig) -> Result<(Model, TrainTrace)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(DsebmError::Empty("no training samples".into()));
    }
    let initial_objective = dae_objective(
        &model,
        samples,
        config.noise_sigma,
        &mut RngStream::new(config.seed).substream(2),
    )?;
    let mut rng = RngStream::new(config.seed).substream(1);
    let mut opt = Sgd::new(&model, config.learning_rate, config.momentum);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let clean: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let noisy = clean
                .iter()
                .map(|x| corrupt(x, config.noise_sigma, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let (sum_err, grad) = match batch_gradient(&model, &clean, &noisy) {
                Ok(v) => v,
                Err(e) if e.is_numerical() => {
                    return Err(DsebmError::Divergence {
                        epoch,
                        objective: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            total += sum_err;
            if !total.is_finite() || grad.tensors().iter().any(|t| !t.is_finite()) {
                return Err(DsebmError::Divergence {
                    epoch,
                    objective: total,
                });
            }
            opt.step(&mut model, &grad);
        }
        epochs.push(EpochStat {
            epoch,
            objective: total / samples.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    if model.tensors().iter().any(|t| !t.is_finite()) {
        return Err(DsebmError::Divergence {
            epoch: config.epochs,
            objective: f64::NAN,
        });
    }
    let checksum = param_checksum(&model);
    Ok((model, TrainTrace {
            initial_objective,
            epochs,
            checksum,
        }))
}

/// Fits normalization on the training inliers, initializes a model of the
/// requested shape with its prior at the training mean, and trains it.
pub fn fit_detector(spec: &ModelSpec, raw: &[Sample], config: &TrainConfig) -> Result<(Detector, TrainTrace)> {
    config.validate()?;
    let first = raw
        .first()
        .ok_or_else(|| DsebmError::Empty("no training samples".into()))?;
    let normalizer = match config.normalization {
        Normalization::Zscore => Some(Normalizer::fit(raw)?),
        Normalization::None => None,
    };
    let prepared: Vec<Sample> = match &normalizer {
        Some(n) => raw.iter().map(|s| n.apply(s)).collect::<Result<_>>()?,
        None => raw.to_vec(),
    };
    let center = Normalizer::fit(&prepared)?.mean;
    let mut init_rng = RngStream::new(config.seed).substream(0);
    let model = spec.init(first, &center, &mut init_rng)?;
    let (model, trace) = train(model, &prepared, config)?;
    Ok((
        Detector {
            model,
            normalizer,
            config: Some(config.clone()),
        },
        trace,
    ))
}

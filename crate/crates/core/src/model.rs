//! Architecture-independent wrappers: the sample and model enums used by
//! training, scoring and persistence, and feature normalization.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::energy_conv::{ConvEnergyParams, LayerSpec};
use crate::energy_dense::DenseEnergyParams;
use crate::energy_recurrent::{RecurrentEnergyParams, Sequence};
use crate::error::{DsebmError, Result};
use crate::numerics::{RngStream, Tensor};
use crate::training::TrainConfig;

/// Access to the parameter tensors of a model, in a fixed order.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
    /// Stable names, parallel to [`Parameters::tensors`].
    fn tensor_names(&self) -> Vec<String>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Dense,
    Recurrent,
    Conv,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Dense => "dense",
            Architecture::Recurrent => "recurrent",
            Architecture::Conv => "conv",
        })
    }
}

impl std::str::FromStr for Architecture {
    type Err = DsebmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Architecture::Dense),
            "recurrent" => Ok(Architecture::Recurrent),
            "conv" => Ok(Architecture::Conv),
            other => Err(DsebmError::InvalidArgument(format!("unknown architecture {other:?}"))),
        }
    }
}

/// One input: a feature vector, a sequence of vectors, or a `[C, H, W]` image.
#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Vector(Tensor),
    Sequence(Sequence),
    Image(Tensor),
}

impl Sample {
    /// The architecture that consumes this kind of sample.
    pub fn architecture(&self) -> Architecture {
        match self {
            Sample::Vector(_) => Architecture::Dense,
            Sample::Sequence(_) => Architecture::Recurrent,
            Sample::Image(_) => Architecture::Conv,
        }
    }

    /// All scalars, in step-major / row-major order.
    pub fn values(&self) -> Vec<f64> {
        match self {
            Sample::Vector(t) | Sample::Image(t) => t.data().to_vec(),
            Sample::Sequence(s) => s.steps().iter().flat_map(|t| t.data().iter().copied()).collect(),
        }
    }

    /// Width of one feature vector: `d` for vectors and sequence steps,
    /// `C·H·W` for images.
    pub fn feature_dim(&self) -> usize {
        match self {
            Sample::Vector(t) | Sample::Image(t) => t.len(),
            Sample::Sequence(s) => s.dim(),
        }
    }

    /// Feature vectors contained in the sample (one per step for sequences).
    pub fn feature_rows(&self) -> Vec<&[f64]> {
        match self {
            Sample::Vector(t) | Sample::Image(t) => vec![t.data()],
            Sample::Sequence(s) => s.steps().iter().map(|t| t.data()).collect(),
        }
    }

    /// Applies `f` to every feature row, keeping the sample's structure.
    pub fn map_rows(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Sample> {
        Ok(match self {
            Sample::Vector(t) => Sample::Vector(Tensor::new(t.shape().to_vec(), f(t.data()))?),
            Sample::Image(t) => Sample::Image(Tensor::new(t.shape().to_vec(), f(t.data()))?),
            Sample::Sequence(s) => Sample::Sequence(Sequence::new(
                s.steps()
                    .iter()
                    .map(|t| Tensor::new(t.shape().to_vec(), f(t.data())))
                    .collect::<Result<_>>()?,
            )?),
        })
    }

    pub fn norm_sq(&self) -> f64 {
        self.feature_rows()
            .iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// Elementwise difference of two samples with identical structure.
    pub fn sub(&self, other: &Sample) -> Result<Sample> {
        match (self, other) {
            (Sample::Vector(a), Sample::Vector(b)) => Ok(Sample::Vector(a.sub(b)?)),
            (Sample::Image(a), Sample::Image(b)) => Ok(Sample::Image(a.sub(b)?)),
            (Sample::Sequence(a), Sample::Sequence(b)) if a.len() == b.len() => {
                Ok(Sample::Sequence(Sequence::new(
                    a.steps()
                        .iter()
                        .zip(b.steps())
                        .map(|(x, y)| x.sub(y))
                        .collect::<Result<_>>()?,
                )?))
            }
            _ => Err(DsebmError::Shape("samples differ in structure".into())),
        }
    }
}

/// Architecture and widths, without parameter values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "lowercase")]
pub enum ModelSpec {
    Dense {
        hidden: Vec<usize>,
    },
    Recurrent {
        rnn_hidden: usize,
        ebm_hidden: usize,
    },
    Conv {
        layers: Vec<LayerSpec>,
    },
}

impl ModelSpec {
    pub fn architecture(&self) -> Architecture {
        match self {
            ModelSpec::Dense { .. } => Architecture::Dense,
            ModelSpec::Recurrent { .. } => Architecture::Recurrent,
            ModelSpec::Conv { .. } => Architecture::Conv,
        }
    }

    /// Randomly initialized model for inputs shaped like `example`, with the
    /// prior centered at `center` (one value per feature).
    pub fn init(&self, example: &Sample, center: &[f64], rng: &mut RngStream) -> Result<Model> {
        match (self, example) {
            (ModelSpec::Dense { hidden }, Sample::Vector(_)) => {
                Ok(Model::Dense(DenseEnergyParams::init(hidden, center, rng)?))
            }
            (ModelSpec::Recurrent { rnn_hidden, ebm_hidden }, Sample::Sequence(_)) => Ok(
                Model::Recurrent(RecurrentEnergyParams::init(*rnn_hidden, *ebm_hidden, center, rng)?),
            ),
            (ModelSpec::Conv { layers }, Sample::Image(img)) => {
                let shape = image_shape(img)?;
                Ok(Model::Conv(ConvEnergyParams::init(shape, layers, center, rng)?))
            }
            (spec, _) => Err(DsebmError::SampleKind(spec.architecture())),
        }
    }
}

pub(crate) fn image_shape(img: &Tensor) -> Result<[usize; 3]> {
    match img.shape() {
        &[c, h, w] => Ok([c, h, w]),
        s => Err(DsebmError::Shape(format!("images are [C, H, W], got {s:?}"))),
    }
}

/// A trained or initialized energy model of any architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Dense(DenseEnergyParams),
    Recurrent(RecurrentEnergyParams),
    Conv(ConvEnergyParams),
}

impl Model {
    pub fn architecture(&self) -> Architecture {
        match self {
            Model::Dense(_) => Architecture::Dense,
            Model::Recurrent(_) => Architecture::Recurrent,
            Model::Conv(_) => Architecture::Conv,
        }
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::Dense(p) => ModelSpec::Dense { hidden: p.hidden() },
            Model::Recurrent(p) => ModelSpec::Recurrent {
                rnn_hidden: p.rnn_hidden(),
                ebm_hidden: p.ebm_hidden(),
            },
            Model::Conv(p) => ModelSpec::Conv { layers: p.specs() },
        }
    }

    fn mismatch(&self) -> DsebmError {
        DsebmError::SampleKind(self.architecture())
    }

    /// Energy; sequences report the sum over steps.
    pub fn energy(&self, x: &Sample) -> Result<f64> {
        match (self, x) {
            (Model::Dense(p), Sample::Vector(t)) => p.energy(t),
            (Model::Recurrent(p), Sample::Sequence(s)) => Ok(p.seq_energy(s)?.0),
            (Model::Conv(p), Sample::Image(t)) => p.energy(t),
            _ => Err(self.mismatch()),
        }
    }

    /// `∇ₓE`, structured like the input (per-step for sequences).
    pub fn score(&self, x: &Sample) -> Result<Sample> {
        match (self, x) {
            (Model::Dense(p), Sample::Vector(t)) => Ok(Sample::Vector(p.score(t)?)),
            (Model::Recurrent(p), Sample::Sequence(s)) => {
                Ok(Sample::Sequence(Sequence::new(p.seq_score(s)?)?))
            }
            (Model::Conv(p), Sample::Image(t)) => Ok(Sample::Image(p.score(t)?)),
            _ => Err(self.mismatch()),
        }
    }

    pub fn reconstruct(&self, x: &Sample) -> Result<Sample> {
        match (self, x) {
            (Model::Dense(p), Sample::Vector(t)) => Ok(Sample::Vector(p.reconstruct(t)?)),
            (Model::Recurrent(p), Sample::Sequence(s)) => Ok(Sample::Sequence(p.seq_reconstruct(s)?)),
            (Model::Conv(p), Sample::Image(t)) => Ok(Sample::Image(p.reconstruct(t)?)),
            _ => Err(self.mismatch()),
        }
    }

    /// `½‖clean − f(noisy)‖²` and its gradient, as a model-shaped record.
    pub fn param_grad(&self, clean: &Sample, noisy: &Sample) -> Result<(f64, Model)> {
        match (self, clean, noisy) {
            (Model::Dense(p), Sample::Vector(c), Sample::Vector(n)) => {
                let (l, g) = p.param_grad(c, n)?;
                Ok((l, Model::Dense(g)))
            }
            (Model::Recurrent(p), Sample::Sequence(c), Sample::Sequence(n)) => {
                let (l, g) = p.seq_param_grad(c, n)?;
                Ok((l, Model::Recurrent(g)))
            }
            (Model::Conv(p), Sample::Image(c), Sample::Image(n)) => {
                let (l, g) = p.param_grad(c, n)?;
                Ok((l, Model::Conv(g)))
            }
            _ => Err(self.mismatch()),
        }
    }

    pub fn expect(&self, arch: Architecture) -> Result<()> {
        if self.architecture() != arch {
            return Err(DsebmError::ArchitectureMismatch {
                expected: arch,
                found: self.architecture(),
            });
        }
        Ok(())
    }
}

impl Parameters for Model {
    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Model::Dense(p) => p.tensors(),
            Model::Recurrent(p) => p.tensors(),
            Model::Conv(p) => p.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::Dense(p) => p.tensors_mut(),
            Model::Recurrent(p) => p.tensors_mut(),
            Model::Conv(p) => p.tensors_mut(),
        }
    }

    fn tensor_names(&self) -> Vec<String> {
        match self {
            Model::Dense(p) => p.tensor_names(),
            Model::Recurrent(p) => p.tensor_names(),
            Model::Conv(p) => p.tensor_names(),
        }
    }
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standard deviations below this are treated as 1 (constant features).
const MIN_STD: f64 = 1e-12;

impl Normalizer {
    /// Mean and population standard deviation of every feature over all
    /// feature rows (every step of every sequence).
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        for s in samples {
            for row in s.feature_rows() {
                if sum.is_empty() {
                    sum = vec![0.0; row.len()];
                    sum_sq = vec![0.0; row.len()];
                }
                if row.len() != sum.len() {
                    return Err(DsebmError::Shape(format!(
                        "feature width {} differs from {}",
                        row.len(),
                        sum.len()
                    )));
                }
                for ((s1, s2), v) in sum.iter_mut().zip(&mut sum_sq).zip(row) {
                    *s1 += v;
                    *s2 += v * v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(DsebmError::Empty("no samples to fit normalization".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(s2, m)| {
                let sd = (s2 / n - m * m).max(0.0).sqrt();
                if sd < MIN_STD {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, sample: &Sample) -> Result<Sample> {
        if sample.feature_dim() != self.dim() {
            return Err(DsebmError::Shape(format!(
                "sample has {} features, normalizer {}",
                sample.feature_dim(),
                self.dim()
            )));
        }
        sample.map_rows(|row| {
            row.iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(v, (m, s))| (v - m) / s)
                .collect()
        })
    }
}

/// A model together with the input normalization it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub model: Model,
    pub normalizer: Option<Normalizer>,
    /// Training configuration, echoed into saved artifacts.
    pub config: Option<TrainConfig>,
}

impl Detector {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            normalizer: None,
            config: None,
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.model.architecture()
    }

    /// Sample in model space.
    pub fn prepare(&self, raw: &Sample) -> Result<Sample> {
        match &self.normalizer {
            Some(n) => n.apply(raw),
            None => Ok(raw.clone()),
        }
    }

    pub fn energy(&self, raw: &Sample) -> Result<f64> {
        self.model.energy(&self.prepare(raw)?)
    }

    /// `(energy, ‖∇ₓE‖²)` of a raw sample, both in model space.
    pub fn scores(&self, raw: &Sample) -> Result<(f64, f64)> {
        let x = self.prepare(raw)?;
        let energy = self.model.energy(&x)?;
        let grad = self.model.score(&x)?;
        Ok((energy, grad.norm_sq()))
    }

    /// `‖x − f(x)‖²`, computed from the reconstruction rather than the score.
    pub fn residual_error(&self, raw: &Sample) -> Result<f64> {
        let x = self.prepare(raw)?;
        let f = self.model.reconstruct(&x)?;
        Ok(x.sub(&f)?.norm_sq())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizer_fit_and_apply() {
        let samples: Vec<Sample> = [[1.0, 10.0], [3.0, 10.0]]
            .iter()
            .map(|r| Sample::Vector(Tensor::vector(r.to_vec())))
            .collect();
        let n = Normalizer::fit(&samples).unwrap();
        assert_eq!(n.mean, vec![2.0, 10.0]);
        assert_eq!(n.std, vec![1.0, 1.0]);
        let z = n.apply(&samples[0]).unwrap();
        assert_eq!(z.values(), vec![-1.0, 0.0]);
    }

    #[test]
    fn sequence_steps_share_statistics() {
        let seq = Sequence::new(vec![Tensor::vector(vec![0.0]), Tensor::vector(vec![2.0])]).unwrap();
        let n = Normalizer::fit([&Sample::Sequence(seq)]).unwrap();
        assert_eq!(n.mean, vec![1.0]);
        assert_eq!(n.std, vec![1.0]);
    }

    #[test]
    fn wrong_sample_kind_is_reported() {
        let m = Model::Dense(DenseEnergyParams::zeros(2, &[2]).unwrap());
        let img = Sample::Image(Tensor::zeros(&[1, 2, 1]));
        assert!(matches!(m.energy(&img), Err(DsebmError::SampleKind(Architecture::Dense))));
        assert!(m.expect(Architecture::Recurrent).is_err());
    }
}

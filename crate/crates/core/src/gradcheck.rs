//! Finite-difference checks of the analytic input and parameter gradients
//! on small random instances of every architecture.

use serde::Serialize;

use crate::energy_conv::{ConvEnergyParams, LayerSpec};
use crate::energy_dense::DenseEnergyParams;
use crate::energy_recurrent::{RecurrentEnergyParams, Sequence};
use crate::error::Result;
use crate::model::{Architecture, Parameters};
use crate::numerics::{finite_diff_grad, relative_error, RngStream, Tensor, DEFAULT_FD_STEP};

pub const INPUT_TOLERANCE: f64 = 1e-6;
pub const PARAM_TOLERANCE: f64 = 1e-5;

/// Central-difference gradient of `loss` with respect to every parameter,
/// flattened in [`Parameters::tensors`] order.
pub fn param_fd<P: Parameters>(params: &P, loss: impl Fn(&P) -> f64, h: f64) -> Vec<f64> {
    let mut probe = params.clone();
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::with_capacity(sizes.iter().sum());
    for (ti, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let orig = probe.tensors()[ti].data()[i];
            probe.tensors_mut()[ti].data_mut()[i] = orig + h;
            let up = loss(&probe);
            probe.tensors_mut()[ti].data_mut()[i] = orig - h;
            let down = loss(&probe);
            probe.tensors_mut()[ti].data_mut()[i] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub architecture: Architecture,
    /// `"input"` or `"param"`.
    pub check: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(GradcheckRow::passed)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:<6} {:>9} {:>14} {:>10}  result\n", "arch", "check", "instances", "max_rel_err", "tolerance");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:<6} {:>9} {:>14.3e} {:>10.0e}  {}\n",
                r.architecture.to_string(),
                r.check,
                r.instances,
                r.max_rel_error,
                r.tolerance,
                if r.passed() { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

fn randomize<P: Parameters>(p: &mut P, rng: &mut RngStream, scale: f64) {
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.normal(scale);
        }
    }
}

fn vector(rng: &mut RngStream, n: usize) -> Tensor {
    Tensor::vector(rng.normal_vec(n, 1.0))
}

fn range(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + rng.index(hi - lo + 1)
}

struct Maxima {
    input: f64,
    param: f64,
}

fn dense_instance(rng: &mut RngStream) -> Result<Maxima> {
    let d = range(rng, 1, 10);
    let depth = range(rng, 1, 3);
    let hidden: Vec<usize> = (0..depth).map(|_| range(rng, 1, 6)).collect();
    let mut p = DenseEnergyParams::zeros(d, &hidden)?;
    randomize(&mut p, rng, 0.7);
    let x = vector(rng, d);
    let numeric = finite_diff_grad(|v| p.energy(v).unwrap(), &x, DEFAULT_FD_STEP)?;
    let input = relative_error(p.score(&x)?.data(), numeric.data());

    let noisy = x.add(&vector(rng, d).scale(0.3))?;
    let loss = |q: &DenseEnergyParams| 0.5 * q.reconstruct(&noisy).unwrap().sub(&x).unwrap().norm_sq();
    let (_, grad) = p.param_grad(&x, &noisy)?;
    let param = relative_error(&grad.flatten(), &param_fd(&p, loss, DEFAULT_FD_STEP));
    Ok(Maxima { input, param })
}

fn sequence(rng: &mut RngStream, d: usize, len: usize) -> Result<Sequence> {
    Sequence::new((0..len).map(|_| vector(rng, d)).collect())
}

fn recurrent_instance(rng: &mut RngStream) -> Result<Maxima> {
    let d = range(rng, 1, 4);
    let len = range(rng, 1, 4);
    let mut p = RecurrentEnergyParams::zeros(d, range(rng, 1, 4), range(rng, 1, 4))?;
    randomize(&mut p, rng, 0.6);
    let seq = sequence(rng, d, len)?;
    let biases = p.roll(&seq)?;
    let scores = p.seq_score(&seq)?;
    let mut input: f64 = 0.0;
    for (t, x) in seq.steps().iter().enumerate() {
        let numeric = finite_diff_grad(|v| p.step_energy(v.data(), &biases[t]), x, DEFAULT_FD_STEP)?;
        input = input.max(relative_error(scores[t].data(), numeric.data()));
    }

    let noisy = Sequence::new(
        seq.steps()
            .iter()
            .map(|x| x.add(&vector(rng, d).scale(0.3)))
            .collect::<Result<_>>()?,
    )?;
    let loss = |q: &RecurrentEnergyParams| {
        let f = q.seq_reconstruct(&noisy).unwrap();
        0.5 * f
            .steps()
            .iter()
            .zip(seq.steps())
            .map(|(a, b)| a.sub(b).unwrap().norm_sq())
            .sum::<f64>()
    };
    let (_, grad) = p.seq_param_grad(&seq, &noisy)?;
    let param = relative_error(&grad.flatten(), &param_fd(&p, loss, DEFAULT_FD_STEP));
    Ok(Maxima { input, param })
}

const CONV_LAYOUTS: [(usize, &[LayerSpec]); 4] = [
    (6, &[LayerSpec::Conv { filters: 2, size: 3 }]),
    (8, &[LayerSpec::Conv { filters: 2, size: 3 }, LayerSpec::Pool { window: 2 }, LayerSpec::Dense { units: 3 }]),
    (6, &[LayerSpec::Conv { filters: 2, size: 2 }, LayerSpec::Conv { filters: 1, size: 3 }]),
    (4, &[LayerSpec::Pool { window: 2 }, LayerSpec::Conv { filters: 2, size: 2 }]),
];

fn conv_instance(rng: &mut RngStream) -> Result<Maxima> {
    let (size, specs) = CONV_LAYOUTS[rng.index(CONV_LAYOUTS.len())];
    let channels = range(rng, 1, 2);
    let shape = [channels, size, size];
    let mut p = ConvEnergyParams::zeros(shape, specs)?;
    randomize(&mut p, rng, 0.5);
    let n = channels * size * size;
    let x = Tensor::new(shape.to_vec(), rng.normal_vec(n, 1.0))?;
    let numeric = finite_diff_grad(|v| p.energy(v).unwrap(), &x, DEFAULT_FD_STEP)?;
    let input = relative_error(p.score(&x)?.data(), numeric.data());

    let noisy = x.add(&Tensor::new(shape.to_vec(), rng.normal_vec(n, 0.3))?)?;
    let loss = |q: &ConvEnergyParams| 0.5 * q.reconstruct(&noisy).unwrap().sub(&x).unwrap().norm_sq();
    let (_, grad) = p.param_grad(&x, &noisy)?;
    let param = relative_error(&grad.flatten(), &param_fd(&p, loss, DEFAULT_FD_STEP));
    Ok(Maxima { input, param })
}

/// Runs `instances` random checks per architecture.
pub fn run_gradcheck(seed: u64, instances: usize) -> Result<GradcheckReport> {
    let suites: [(Architecture, fn(&mut RngStream) -> Result<Maxima>); 3] = [
        (Architecture::Dense, dense_instance),
        (Architecture::Recurrent, recurrent_instance),
        (Architecture::Conv, conv_instance),
    ];
    let mut rows = Vec::new();
    for (i, (arch, run)) in suites.into_iter().enumerate() {
        let mut rng = RngStream::new(seed).substream(i as u64);
        let mut worst = Maxima { input: 0.0, param: 0.0 };
        for _ in 0..instances {
            let m = run(&mut rng)?;
            worst.input = worst.input.max(m.input);
            worst.param = worst.param.max(m.param);
        }
        rows.push(GradcheckRow {
            architecture: arch,
            check: "input",
            instances,
            max_rel_error: worst.input,
            tolerance: INPUT_TOLERANCE,
        });
        rows.push(GradcheckRow {
            architecture: arch,
            check: "param",
            instances,
            max_rel_error: worst.param,
            tolerance: PARAM_TOLERANCE,
        });
    }
    Ok(GradcheckReport { seed, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_fd_of_quadratic() {
        let p = DenseEnergyParams::zeros(2, &[1]).unwrap();
        let g = param_fd(&p, |q| q.flatten().iter().map(|v| (v - 1.0) * (v - 1.0)).sum(), 1e-4);
        assert!(g.iter().all(|v| (v + 2.0).abs() < 1e-9));
    }

    #[test]
    fn default_suite_passes_and_replays() {
        let a = run_gradcheck(3, 4).unwrap();
        assert!(a.passed(), "{}", a.to_table());
        assert_eq!(a.rows.len(), 6);
        assert_eq!(a, run_gradcheck(3, 4).unwrap());
    }

    #[test]
    fn sign_flip_in_conv_backward_fails_suite() {
        crate::energy_conv::FLIP_CONV_BACKWARD.with(|f| f.set(true));
        let r = run_gradcheck(5, 4);
        crate::energy_conv::FLIP_CONV_BACKWARD.with(|f| f.set(false));
        let r = r.unwrap();
        assert!(!r.passed());
        assert!(r.rows.iter().filter(|row| !row.passed()).all(|row| row.architecture == Architecture::Conv));
    }
}

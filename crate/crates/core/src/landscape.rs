//! Grid evaluation of the energy surface and the reconstruction error of
//! one- and two-dimensional vector models.

use rayon::prelude::*;

use crate::error::{DsebmError, Result};
use crate::model::{Architecture, Detector, Sample};
use crate::numerics::Tensor;

/// `n` evenly spaced points from `lo` to `hi`, both included.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(DsebmError::InvalidArgument(format!(
            "need finite lo < hi and at least 2 points, got [{lo}, {hi}] with {n}"
        )));
    }
    let step = (hi - lo) / (n - 1) as f64;
    let mut v: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
    v[n - 1] = hi;
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub coords: Vec<f64>,
    pub energy: f64,
    pub recon_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landscape {
    /// One axis per input dimension.
    pub axes: Vec<Vec<f64>>,
    /// Row-major over the axes (the last axis varies fastest).
    pub points: Vec<GridPoint>,
}

impl Landscape {
    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn energies(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.energy).collect()
    }

    pub fn recon_errors(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.recon_error).collect()
    }

    /// `x0[,x1],energy,recon_error`, with optional threshold comments.
    pub fn to_csv(&self, thresholds: Option<(f64, f64)>) -> String {
        let mut out = String::new();
        if let Some((e, r)) = thresholds {
            out.push_str(&format!("# thresholds energy={e} recon_error={r}\n"));
        }
        let names: Vec<String> = (0..self.dims()).map(|i| format!("x{i}")).collect();
        out.push_str(&format!("{},energy,recon_error\n", names.join(",")));
        for p in &self.points {
            let coords: Vec<String> = p.coords.iter().map(|c| c.to_string()).collect();
            out.push_str(&format!("{},{},{}\n", coords.join(","), p.energy, p.recon_error));
        }
        out
    }
}

/// Evaluates `detector` on an inclusive grid over `[lo, hi]` per dimension
/// with `resolution` points per axis. Coordinates are raw inputs.
pub fn evaluate_grid(detector: &Detector, lo: &[f64], hi: &[f64], resolution: usize) -> Result<Landscape> {
    if detector.architecture() != Architecture::Dense {
        return Err(DsebmError::InvalidArgument("landscapes need a vector model".into()));
    }
    let dims = match &detector.model {
        crate::model::Model::Dense(p) => p.input_dim(),
        _ => unreachable!(),
    };
    if !(1..=2).contains(&dims) {
        return Err(DsebmError::InvalidArgument(format!(
            "landscapes support 1 or 2 input dimensions, model has {dims}"
        )));
    }
    if lo.len() != dims || hi.len() != dims {
        return Err(DsebmError::InvalidArgument(format!("need {dims} bounds per side")));
    }
    let axes: Vec<Vec<f64>> = (0..dims)
        .map(|i| linspace(lo[i], hi[i], resolution))
        .collect::<Result<_>>()?;
    let coords: Vec<Vec<f64>> = if dims == 1 {
        axes[0].iter().map(|&x| vec![x]).collect()
    } else {
        axes[0]
            .iter()
            .flat_map(|&x| axes[1].iter().map(move |&y| vec![x, y]))
            .collect()
    };
    let points = coords
        .into_par_iter()
        .map(|c| {
            let (energy, recon_error) = detector.scores(&Sample::Vector(Tensor::vector(c.clone())))?;
            Ok(GridPoint {
                coords: c,
                energy,
                recon_error,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Landscape { axes, points })
}

/// Interior indices strictly below both neighbours.
pub fn local_minima(values: &[f64]) -> Vec<usize> {
    (1..values.len().saturating_sub(1))
        .filter(|&i| values[i] < values[i - 1] && values[i] < values[i + 1])
        .collect()
}

/// Interior indices strictly above both neighbours.
pub fn local_maxima(values: &[f64]) -> Vec<usize> {
    (1..values.len().saturating_sub(1))
        .filter(|&i| values[i] > values[i - 1] && values[i] > values[i + 1])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy_dense::{DenseEnergyParams, DenseLayer};
    use crate::model::Model;

    #[test]
    fn grid_includes_endpoints() {
        let g = linspace(-1.0, 2.0, 7).unwrap();
        assert_eq!(g.len(), 7);
        assert_eq!(g[0], -1.0);
        assert_eq!(g[6], 2.0);
        assert!((g[1] - -0.5).abs() < 1e-15);
        assert!(linspace(0.0, 0.0, 3).is_err());
        assert!(linspace(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn extrema_of_a_wave() {
        let v: Vec<f64> = (0..100).map(|i| (i as f64 * 0.2).sin()).collect();
        assert_eq!(local_maxima(&v).len(), 3);
        assert_eq!(local_minima(&v).len(), 3);
        assert!(local_minima(&[1.0, 1.0, 1.0]).is_empty());
    }

    fn two_well_model() -> Detector {
        // Curvature of the hidden units exceeds the prior's at 0.
        let layer = DenseLayer {
            w: Tensor::new(vec![1, 2], vec![3.0, -3.0]).unwrap(),
            b: Tensor::vector(vec![0.0, 0.0]),
        };
        let p = DenseEnergyParams::new(vec![layer], Tensor::vector(vec![0.0])).unwrap();
        Detector::new(Model::Dense(p))
    }

    #[test]
    fn critical_points_have_small_gradient() {
        let d = two_well_model();
        let l = evaluate_grid(&d, &[-6.0], &[6.0], 2001).unwrap();
        let e = l.energies();
        let minima = local_minima(&e);
        let maxima = local_maxima(&e);
        assert_eq!(minima.len(), 2);
        assert_eq!(maxima.len(), 1);
        for i in minima.into_iter().chain(maxima) {
            assert!(l.points[i].recon_error < 1e-3, "{i}: {}", l.points[i].recon_error);
        }
    }

    #[test]
    fn two_dimensional_grid_is_row_major() {
        let p = DenseEnergyParams::zeros(2, &[1]).unwrap();
        let l = evaluate_grid(&Detector::new(Model::Dense(p)), &[0.0, 0.0], &[1.0, 2.0], 3).unwrap();
        assert_eq!(l.points.len(), 9);
        assert_eq!(l.points[1].coords, vec![0.0, 1.0]);
        assert_eq!(l.points[3].coords, vec![0.5, 0.0]);
        assert!(l.to_csv(Some((1.0, 2.0))).starts_with("# thresholds"));
    }

    #[test]
    fn unsupported_dimensionality() {
        let p = DenseEnergyParams::zeros(3, &[1]).unwrap();
        assert!(evaluate_grid(&Detector::new(Model::Dense(p)), &[0.0; 3], &[1.0; 3], 3).is_err());
    }
}

//! Scalar activations, 2-D convolution primitives, a seeded random stream
//! and a central-difference gradient oracle.
//!
//! Both convolution modes are cross-correlations. A true convolution with a
//! filter `w` is `conv_valid(x, &flip(w))`.

mod rng;
mod tensor;

pub use rng::{RngStream, RNG_ALGORITHM};
pub use tensor::Tensor;
pub(crate) use tensor::dot;

use crate::error::{DsebmError, Result};

/// Default central-difference step for unit-scale inputs.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// `log(1 + e^x)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Valid-mode cross-correlation of a rank-2 image with a rank-2 filter.
pub fn conv_valid(image: &Tensor, filter: &Tensor) -> Result<Tensor> {
    let (ih, iw) = dims2(image, "image")?;
    let (fh, fw) = dims2(filter, "filter")?;
    if fh > ih || fw > iw {
        return Err(DsebmError::Shape(format!(
            "filter {fh}x{fw} larger than image {ih}x{iw}"
        )));
    }
    let (oh, ow) = (ih - fh + 1, iw - fw + 1);
    let mut out = vec![0.0; oh * ow];
    xcorr_valid_acc(image.data(), ih, iw, filter.data(), fh, fw, &mut out);
    Ok(Tensor::from_parts_unchecked(vec![oh, ow], out))
}

/// Full-mode (zero padded) cross-correlation: every placement with at least
/// one overlapping position contributes an output entry.
pub fn conv_full(image: &Tensor, filter: &Tensor) -> Result<Tensor> {
    let (ih, iw) = dims2(image, "image")?;
    let (fh, fw) = dims2(filter, "filter")?;
    let (oh, ow) = (ih + fh - 1, iw + fw - 1);
    let mut out = vec![0.0; oh * ow];
    xcorr_full_acc(image.data(), ih, iw, filter.data(), fh, fw, &mut out);
    Ok(Tensor::from_parts_unchecked(vec![oh, ow], out))
}

/// Reverses a rank-2 tensor along both axes.
pub fn flip(filter: &Tensor) -> Result<Tensor> {
    dims2(filter, "filter")?;
    let mut data = filter.data().to_vec();
    data.reverse();
    Ok(Tensor::from_parts_unchecked(filter.shape().to_vec(), data))
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[h, w] => Ok((h, w)),
        s => Err(DsebmError::Shape(format!("{what} must be rank 2, got {s:?}"))),
    }
}

/// `out += valid_xcorr(img, f)`; `out` is (ih-fh+1) x (iw-fw+1).
pub(crate) fn xcorr_valid_acc(
    img: &[f64],
    ih: usize,
    iw: usize,
    f: &[f64],
    fh: usize,
    fw: usize,
    out: &mut [f64],
) {
    let (oh, ow) = (ih - fh + 1, iw - fw + 1);
    debug_assert_eq!(out.len(), oh * ow);
    for p in 0..oh {
        for q in 0..ow {
            let mut acc = 0.0;
            for i in 0..fh {
                let row = &img[(p + i) * iw + q..(p + i) * iw + q + fw];
                acc += dot(row, &f[i * fw..(i + 1) * fw]);
            }
            out[p * ow + q] += acc;
        }
    }
}

/// `out += full_xcorr(img, f)`; `out` is (ih+fh-1) x (iw+fw-1).
pub(crate) fn xcorr_full_acc(
    img: &[f64],
    ih: usize,
    iw: usize,
    f: &[f64],
    fh: usize,
    fw: usize,
    out: &mut [f64],
) {
    let ow = iw + fw - 1;
    debug_assert_eq!(out.len(), (ih + fh - 1) * ow);
    // Scatter form: image pixel (r, c) meets filter tap (i, j) at output
    // (r - i + fh - 1, c - j + fw - 1).
    for r in 0..ih {
        for c in 0..iw {
            let v = img[r * iw + c];
            if v == 0.0 {
                continue;
            }
            for i in 0..fh {
                let orow = (r + fh - 1 - i) * ow;
                for j in 0..fw {
                    out[orow + c + fw - 1 - j] += v * f[i * fw + j];
                }
            }
        }
    }
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(DsebmError::InvalidArgument(format!(
            "step must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(DsebmError::NonFinite(format!(
                "function value at coordinate {i}"
            )));
        }
        *g = (up - down) / (2.0 * h);
    }
    Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), grad))
}

/// Scale-relative discrepancy `max|a-b| / max(max|a|, max|b|)`, with a floor
/// on the denominator so that two all-zero vectors compare equal.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a
        .iter()
        .chain(b)
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    diff / scale
}

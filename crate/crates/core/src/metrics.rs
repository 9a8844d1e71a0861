//! Quality metrics for reconstructions: relative Frobenius error, the
//! parameter compression ratio of a tensor train, and windowed SSIM for
//! 2D slices.

use serde::Serialize;

use crate::error::{NttError, Result};
use crate::tensor::{DenseTensor, Matrix};

/// Side length of the non-overlapping SSIM windows.
const SSIM_WINDOW: usize = 8;

/// Metric bundle reported after a decomposition.
#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub relative_error: f64,
    pub compression_ratio: f64,
    pub ssim: Option<f64>,
}

/// ||a - b||_F / ||a||_F, with `a` as the reference.
pub fn relative_error(a: &DenseTensor, b: &DenseTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(NttError::Dimension(format!(
            "relative_error: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    relative_error_slices(a.as_slice(), b.as_slice())
}

/// Same metric on raw buffers of equal length.
pub fn relative_error_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NttError::Dimension(format!(
            "relative_error: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    let mut diff_sq = 0.0;
    let mut ref_sq = 0.0;
    for (x, y) in a.iter().zip(b) {
        diff_sq += (x - y) * (x - y);
        ref_sq += x * x;
    }
    if ref_sq == 0.0 {
        return Err(NttError::DegenerateInput(
            "relative_error: reference tensor has zero norm".into(),
        ));
    }
    Ok((diff_sq / ref_sq).sqrt())
}

/// Ratio of tensor elements to tensor-train parameters:
/// prod(n_i) / sum(n_i * r_{i-1} * r_i).
pub fn compression_ratio(shape: &[usize], ranks: &[usize]) -> Result<f64> {
    if shape.is_empty() || ranks.len() != shape.len() + 1 {
        return Err(NttError::Rank(format!(
            "compression_ratio: shape of length {} needs {} ranks, got {}",
            shape.len(),
            shape.len() + 1,
            ranks.len()
        )));
    }
    if ranks[0] != 1 || *ranks.last().unwrap() != 1 {
        return Err(NttError::Rank(format!(
            "compression_ratio: boundary ranks must be 1, got {} and {}",
            ranks[0],
            ranks.last().unwrap()
        )));
    }
    if ranks.iter().any(|&r| r == 0) || shape.iter().any(|&n| n == 0) {
        return Err(NttError::Rank(
            "compression_ratio: extents and ranks must be positive".into(),
        ));
    }
    let elements: f64 = shape.iter().map(|&n| n as f64).product();
    let params: f64 = shape
        .iter()
        .enumerate()
        .map(|(i, &n)| (n * ranks[i] * ranks[i + 1]) as f64)
        .sum();
    Ok(elements / params)
}

/// Mean structural similarity over non-overlapping 8x8 windows.
///
/// `a` is the reference image; its value range supplies the dynamic range L
/// unless `dynamic_range` is given. Stabilizers are C1 = (0.01 L)^2 and
/// C2 = (0.03 L)^2. Trailing rows and columns that do not fill a window are
/// ignored. Window statistics are population moments (divide by 64).
pub fn ssim(a: &Matrix, b: &Matrix, dynamic_range: Option<f64>) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(NttError::Dimension(format!(
            "ssim: shapes {}x{} and {}x{} differ",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    if a.rows() < SSIM_WINDOW || a.cols() < SSIM_WINDOW {
        return Err(NttError::Dimension(format!(
            "ssim: image {}x{} is smaller than one {SSIM_WINDOW}x{SSIM_WINDOW} window",
            a.rows(),
            a.cols()
        )));
    }
    let range = match dynamic_range {
        Some(l) => l,
        None => {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &v in a.as_slice() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            hi - lo
        }
    };
    if !(range > 0.0) {
        return Err(NttError::DegenerateInput(format!(
            "ssim: dynamic range must be positive, got {range}"
        )));
    }
    let c1 = (0.01 * range) * (0.01 * range);
    let c2 = (0.03 * range) * (0.03 * range);

    let wrows = a.rows() / SSIM_WINDOW;
    let wcols = a.cols() / SSIM_WINDOW;
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    for wi in 0..wrows {
        for wj in 0..wcols {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..SSIM_WINDOW {
                let i = wi * SSIM_WINDOW + di;
                for dj in 0..SSIM_WINDOW {
                    let j = wj * SSIM_WINDOW + dj;
                    let x = a.at(i, j);
                    let y = b.at(i, j);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let mu_a = sa / n;
            let mu_b = sb / n;
            let var_a = saa / n - mu_a * mu_a;
            let var_b = sbb / n - mu_b * mu_b;
            let cov = sab / n - mu_a * mu_b;
            total += (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        }
    }
    Ok(total / (wrows * wcols) as f64)
}

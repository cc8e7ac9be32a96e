//! Evaluation metrics with exact oracles: masked reconstruction error
//! (re-exported from the loss module), a Laplacian sharpness score, the
//! closed-form 2-Wasserstein distance between fitted 2-D Gaussians, and
//! finite-difference gradient checking.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::error::CoreError;
use crate::model::ParamSet;
use crate::rng::{derive_rng, Domain};
use crate::scalar::Scalar;
use crate::tensor::{FrameMask, Tensor};

/// Mean absolute 5-point Laplacian over interior valid cells; higher means
/// crisper structure. Requires at least 3 valid frames per item and 3 bins.
pub fn sharpness<T: Scalar>(x: &Tensor<T>, mask: &FrameMask) -> Result<f64, CoreError> {
    let s = x.shape();
    if s.c != 1 {
        return Err(CoreError::ShapeMismatch {
            what: "sharpness expects one channel",
        });
    }
    if s.b != mask.batch() || s.w != mask.frames() {
        return Err(CoreError::ShapeMismatch {
            what: "sharpness mask",
        });
    }
    if s.h < 3 {
        return Err(CoreError::InvalidArgument(
            "sharpness needs at least 3 bins".into(),
        ));
    }
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for b in 0..s.b {
        let len = mask.len_of(b);
        if len < 3 {
            return Err(CoreError::InvalidArgument(format!(
                "sharpness needs at least 3 valid frames, item {b} has {len}"
            )));
        }
        let plane = x.plane(b, 0);
        for i in 1..s.h - 1 {
            for j in 1..len - 1 {
                let c = plane[i * s.w + j].as_f64();
                let up = plane[(i - 1) * s.w + j].as_f64();
                let down = plane[(i + 1) * s.w + j].as_f64();
                let left = plane[i * s.w + j - 1].as_f64();
                let right = plane[i * s.w + j + 1].as_f64();
                acc += (up + down + left + right - 4.0 * c).abs();
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

/// Result of the closed-form Gaussian 2-Wasserstein distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct W2Result {
    pub value: f64,
    /// True when a degenerate fitted covariance had to be regularized.
    pub regularized: bool,
}

const W2_MIN_SAMPLES: usize = 32;
const COV_REG: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
struct Gauss2 {
    mean: [f64; 2],
    cov: [[f64; 2]; 2],
}

fn fit_gauss(samples: &[[f64; 2]]) -> Gauss2 {
    let n = samples.len() as f64;
    let mut mean = [0.0; 2];
    for s in samples {
        mean[0] += s[0];
        mean[1] += s[1];
    }
    mean[0] /= n;
    mean[1] /= n;
    let mut cov = [[0.0; 2]; 2];
    for s in samples {
        let d = [s[0] - mean[0], s[1] - mean[1]];
        cov[0][0] += d[0] * d[0];
        cov[0][1] += d[0] * d[1];
        cov[1][1] += d[1] * d[1];
    }
    cov[0][0] /= n;
    cov[0][1] /= n;
    cov[1][1] /= n;
    cov[1][0] = cov[0][1];
    Gauss2 { mean, cov }
}

fn is_degenerate(c: &[[f64; 2]; 2]) -> bool {
    let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
    !(c[0][0] > 0.0 && det > 0.0) || !det.is_finite()
}

fn regularize(c: &mut [[f64; 2]; 2]) {
    c[0][0] += COV_REG;
    c[1][1] += COV_REG;
}

/// Principal square root of a PSD 2x2 matrix:
/// sqrt(M) = (M + sqrt(det) I) / sqrt(tr + 2 sqrt(det)).
fn sqrt_psd2(m: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let det = (m[0][0] * m[1][1] - m[0][1] * m[1][0]).max(0.0);
    let s = det.sqrt();
    let tr = m[0][0] + m[1][1];
    let denom = (tr + 2.0 * s).sqrt();
    if denom == 0.0 {
        return [[0.0; 2]; 2];
    }
    [
        [(m[0][0] + s) / denom, m[0][1] / denom],
        [m[1][0] / denom, (m[1][1] + s) / denom],
    ]
}

fn matmul2(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

/// Closed-form 2-Wasserstein distance between Gaussians fitted to the two
/// sample sets:
/// sqrt(|m1 - m2|^2 + tr(C1 + C2 - 2 (C2^(1/2) C1 C2^(1/2))^(1/2))).
pub fn gaussian_w2(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<W2Result, CoreError> {
    if a.len() < W2_MIN_SAMPLES || b.len() < W2_MIN_SAMPLES {
        return Err(CoreError::InvalidArgument(format!(
            "gaussian_w2 needs at least {W2_MIN_SAMPLES} samples per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut ga = fit_gauss(a);
    let mut gb = fit_gauss(b);
    let mut regularized = false;
    if is_degenerate(&ga.cov) {
        regularize(&mut ga.cov);
        regularized = true;
    }
    if is_degenerate(&gb.cov) {
        regularize(&mut gb.cov);
        regularized = true;
    }

    let dm = [ga.mean[0] - gb.mean[0], ga.mean[1] - gb.mean[1]];
    let mean_term = dm[0] * dm[0] + dm[1] * dm[1];
    let tr_a = ga.cov[0][0] + ga.cov[1][1];
    let tr_b = gb.cov[0][0] + gb.cov[1][1];

    // tr sqrt(S_b C_a S_b) for 2x2: sqrt(tr X + 2 sqrt(det X)) with
    // det X = det C_a det C_b
    let sb = sqrt_psd2(&gb.cov);
    let x = matmul2(&matmul2(&sb, &ga.cov), &sb);
    let det_x = (x[0][0] * x[1][1] - x[0][1] * x[1][0]).max(0.0);
    let tr_x = x[0][0] + x[1][1];
    let tr_cross = (tr_x + 2.0 * det_x.sqrt()).max(0.0).sqrt();

    let sq = (mean_term + tr_a + tr_b - 2.0 * tr_cross).max(0.0);
    Ok(W2Result {
        value: sq.sqrt(),
        regularized,
    })
}

/// Configuration for the finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub epsilon: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Coordinates sampled per tensor at minimum.
    pub min_coords_per_tensor: usize,
    /// Total coordinate budget across all tensors.
    pub total_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            tolerance: 1e-4,
            min_coords_per_tensor: 2,
            total_coords: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Compare reverse-mode gradients against central differences
/// (loss(p + eps e) - loss(p - eps e)) / (2 eps) on a random coordinate
/// subset covering every parameter tensor. Relative error per coordinate is
/// |a - f| / max(|a|, |f|, 1e-12).
pub fn gradcheck<T: Scalar>(
    params: &ParamSet<T>,
    analytic: &[Tensor<T>],
    mut value_fn: impl FnMut(&ParamSet<T>) -> Result<f64, CoreError>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, CoreError> {
    if analytic.len() != params.len() {
        return Err(CoreError::ShapeMismatch {
            what: "analytic gradients vs parameters",
        });
    }
    let mut rng = derive_rng(cfg.seed, Domain::GradCheck, 0, 0);
    let total_len: usize = (0..params.len()).map(|i| params.tensor(i).shape().len()).sum();

    let mut work = params.clone();
    let mut tensors = Vec::with_capacity(params.len());
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;

    for i in 0..params.len() {
        let len = params.tensor(i).shape().len();
        let proportional = (cfg.total_coords * len).div_ceil(total_len);
        let n = proportional.max(cfg.min_coords_per_tensor).min(len);

        // partial Fisher-Yates for n distinct coordinates
        let mut idx: Vec<usize> = (0..len).collect();
        for k in 0..n {
            let j = k + (rng.gen::<u64>() as usize) % (len - k);
            idx.swap(k, j);
        }

        let mut tensor_max = 0.0f64;
        for &coord in &idx[..n] {
            let orig = work.tensor(i).data()[coord];
            let eps = T::from_f64(cfg.epsilon);
            work.tensor_mut(i).data_mut()[coord] = orig + eps;
            let up = value_fn(&work)?;
            work.tensor_mut(i).data_mut()[coord] = orig - eps;
            let down = value_fn(&work)?;
            work.tensor_mut(i).data_mut()[coord] = orig;

            let numeric = (up - down) / (2.0 * cfg.epsilon);
            let a = analytic[i].data()[coord].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            tensor_max = tensor_max.max(rel);
            checked += 1;
        }
        max_rel = max_rel.max(tensor_max);
        tensors.push(TensorCheck {
            name: params.name(i).into(),
            coords: n,
            max_rel_err: tensor_max,
        });
    }

    Ok(GradCheckReport {
        tensors,
        max_rel_err: max_rel,
        coords_checked: checked,
        tolerance: cfg.tolerance,
    })
}

//! Deterministic synthetic data.
//!
//! Two modes: variable-length spectrogram-like targets built from drifting
//! Gaussian ridges with a blurred copy as the conditioning prior, and 2-D
//! Gaussian-mixture points with an uninformative prior for oracle-friendly
//! distribution metrics. Generation is a pure function of
//! (config, seed domain, batch index, item index).

use alloc::vec::Vec;

use num_traits::Float;
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::rng::{derive_rng, normal_f64, uniform_f64, uniform_usize, Domain};
use crate::scalar::Scalar;
use crate::tensor::{FrameMask, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataMode {
    MelLike,
    Gmm2D,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmComponent {
    pub mean: [f64; 2],
    /// Row-major symmetric 2x2 covariance.
    pub cov: [[f64; 2]; 2],
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub mode: DataMode,
    pub mel_bins: usize,
    /// Inclusive valid-frame range per item.
    pub frame_range: (usize, usize),
    /// Inclusive harmonic track count range per item.
    pub track_range: (usize, usize),
    /// Gaussian blur sigma (in cells) applied to the target to build the
    /// prior; 0 disables blurring.
    pub blur_radius: f64,
    /// Standard deviation of the noise added to the prior.
    pub mu_noise: f64,
    pub gmm: Vec<GmmComponent>,
    /// Valid-region standard deviation the target is normalized to
    /// (matches the schedule's sigma_data).
    pub target_std: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let c = 0.02;
        let m = 0.45;
        DataConfig {
            mode: DataMode::MelLike,
            mel_bins: 32,
            frame_range: (24, 96),
            track_range: (2, 5),
            blur_radius: 1.5,
            mu_noise: 0.05,
            gmm: alloc::vec![
                GmmComponent { mean: [m, m], cov: [[c, 0.0], [0.0, c]], weight: 0.25 },
                GmmComponent { mean: [-m, m], cov: [[c, 0.0], [0.0, c]], weight: 0.25 },
                GmmComponent { mean: [-m, -m], cov: [[c, 0.0], [0.0, c]], weight: 0.25 },
                GmmComponent { mean: [m, -m], cov: [[c, 0.0], [0.0, c]], weight: 0.25 },
            ],
            target_std: 0.5,
            seed: 0,
            batch_size: 16,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        let fail = |msg: alloc::string::String| Err(CoreError::InvalidArgument(msg));
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        if self.target_std <= 0.0 {
            return fail("target_std must be positive".into());
        }
        match self.mode {
            DataMode::MelLike => {
                if self.frame_range.0 < 8 {
                    return fail(alloc::format!(
                        "frame_range lower bound {} must be >= 8",
                        self.frame_range.0
                    ));
                }
                if self.frame_range.0 > self.frame_range.1 {
                    return fail("frame_range must be ordered".into());
                }
                if self.mel_bins < 4 {
                    return fail("mel_bins must be >= 4".into());
                }
                if self.track_range.0 < 1 || self.track_range.0 > self.track_range.1 {
                    return fail("track_range must be ordered and >= 1".into());
                }
                if self.blur_radius < 0.0 || self.mu_noise < 0.0 {
                    return fail("blur_radius and mu_noise must be non-negative".into());
                }
            }
            DataMode::Gmm2D => {
                if self.gmm.is_empty() {
                    return fail("gmm needs at least one component".into());
                }
                let wsum: f64 = self.gmm.iter().map(|c| c.weight).sum();
                if (wsum - 1.0).abs() > 1e-9 {
                    return fail(alloc::format!("gmm weights sum to {wsum}, expected 1"));
                }
                for (i, c) in self.gmm.iter().enumerate() {
                    let [[a, b], [b2, d]] = c.cov;
                    if (b - b2).abs() > 1e-12 {
                        return fail(alloc::format!("gmm component {i} covariance not symmetric"));
                    }
                    if a <= 0.0 || a * d - b * b <= 0.0 {
                        return fail(alloc::format!(
                            "gmm component {i} covariance not positive-definite"
                        ));
                    }
                    if c.weight < 0.0 {
                        return fail(alloc::format!("gmm component {i} weight negative"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Mixture mean, the uninformative prior for Gmm2D mode.
    pub fn gmm_mean(&self) -> [f64; 2] {
        let mut m = [0.0; 2];
        for c in &self.gmm {
            m[0] += c.weight * c.mean[0];
            m[1] += c.weight * c.mean[1];
        }
        m
    }
}

/// One training batch: targets, conditioning prior and the validity mask.
/// Targets and prior are exactly zero on padded frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub x0: Tensor<T>,
    pub mu: Tensor<T>,
    pub mask: FrameMask,
}

impl<T: Scalar> Batch<T> {
    pub fn lengths(&self) -> &[usize] {
        self.mask.lens()
    }
}

/// Batch dispatch on the configured mode.
pub fn gen_batch<T: Scalar>(
    cfg: &DataConfig,
    domain: Domain,
    batch_index: u64,
) -> Result<Batch<T>, CoreError> {
    match cfg.mode {
        DataMode::MelLike => gen_mel_batch(cfg, domain, batch_index),
        DataMode::Gmm2D => gen_gmm_batch(cfg, domain, batch_index),
    }
}

struct Track {
    center: f64,
    slope: f64,
    wobble_amp: f64,
    wobble_freq: f64,
    wobble_phase: f64,
    width: f64,
    base_amp: f64,
    env_freq: f64,
    env_phase: f64,
}

/// Smooth harmonic-like ridge targets with a blurred, noised copy as the
/// conditioning prior.
pub fn gen_mel_batch<T: Scalar>(
    cfg: &DataConfig,
    domain: Domain,
    batch_index: u64,
) -> Result<Batch<T>, CoreError> {
    cfg.validate()?;
    if cfg.mode != DataMode::MelLike {
        return Err(CoreError::InvalidArgument("config mode is not MelLike".into()));
    }
    let bsz = cfg.batch_size;
    let f_bins = cfg.mel_bins;

    // first pass: lengths decide the padded width
    let mut items: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::with_capacity(bsz);
    for item in 0..bsz {
        let mut rng = derive_rng(cfg.seed, domain, batch_index, item as u64);
        let (len, x, mu) = render_mel_item(cfg, &mut rng, f_bins);
        items.push((len, x, mu));
    }
    let frames = items.iter().map(|(l, _, _)| *l).max().unwrap();
    let mask = FrameMask::new(items.iter().map(|(l, _, _)| *l).collect(), frames)?;

    let mut x0 = Tensor::zeros(Shape::new(bsz, 1, f_bins, frames));
    let mut mu = Tensor::zeros(Shape::new(bsz, 1, f_bins, frames));
    for (b, (len, xi, mi)) in items.iter().enumerate() {
        for f in 0..f_bins {
            for j in 0..*len {
                x0.set(b, 0, f, j, T::from_f64(xi[f * len + j]));
                mu.set(b, 0, f, j, T::from_f64(mi[f * len + j]));
            }
        }
    }
    Ok(Batch { x0, mu, mask })
}

fn render_mel_item(cfg: &DataConfig, rng: &mut ChaCha8Rng, f_bins: usize) -> (usize, Vec<f64>, Vec<f64>) {
    let len = uniform_usize(rng, cfg.frame_range.0, cfg.frame_range.1);
    let n_tracks = uniform_usize(rng, cfg.track_range.0, cfg.track_range.1);
    let fb = f_bins as f64;

    let tracks: Vec<Track> = (0..n_tracks)
        .map(|_| Track {
            center: uniform_f64(rng, 2.0, fb - 3.0),
            slope: uniform_f64(rng, -fb / 4.0, fb / 4.0),
            wobble_amp: uniform_f64(rng, 0.0, 2.0),
            wobble_freq: uniform_f64(rng, 0.5, 3.0),
            wobble_phase: uniform_f64(rng, 0.0, 1.0),
            width: uniform_f64(rng, 0.8, 2.2),
            base_amp: uniform_f64(rng, 0.4, 1.0),
            env_freq: uniform_f64(rng, 0.3, 1.5),
            env_phase: uniform_f64(rng, 0.0, 1.0),
        })
        .collect();

    let tau = core::f64::consts::TAU;
    let mut x = alloc::vec![0.0f64; f_bins * len];
    for t in &tracks {
        for j in 0..len {
            let u = j as f64 / len as f64;
            let center =
                t.center + t.slope * u + t.wobble_amp * (tau * (t.wobble_freq * u + t.wobble_phase)).sin();
            let amp = t.base_amp * (1.0 + 0.5 * (tau * (t.env_freq * u + t.env_phase)).sin());
            let inv2w2 = 1.0 / (2.0 * t.width * t.width);
            for f in 0..f_bins {
                let d = f as f64 - center;
                x[f * len + j] += amp * (-d * d * inv2w2).exp();
            }
        }
    }

    // exact valid-region normalization: zero mean, std = target_std
    let n = (f_bins * len) as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 1e-12 {
        let scale = cfg.target_std / std;
        for v in x.iter_mut() {
            *v = (*v - mean) * scale;
        }
    } else {
        for v in x.iter_mut() {
            *v = 0.0;
        }
    }

    // prior: blurred target plus seeded noise
    let mut mu = gaussian_blur(&x, f_bins, len, cfg.blur_radius);
    if cfg.mu_noise > 0.0 {
        for v in mu.iter_mut() {
            *v += cfg.mu_noise * normal_f64(rng);
        }
    }
    (len, x, mu)
}

/// Separable Gaussian blur with edge-renormalized truncated kernels, so the
/// result depends only on the valid region.
fn gaussian_blur(x: &[f64], f_bins: usize, len: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return x.to_vec();
    }
    let hw = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-hw..=hw)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();

    let blur_axis = |src: &[f64], out: &mut [f64], outer: usize, inner: usize, stride_inner: usize, stride_outer: usize| {
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for (wi, w) in weights.iter().enumerate() {
                    let k = wi as isize - hw;
                    let ii = i as isize + k;
                    if ii >= 0 && ii < inner as isize {
                        acc += w * src[o * stride_outer + ii as usize * stride_inner];
                        wsum += w;
                    }
                }
                out[o * stride_outer + i * stride_inner] = acc / wsum;
            }
        }
    };

    // bins axis (stride = len), then frames axis (stride = 1)
    let mut tmp = alloc::vec![0.0f64; x.len()];
    blur_axis(x, &mut tmp, len, f_bins, len, 1);
    let mut out = alloc::vec![0.0f64; x.len()];
    blur_axis(&tmp, &mut out, f_bins, len, 1, len);
    out
}

/// Single-frame 2-vector items from the configured mixture with the global
/// mixture mean as (uninformative) prior.
pub fn gen_gmm_batch<T: Scalar>(
    cfg: &DataConfig,
    domain: Domain,
    batch_index: u64,
) -> Result<Batch<T>, CoreError> {
    cfg.validate()?;
    if cfg.mode != DataMode::Gmm2D {
        return Err(CoreError::InvalidArgument("config mode is not Gmm2D".into()));
    }
    let bsz = cfg.batch_size;
    let mask = FrameMask::full(bsz, 1);
    let mut x0 = Tensor::zeros(Shape::new(bsz, 1, 2, 1));
    let mut mu = Tensor::zeros(Shape::new(bsz, 1, 2, 1));
    let gm = cfg.gmm_mean();

    for item in 0..bsz {
        let mut rng = derive_rng(cfg.seed, domain, batch_index, item as u64);
        let p = sample_gmm_point(cfg, &mut rng);
        x0.set(item, 0, 0, 0, T::from_f64(p[0]));
        x0.set(item, 0, 1, 0, T::from_f64(p[1]));
        mu.set(item, 0, 0, 0, T::from_f64(gm[0]));
        mu.set(item, 0, 1, 0, T::from_f64(gm[1]));
    }
    Ok(Batch { x0, mu, mask })
}

pub fn sample_gmm_point(cfg: &DataConfig, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let u = uniform_f64(rng, 0.0, 1.0);
    let mut acc = 0.0;
    let mut comp = &cfg.gmm[cfg.gmm.len() - 1];
    for c in &cfg.gmm {
        acc += c.weight;
        if u < acc {
            comp = c;
            break;
        }
    }
    // closed-form 2x2 Cholesky factor
    let [[a, b], [_, d]] = comp.cov;
    let l11 = a.sqrt();
    let l21 = b / l11;
    let l22 = (d - l21 * l21).sqrt();
    let z0 = normal_f64(rng);
    let z1 = normal_f64(rng);
    [
        comp.mean[0] + l11 * z0,
        comp.mean[1] + l21 * z0 + l22 * z1,
    ]
}

/// Evaluation batches on a seed domain disjoint from training.
pub fn held_out_batch<T: Scalar>(cfg: &DataConfig, batch_index: u64) -> Result<Batch<T>, CoreError> {
    gen_batch(cfg, Domain::HeldOut, batch_index)
}

/// Endless held-out iterator; callers bound it with `take`.
pub fn held_out_stream<T: Scalar>(
    cfg: &DataConfig,
) -> Result<impl Iterator<Item = Batch<T>> + '_, CoreError> {
    cfg.validate()?;
    Ok((0u64..).map(move |i| {
        held_out_batch(cfg, i).expect("config validated before streaming")
    }))
}

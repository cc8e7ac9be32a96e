//! Deterministic inference: one-step consistency sampling and multi-step
//! probability-flow ODE integration (Euler and Heun) over the Karras grid,
//! with optional trajectory recording for consistency diagnostics.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::loss::masked_mean_sq;
use crate::model::Denoiser;
use crate::rng::normal_tensor;
use crate::scalar::Scalar;
use crate::schedule::{karras_step_grid, NoiseLevel, ScheduleConfig};
use crate::tensor::{FrameMask, Tensor};

/// Anything that maps (state, noise level) to a clean-data estimate. The
/// trait indirection lets tests drive the samplers with analytic oracles.
pub trait DenoiseFn<T: Scalar> {
    fn denoise(&mut self, x: &Tensor<T>, sigma: NoiseLevel) -> Result<Tensor<T>, CoreError>;
}

impl<T: Scalar, F> DenoiseFn<T> for F
where
    F: FnMut(&Tensor<T>, NoiseLevel) -> Result<Tensor<T>, CoreError>,
{
    fn denoise(&mut self, x: &Tensor<T>, sigma: NoiseLevel) -> Result<Tensor<T>, CoreError> {
        self(x, sigma)
    }
}

/// The trained model bound to its conditioning inputs.
pub struct ModelDenoiser<'a, T: Scalar> {
    pub model: &'a Denoiser<T>,
    pub mu: &'a Tensor<T>,
    pub mask: &'a FrameMask,
    pub cfg: &'a ScheduleConfig,
}

impl<'a, T: Scalar> DenoiseFn<T> for ModelDenoiser<'a, T> {
    fn denoise(&mut self, x: &Tensor<T>, sigma: NoiseLevel) -> Result<Tensor<T>, CoreError> {
        self.model.denoise(x, sigma, self.mu, self.mask, self.cfg)
    }
}

/// States visited by a sampler, from sigma_max down to 0, sigmas strictly
/// decreasing.
#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    states: Vec<(NoiseLevel, Tensor<T>)>,
}

impl<T: Scalar> Trajectory<T> {
    fn new() -> Self {
        Trajectory { states: Vec::new() }
    }

    fn push(&mut self, sigma: NoiseLevel, x: Tensor<T>) {
        if let Some((last, _)) = self.states.last() {
            debug_assert!(sigma.get() < last.get(), "trajectory sigmas must decrease");
        }
        self.states.push((sigma, x));
    }

    pub fn states(&self) -> &[(NoiseLevel, Tensor<T>)] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// A finished sample with its denoiser-call count and optional trajectory.
pub struct SampleResult<T> {
    pub x: Tensor<T>,
    pub nfe: usize,
    pub trajectory: Option<Trajectory<T>>,
}

/// Initial state mu + sigma_max * eps, zeroed on padding.
pub fn init_state<T: Scalar>(
    mu: &Tensor<T>,
    mask: &FrameMask,
    rng: &mut ChaCha8Rng,
    cfg: &ScheduleConfig,
) -> Tensor<T> {
    let eps = normal_tensor::<T>(rng, mu.shape(), mask);
    let mut x = mu
        .add_scaled(&eps, T::from_f64(cfg.sigma_max))
        .expect("shapes match by construction");
    mask.zero_padding(&mut x);
    x
}

/// One denoiser evaluation from the top of the noise range: NFE = 1.
pub fn sample_onestep<T: Scalar>(
    den: &mut impl DenoiseFn<T>,
    mu: &Tensor<T>,
    mask: &FrameMask,
    rng: &mut ChaCha8Rng,
    cfg: &ScheduleConfig,
) -> Result<SampleResult<T>, CoreError> {
    let x = init_state(mu, mask, rng, cfg);
    let mut out = den.denoise(&x, NoiseLevel::new(cfg.sigma_max)?)?;
    mask.zero_padding(&mut out);
    Ok(SampleResult {
        x: out,
        nfe: 1,
        trajectory: None,
    })
}

/// Explicit Euler over the Karras grid; the final step to sigma = 0 reduces
/// to taking the last denoiser output, so a 1-step grid equals one-step
/// sampling exactly.
pub fn sample_euler<T: Scalar>(
    den: &mut impl DenoiseFn<T>,
    mu: &Tensor<T>,
    mask: &FrameMask,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
    cfg: &ScheduleConfig,
    record: bool,
) -> Result<SampleResult<T>, CoreError> {
    let grid = karras_step_grid(n_steps, cfg)?;
    let mut x = init_state(mu, mask, rng, cfg);
    let mut nfe = 0;
    let mut traj = record.then(Trajectory::new);
    if let Some(t) = traj.as_mut() {
        t.push(grid[0], x.clone());
    }

    for pair in grid.windows(2) {
        let (sigma, next) = (pair[0], pair[1]);
        let f = den.denoise(&x, sigma)?;
        nfe += 1;
        if next.is_zero() {
            x = f;
        } else {
            // x + (next - sigma) * (x - f) / sigma
            let d = x.add_scaled(&f, -T::one())?;
            let h = T::from_f64((next.get() - sigma.get()) / sigma.get());
            x = x.add_scaled(&d, h)?;
        }
        mask.zero_padding(&mut x);
        if let Some(t) = traj.as_mut() {
            t.push(next, x.clone());
        }
    }
    Ok(SampleResult {
        x,
        nfe,
        trajectory: traj,
    })
}

/// Heun: Euler predictor plus trapezoidal corrector, corrector skipped on
/// the final step to sigma = 0. NFE = 2n - 1.
pub fn sample_heun<T: Scalar>(
    den: &mut impl DenoiseFn<T>,
    mu: &Tensor<T>,
    mask: &FrameMask,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
    cfg: &ScheduleConfig,
) -> Result<SampleResult<T>, CoreError> {
    let grid = karras_step_grid(n_steps, cfg)?;
    let mut x = init_state(mu, mask, rng, cfg);
    let mut nfe = 0;

    for pair in grid.windows(2) {
        let (sigma, next) = (pair[0], pair[1]);
        let f = den.denoise(&x, sigma)?;
        nfe += 1;
        if next.is_zero() {
            x = f;
        } else {
            let h = next.get() - sigma.get();
            let d = x
                .add_scaled(&f, -T::one())?
                .map(|v| v * T::from_f64(1.0 / sigma.get()));
            let x_pred = x.add_scaled(&d, T::from_f64(h))?;
            let f_pred = den.denoise(&x_pred, next)?;
            nfe += 1;
            let d_pred = x_pred
                .add_scaled(&f_pred, -T::one())?
                .map(|v| v * T::from_f64(1.0 / next.get()));
            let avg = d.add_scaled(&d_pred, T::one())?;
            x = x.add_scaled(&avg, T::from_f64(0.5 * h))?;
        }
        mask.zero_padding(&mut x);
    }
    Ok(SampleResult {
        x,
        nfe,
        trajectory: None,
    })
}

/// How far the denoiser is from a consistency model along one trajectory:
/// the mean masked distance between its outputs at every recorded positive
/// noise level and its output at the lowest positive one.
pub fn consistency_deviation<T: Scalar>(
    den: &mut impl DenoiseFn<T>,
    trajectory: &Trajectory<T>,
    mask: &FrameMask,
) -> Result<f64, CoreError> {
    let positive: Vec<&(NoiseLevel, Tensor<T>)> = trajectory
        .states()
        .iter()
        .filter(|(s, _)| s.get() > 0.0)
        .collect();
    let Some((last_sigma, last_x)) = positive.last().map(|p| (p.0, &p.1)) else {
        return Err(CoreError::InvalidArgument(
            "trajectory has no states at positive noise levels".into(),
        ));
    };
    let reference = den.denoise(last_x, last_sigma)?;
    let mut acc = 0.0;
    for (sigma, x) in &positive {
        let out = den.denoise(x, *sigma)?;
        acc += masked_mean_sq(&out, &reference, mask)?.value.as_f64();
    }
    Ok(acc / positive.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, Domain};
    use crate::tensor::Shape;
    use num_traits::Float;

    /// Closed-form posterior-mean denoiser for scalar data x0 ~ N(0, s2).
    fn gaussian_oracle(s2: f64) -> impl FnMut(&Tensor<f64>, NoiseLevel) -> Result<Tensor<f64>, CoreError>
    {
        move |x, sigma| {
            let c = s2 / (s2 + sigma.get() * sigma.get());
            Ok(x.map(|v| v * c))
        }
    }

    /// Exact PF-ODE endpoint for the oracle: x(0) = x(s_max) * s / sqrt(s2 + s_max^2).
    fn exact_endpoint(x_init: f64, s2: f64, sigma_max: f64) -> f64 {
        x_init * (s2 / (s2 + sigma_max * sigma_max)).sqrt()
    }

    fn test_cfg() -> ScheduleConfig {
        ScheduleConfig {
            sigma_max: 10.0,
            ..ScheduleConfig::default()
        }
    }

    #[test]
    fn init_state_properties() {
        let cfg = ScheduleConfig::default();
        let mask = FrameMask::new(alloc::vec![3, 5], 5).unwrap();
        let mut rng = derive_rng(1, Domain::SampleNoise, 0, 0);
        let mut mu = Tensor::full(Shape::new(2, 1, 4, 5), 0.25f64);
        mask.zero_padding(&mut mu);
        let x = init_state(&mu, &mask, &mut rng, &cfg);
        assert_eq!(x.shape(), mu.shape());
        for h in 0..4 {
            for j in 3..5 {
                assert_eq!(x.at(0, 0, h, j), 0.0);
            }
        }
        // reproducible
        let mut rng2 = derive_rng(1, Domain::SampleNoise, 0, 0);
        let y = init_state(&mu, &mask, &mut rng2, &cfg);
        assert_eq!(x, y);

        // sigma_max -> 0 limit returns mu
        let tiny = ScheduleConfig {
            sigma_max: 1e-300,
            sigma_min: 1e-301,
            ..cfg
        };
        let mut rng3 = derive_rng(1, Domain::SampleNoise, 0, 0);
        let z = init_state(&mu, &mask, &mut rng3, &tiny);
        let diff = z.add_scaled(&mu, -1.0).unwrap().max_abs();
        assert!(diff < 1e-295);
    }

    #[test]
    fn onestep_equals_euler_one_bitwise() {
        let cfg = test_cfg();
        let mask = FrameMask::full(4, 1);
        let mu = Tensor::zeros(Shape::new(4, 1, 1, 1));
        let mut den = gaussian_oracle(1.0);
        let mut rng_a = derive_rng(7, Domain::SampleNoise, 0, 0);
        let one = sample_onestep(&mut den, &mu, &mask, &mut rng_a, &cfg).unwrap();
        let mut rng_b = derive_rng(7, Domain::SampleNoise, 0, 0);
        let euler = sample_euler(&mut den, &mu, &mask, 1, &mut rng_b, &cfg, false).unwrap();
        assert_eq!(one.x, euler.x);
        assert_eq!(one.nfe, 1);
        assert_eq!(euler.nfe, 1);

        let mut rng_c = derive_rng(7, Domain::SampleNoise, 0, 0);
        let heun = sample_heun(&mut den, &mu, &mask, 1, &mut rng_c, &cfg).unwrap();
        assert_eq!(one.x, heun.x);
        assert_eq!(heun.nfe, 1);
    }

    #[test]
    fn nfe_counters_are_exact() {
        let cfg = test_cfg();
        let mask = FrameMask::full(1, 1);
        let mu = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let mut den = gaussian_oracle(1.0);
        for n in [1usize, 2, 5, 17] {
            let mut rng = derive_rng(3, Domain::SampleNoise, 0, 0);
            let e = sample_euler(&mut den, &mu, &mask, n, &mut rng, &cfg, false).unwrap();
            assert_eq!(e.nfe, n);
            let mut rng = derive_rng(3, Domain::SampleNoise, 0, 0);
            let h = sample_heun(&mut den, &mu, &mask, n, &mut rng, &cfg).unwrap();
            assert_eq!(h.nfe, 2 * n - 1);
        }
    }

    #[test]
    fn trajectory_recording_shape() {
        let cfg = test_cfg();
        let mask = FrameMask::full(1, 1);
        let mu = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let mut den = gaussian_oracle(1.0);
        let mut rng = derive_rng(5, Domain::SampleNoise, 0, 0);
        let r = sample_euler(&mut den, &mu, &mask, 6, &mut rng, &cfg, true).unwrap();
        let t = r.trajectory.unwrap();
        assert_eq!(t.len(), 7);
        for w in t.states().windows(2) {
            assert!(w[0].0.get() > w[1].0.get());
        }
        assert_eq!(t.states()[0].0.get(), cfg.sigma_max);
        assert_eq!(t.states()[6].0.get(), 0.0);
        // terminal state equals the last denoiser output by the step algebra
        assert_eq!(t.states()[6].1, r.x);
    }

    #[test]
    fn integrator_orders_on_gaussian_oracle() {
        // Euler converges at first order, Heun at second, toward the exact
        // endpoint of the linear oracle ODE.
        let cfg = test_cfg();
        let s2 = 1.0;
        let batch = 64;
        let mask = FrameMask::full(batch, 1);
        let mu = Tensor::zeros(Shape::new(batch, 1, 1, 1));

        let rms_err = |n: usize, heun: bool| -> f64 {
            let mut den = gaussian_oracle(s2);
            let mut rng = derive_rng(11, Domain::SampleNoise, 0, 0);
            let init = init_state(&mu, &mask, &mut rng, &cfg);
            let mut rng = derive_rng(11, Domain::SampleNoise, 0, 0);
            let out = if heun {
                sample_heun(&mut den, &mu, &mask, n, &mut rng, &cfg).unwrap().x
            } else {
                sample_euler(&mut den, &mu, &mask, n, &mut rng, &cfg, false)
                    .unwrap()
                    .x
            };
            let mut acc = 0.0;
            for b in 0..batch {
                let exact = exact_endpoint(init.at(b, 0, 0, 0), s2, cfg.sigma_max);
                let d = out.at(b, 0, 0, 0) - exact;
                acc += d * d;
            }
            (acc / batch as f64).sqrt()
        };

        let ns = [4usize, 8, 16, 32];
        let euler_errs: alloc::vec::Vec<f64> = ns.iter().map(|&n| rms_err(n, false)).collect();
        let heun_errs: alloc::vec::Vec<f64> = ns.iter().map(|&n| rms_err(n, true)).collect();
        let order = |errs: &[f64]| -> f64 {
            let mut acc = 0.0;
            for w in errs.windows(2) {
                acc += (w[0] / w[1]).log2();
            }
            acc / (errs.len() - 1) as f64
        };
        let eo = order(&euler_errs);
        let ho = order(&heun_errs);
        assert!(eo >= 0.9, "euler order {eo}, errs {euler_errs:?}");
        assert!(ho >= 1.8, "heun order {ho}, errs {heun_errs:?}");
        // errors decrease monotonically
        for w in euler_errs.windows(2) {
            assert!(w[1] < w[0]);
        }
        for w in heun_errs.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn consistency_deviation_zero_for_consistent_denoiser() {
        // x0-predicting oracle independent of sigma: deviation is exactly 0
        let cfg = test_cfg();
        let mask = FrameMask::full(2, 1);
        let mu = Tensor::zeros(Shape::new(2, 1, 1, 1));
        let constant = |x: &Tensor<f64>, _s: NoiseLevel| -> Result<Tensor<f64>, CoreError> {
            Ok(x.map(|v| v * 0.0 + 0.7))
        };
        let mut den = constant;
        let mut rng = derive_rng(2, Domain::SampleNoise, 0, 0);
        let r = sample_euler(&mut den, &mu, &mask, 5, &mut rng, &cfg, true).unwrap();
        let dev = consistency_deviation(&mut den, r.trajectory.as_ref().unwrap(), &mask).unwrap();
        assert_eq!(dev, 0.0);
    }

    #[test]
    fn consistency_deviation_degenerate_and_error_cases() {
        let cfg = test_cfg();
        let mask = FrameMask::full(1, 1);
        let mu = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let mut den = gaussian_oracle(0.5);
        // single positive state: deviation 0 against itself
        let mut rng = derive_rng(2, Domain::SampleNoise, 0, 0);
        let r = sample_euler(&mut den, &mu, &mask, 1, &mut rng, &cfg, true).unwrap();
        let dev = consistency_deviation(&mut den, r.trajectory.as_ref().unwrap(), &mask).unwrap();
        assert_eq!(dev, 0.0);
        // empty trajectory: argument error
        let empty = Trajectory::<f64> { states: alloc::vec::Vec::new() };
        assert!(consistency_deviation(&mut den, &empty, &mask).is_err());
    }

    #[test]
    fn nonconsistent_denoiser_has_positive_deviation() {
        let cfg = test_cfg();
        let mask = FrameMask::full(2, 1);
        let mu = Tensor::zeros(Shape::new(2, 1, 1, 1));
        let mut den = gaussian_oracle(1.0);
        let mut rng = derive_rng(4, Domain::SampleNoise, 0, 0);
        let r = sample_euler(&mut den, &mu, &mask, 8, &mut rng, &cfg, true).unwrap();
        let dev = consistency_deviation(&mut den, r.trajectory.as_ref().unwrap(), &mask).unwrap();
        assert!(dev > 0.0);
    }

    #[test]
    fn samplers_are_deterministic() {
        let cfg = test_cfg();
        let mask = FrameMask::full(3, 1);
        let mu = Tensor::full(Shape::new(3, 1, 1, 1), 0.1f64);
        let run = || {
            let mut den = gaussian_oracle(0.8);
            let mut rng = derive_rng(6, Domain::SampleNoise, 42, 0);
            sample_heun(&mut den, &mu, &mask, 7, &mut rng, &cfg).unwrap().x
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}

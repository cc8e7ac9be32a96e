//! Adam updates, EMA shadow parameters and gradient-norm clipping.

use alloc::vec::Vec;

use num_traits::Float;

use crate::error::CoreError;
use crate::model::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected adaptive moment state. The moment tensors cover exactly
/// the model parameter set, which is how the tuning-phase freeze contract
/// is enforced (there is nothing else to optimize).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamSet<T>, hyper: AdamHyper) -> Self {
        OptimState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            hyper,
        }
    }

    pub fn matches(&self, params: &ParamSet<T>) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && (0..params.len()).all(|i| {
                self.m[i].shape() == params.tensor(i).shape()
                    && self.v[i].shape() == params.tensor(i).shape()
            })
    }
}

/// One Adam step in place. Rejects non-finite gradients before touching any
/// state so a bad step can be diagnosed and dropped.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    opt: &mut OptimState<T>,
) -> Result<(), CoreError> {
    if grads.len() != params.len() || !opt.matches(params) {
        return Err(CoreError::ShapeMismatch {
            what: "gradients vs optimizer state",
        });
    }
    for g in grads {
        if !g.is_finite() {
            return Err(CoreError::NonFinite {
                what: "gradient tensor",
            });
        }
    }
    opt.step += 1;
    let h = opt.hyper;
    let b1 = T::from_f64(h.beta1);
    let b2 = T::from_f64(h.beta2);
    let one = T::one();
    let bias1 = T::from_f64(1.0 - h.beta1.powi(opt.step as i32));
    let bias2 = T::from_f64(1.0 - h.beta2.powi(opt.step as i32));
    let lr = T::from_f64(h.lr);
    let eps = T::from_f64(h.eps);

    for i in 0..params.len() {
        let g = grads[i].data();
        let m = opt.m[i].data_mut();
        let v = opt.v[i].data_mut();
        let p = params.tensor_mut(i).data_mut();
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// EMA shadow of the parameters, used for generation only.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<T> {
    pub shadow: Vec<Tensor<T>>,
    pub decay: f64,
}

impl<T: Scalar> EmaState<T> {
    /// Shadow initialized to the current parameters.
    pub fn new(params: &ParamSet<T>, decay: f64) -> Self {
        EmaState {
            shadow: params.tensors(),
            decay,
        }
    }
}

/// shadow <- decay * shadow + (1 - decay) * params, elementwise.
pub fn ema_update<T: Scalar>(ema: &mut EmaState<T>, params: &ParamSet<T>) {
    let d = T::from_f64(ema.decay);
    let one = T::one();
    for (s, (_, p)) in ema.shadow.iter_mut().zip(params.iter().map(|(n, t)| (n, t))) {
        for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
            *sv = d * *sv + (one - d) * pv;
        }
    }
}

/// Global L2 norm of a gradient collection, accumulated in f64.
pub fn grad_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    let mut acc = 0.0f64;
    for g in grads {
        for v in g.data() {
            let x = v.as_f64();
            acc += x * x;
        }
    }
    acc.sqrt()
}

/// Scale gradients so their global norm does not exceed `clip`. Returns the
/// pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], clip: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > clip && norm > 0.0 {
        let scale = T::from_f64(clip / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

//! Optimisers, gradient clipping and learning-rate schedules.

use crate::error::{Error, Result};
use crate::rnn::RnnParams;
use crate::tensor::Tensor;

/// Denominator guard shared by both optimisers.
pub const EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    /// `v ← ρv + (1−ρ)g²`, `θ ← θ − lr·g/(√v + ε)`.
    RmsProp { decay: f64 },
    Adam { beta1: f64, beta2: f64 },
}

impl Optimizer {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        let ok = match *self {
            Optimizer::RmsProp { decay } => unit(decay),
            Optimizer::Adam { beta1, beta2 } => unit(beta1) && unit(beta2),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("optimizer coefficients must lie in [0, 1): {self:?}")))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::RmsProp { .. } => "rmsprop",
            Optimizer::Adam { .. } => "adam",
        }
    }
}

/// Per-parameter moving averages. `first` is only used by Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(params: &RnnParams) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        OptimizerState { first: zeros(), second: zeros(), steps: 0 }
    }
}

/// Applies one update in place. Non-finite gradients are rejected before any
/// parameter changes.
pub fn optimizer_step(
    params: &mut RnnParams,
    state: &mut OptimizerState,
    grads: &[Tensor],
    lr: f64,
    opt: &Optimizer,
) -> Result<()> {
    let names = params.names();
    if grads.len() != names.len() {
        return Err(Error::invalid(format!("{} gradients for {} parameters", grads.len(), names.len())));
    }
    for (g, name) in grads.iter().zip(&names) {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.steps += 1;
    let t = state.steps as f64;
    for (i, theta) in params.tensors_mut().into_iter().enumerate() {
        let g = grads[i].data();
        let v = state.second[i].data_mut();
        match *opt {
            Optimizer::RmsProp { decay } => {
                for ((th, &gi), vi) in theta.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                    *vi = decay * *vi + (1.0 - decay) * gi * gi;
                    *th -= lr * gi / (vi.sqrt() + EPS);
                }
            }
            Optimizer::Adam { beta1, beta2 } => {
                let m = state.first[i].data_mut();
                let c1 = 1.0 - beta1.powf(t);
                let c2 = 1.0 - beta2.powf(t);
                for (((th, &gi), mi), vi) in theta.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    *th -= lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
                }
            }
        }
    }
    Ok(())
}

/// Rescales all gradients together so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid(format!("clip norm must be positive, got {max_norm}")));
    }
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Linear decay to zero over the final `epochs` epochs, per step.
    LinearAnneal { epochs: usize },
    /// `lr · rate^step`.
    Exponential { rate: f64 },
}

impl LrSchedule {
    /// Learning rate for 0-based optimiser step `step` of a run of
    /// `total_epochs` epochs with `steps_per_epoch` steps each.
    pub fn lr(&self, initial: f64, step: u64, steps_per_epoch: u64, total_epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant => initial,
            LrSchedule::LinearAnneal { epochs } => {
                let total = steps_per_epoch * total_epochs as u64;
                let window = (steps_per_epoch * epochs.min(total_epochs) as u64).max(1);
                let remaining = total.saturating_sub(step);
                initial * (remaining as f64 / window as f64).min(1.0)
            }
            LrSchedule::Exponential { rate } => initial * rate.powf(step as f64),
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;
    /// `constant`, `linear:<epochs>` or `exp:<rate>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown learning-rate schedule {s:?}"));
        match s.split_once(':') {
            None if s == "constant" => Ok(LrSchedule::Constant),
            Some(("linear", e)) => Ok(LrSchedule::LinearAnneal { epochs: e.parse().map_err(|_| bad())? }),
            Some(("exp", r)) => {
                let rate: f64 = r.parse().map_err(|_| bad())?;
                if !(rate > 0.0 && rate <= 1.0) {
                    return Err(bad());
                }
                Ok(LrSchedule::Exponential { rate })
            }
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LrSchedule::Constant => f.write_str("constant"),
            LrSchedule::LinearAnneal { epochs } => write!(f, "linear:{epochs}"),
            LrSchedule::Exponential { rate } => write!(f, "exp:{rate}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rnn::CellKind;

    fn one_param() -> RnnParams {
        RnnParams::zeros(CellKind::Rnn, 1, 1, 1)
    }

    fn grads_with(first: f64, params: &RnnParams) -> Vec<Tensor> {
        let mut g: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        g[0].data_mut()[0] = first;
        g
    }

    #[test]
    fn rmsprop_reference_step() {
        let mut p = one_param();
        let mut s = OptimizerState::new(&p);
        let g = grads_with(1.0, &p);
        optimizer_step(&mut p, &mut s, &g, 0.1, &Optimizer::RmsProp { decay: 0.5 }).unwrap();
        assert_eq!(s.second[0].data()[0], 0.5);
        let expected = -0.1 / (0.5f64.sqrt() + 1e-8);
        assert!((p.tensors()[0].data()[0] - expected).abs() < 1e-15);
        assert!((expected + 0.14142).abs() < 1e-5);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for opt in [Optimizer::RmsProp { decay: 0.5 }, Optimizer::Adam { beta1: 0.9, beta2: 0.999 }] {
            let mut p = one_param();
            let before = p.clone();
            let mut s = OptimizerState::new(&p);
            let g = grads_with(0.0, &p);
            optimizer_step(&mut p, &mut s, &g, 0.1, &opt).unwrap();
            assert_eq!(p, before);
        }
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = one_param();
        let mut s = OptimizerState::new(&p);
        let g = grads_with(3.0, &p);
        optimizer_step(&mut p, &mut s, &g, 0.01, &Optimizer::Adam { beta1: 0.9, beta2: 0.999 }).unwrap();
        assert!((p.tensors()[0].data()[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_is_named() {
        let mut p = one_param();
        let mut s = OptimizerState::new(&p);
        let g = grads_with(f64::NAN, &p);
        let err = optimizer_step(&mut p, &mut s, &g, 0.1, &Optimizer::RmsProp { decay: 0.5 }).unwrap_err();
        assert!(err.to_string().contains("rnn.h.w"), "{err}");
        assert_eq!(s.steps, 0);
    }

    #[test]
    fn clipping() {
        let mut small = vec![Tensor::vector(vec![0.3, 0.4])];
        assert_eq!(clip_gradients(&mut small, 1.0).unwrap(), 0.5);
        assert_eq!(small[0].data(), &[0.3, 0.4]);
        let mut big = vec![Tensor::vector(vec![1.2]), Tensor::vector(vec![1.6])];
        assert_eq!(clip_gradients(&mut big, 1.0).unwrap(), 2.0);
        let norm: f64 = big.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!((big[0].data()[0] / big[1].data()[0] - 0.75).abs() < 1e-15);
        assert!(clip_gradients(&mut big, 0.0).is_err());
    }

    #[test]
    fn schedules() {
        let lin = LrSchedule::LinearAnneal { epochs: 2 };
        assert_eq!(lin.lr(1.0, 0, 10, 4), 1.0);
        assert_eq!(lin.lr(1.0, 20, 10, 4), 1.0);
        assert_eq!(lin.lr(1.0, 30, 10, 4), 0.5);
        assert_eq!(lin.lr(1.0, 40, 10, 4), 0.0);
        assert_eq!(LrSchedule::Exponential { rate: 0.5 }.lr(1.0, 3, 10, 4), 0.125);
        for s in ["constant", "linear:50", "exp:0.99"] {
            assert_eq!(s.parse::<LrSchedule>().unwrap().to_string(), s);
        }
    }
}

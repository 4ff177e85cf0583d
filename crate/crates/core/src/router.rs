//! Behavior-guided router over the behavior experts and the adaptive
//! sparsity regularizer that keeps its density near a norm-dependent target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Var;
use crate::scalar::Scalar;

/// Realised routing for one item.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterOutput<T> {
    pub weights: Vec<T>,
    /// `weights[j] > 0`.
    pub active_mask: Vec<bool>,
    /// Fraction of inactive experts.
    pub s_current: T,
}

impl<T: Scalar> RouterOutput<T> {
    pub fn from_weights(weights: Vec<T>) -> Self {
        let active_mask: Vec<bool> = weights.iter().map(|&w| w > T::zero()).collect();
        let active = active_mask.iter().filter(|&&a| a).count();
        let n = weights.len();
        let s_current = if n == 0 {
            T::zero()
        } else {
            T::one() - T::from_usize_lossy(active) / T::from_usize_lossy(n)
        };
        Self {
            weights,
            active_mask,
            s_current,
        }
    }

    pub fn active_count(&self) -> usize {
        self.active_mask.iter().filter(|&&a| a).count()
    }

    pub fn active_fraction(&self) -> T {
        T::one() - self.s_current
    }
}

/// Router weights for a batch and their per-item summaries.
pub struct Routed<'t, T> {
    /// `B × N_b`, elementwise nonnegative.
    pub weights: Var<'t, T>,
    pub outputs: Vec<RouterOutput<T>>,
}

/// `σ(n_norm) · relu(pre)` where `pre` is the router network's output
/// (bias included) and `n_norm` is the `B × 1` normalised behavior norm.
pub fn route_behavior<'t, T: Scalar>(pre: Var<'t, T>, n_norm: Var<'t, T>) -> Routed<'t, T> {
    let weights = pre.relu().mul_col(n_norm.sigmoid());
    let outputs = weights
        .value()
        .iter_rows()
        .map(|r| RouterOutput::from_weights(r.to_vec()))
        .collect();
    Routed { weights, outputs }
}

/// `θ · (1 − n_norm)` clamped to `[0, 1]`.
pub fn target_sparsity<T: Scalar>(n_norm: T, theta: T) -> T {
    (theta * (T::one() - n_norm)).max(T::zero()).min(T::one())
}

/// Mean active fraction over the batch divided by `1 − s_target_mean`.
pub fn load_balance_factor<T: Scalar>(outputs: &[RouterOutput<T>], s_target_mean: T) -> Result<T> {
    if outputs.is_empty() {
        return Err(Error::Precondition("load balance over an empty batch".into()));
    }
    if s_target_mean.as_f64() >= 1.0 - 1e-9 {
        return Err(Error::Precondition(format!(
            "degenerate sparsity target {s_target_mean}: no expert may be active"
        )));
    }
    let density: T = outputs.iter().map(|o| o.active_fraction()).sum::<T>() / T::from_usize_lossy(outputs.len());
    Ok(density / (T::one() - s_target_mean))
}

/// `λ · f_lb · mean_t ‖R_t‖₁`. Weights are nonnegative so the L1 norm is the
/// row sum.
pub fn sparsity_regularization<'t, T: Scalar>(weights: Var<'t, T>, f_lb: T, lambda: T) -> Var<'t, T> {
    weights.sum_cols().mean().scale(lambda * f_lb)
}

/// Multiplicative λ controller.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityState {
    pub lambda: f64,
    pub update_factor: f64,
    pub theta: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl SparsityState {
    pub fn new(lambda: f64, update_factor: f64, theta: f64, lambda_min: f64, lambda_max: f64) -> Result<Self> {
        if update_factor.is_nan() || update_factor <= 1.0 {
            return Err(Error::Config(format!("update_factor must exceed 1, got {update_factor}")));
        }
        if !(lambda_min > 0.0 && lambda_min <= lambda_max) {
            return Err(Error::Config(format!(
                "lambda bounds must satisfy 0 < min <= max, got [{lambda_min}, {lambda_max}]"
            )));
        }
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::Config(format!("theta must lie in [0, 1], got {theta}")));
        }
        Ok(Self {
            lambda: lambda.clamp(lambda_min, lambda_max),
            update_factor,
            theta,
            lambda_min,
            lambda_max,
        })
    }

    /// Raises λ when the batch is denser than targeted, lowers it when
    /// sparser, leaves it on exact equality.
    pub fn updated(&self, s_target_mean: f64, s_current_mean: f64) -> Self {
        let lambda = if s_current_mean < s_target_mean {
            self.lambda * self.update_factor
        } else if s_current_mean > s_target_mean {
            self.lambda / self.update_factor
        } else {
            self.lambda
        };
        Self {
            lambda: lambda.clamp(self.lambda_min, self.lambda_max),
            ..*self
        }
    }
}

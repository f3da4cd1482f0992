//! Flow-matching machinery: linear interpolants, velocity targets, and
//! the decomposed reconstruction/generation loss.
//!
//! Orientation: t = 0 is pure noise, t = 1 is data. The velocity field
//! the model learns is u = x1 - x0, constant in t for the linear path.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One noising state: data x1, noise x0, time t, interpolant xt.
#[derive(Debug, Clone)]
pub struct FlowState<T: Scalar> {
    pub t: f64,
    pub x0: Tensor<T>,
    pub x1: Tensor<T>,
    pub xt: Tensor<T>,
}

impl<T: Scalar> FlowState<T> {
    /// Build from an explicit noise draw.
    pub fn new(x0: Tensor<T>, x1: Tensor<T>, t: f64) -> Result<Self> {
        let xt = interpolate(&x0, &x1, t)?;
        Ok(FlowState { t, x0, x1, xt })
    }

    /// Draw x0 ~ N(0, 1) elementwise and interpolate.
    pub fn draw<R: Rng + ?Sized>(x1: Tensor<T>, t: f64, rng: &mut R) -> Result<Self> {
        let x0 = Tensor::randn(x1.shape(), T::one(), rng);
        Self::new(x0, x1, t)
    }
}

/// Uniform timestep in [0, 1].
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.gen::<f64>()
}

/// Linear interpolant xt = (1-t)·x0 + t·x1. Exact at both endpoints.
pub fn interpolate<T: Scalar>(x0: &Tensor<T>, x1: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("timestep {t} outside [0, 1]")));
    }
    let tt = T::from_f64(t);
    let one_minus = T::from_f64(1.0 - t);
    x0.scale(one_minus).add(&x1.scale(tt))
}

/// Velocity target u = x1 - x0 (d xt / dt along the linear path).
pub fn velocity_target<T: Scalar>(x0: &Tensor<T>, x1: &Tensor<T>) -> Result<Tensor<T>> {
    x1.sub(x0)
}

/// Differentiable loss terms; all three are scalar graph nodes.
#[derive(Debug, Clone)]
pub struct LossTerms<T: Scalar> {
    pub total: Tensor<T>,
    pub reference: Tensor<T>,
    pub target: Tensor<T>,
}

/// Plain-number view of the loss for logging and tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub reference: f64,
    pub target: f64,
}

impl<T: Scalar> LossTerms<T> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            total: self.total.item().as_f64(),
            reference: self.reference.item().as_f64(),
            target: self.target.item().as_f64(),
        }
    }
}

fn mse<T: Scalar>(v: &Tensor<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
    let d = v.sub(u)?;
    Ok(d.mul(&d)?.mean_all())
}

/// Decomposed flow-matching loss over per-unit velocity lists.
///
/// `v[i]` is the predicted velocity for unit i, `u[i]` its target; the
/// last unit is the generation target, the first `n_ref` are
/// references. The reference term is the uniform mean of per-unit MSEs
/// (zero when there are no references), the target term is the final
/// unit's MSE, and the total is their unweighted sum.
pub fn compute_loss<T: Scalar>(
    v: &[Tensor<T>],
    u: &[Tensor<T>],
    n_ref: usize,
) -> Result<LossTerms<T>> {
    if v.is_empty() || v.len() != u.len() {
        return Err(Error::Contract(format!(
            "velocity lists misaligned: {} predictions vs {} targets",
            v.len(),
            u.len()
        )));
    }
    if n_ref != v.len() - 1 {
        return Err(Error::Contract(format!(
            "n_ref {} does not match {} units (expected N-1)",
            n_ref,
            v.len()
        )));
    }
    for (i, (vi, ui)) in v.iter().zip(u).enumerate() {
        if vi.shape() != ui.shape() {
            return Err(Error::ShapeMismatch {
                op: "compute_loss",
                lhs: vi.shape().to_vec(),
                rhs: ui.shape().to_vec(),
            });
        }
        let _ = i;
    }

    let reference = if n_ref == 0 {
        Tensor::scalar(T::zero())
    } else {
        let mut acc = mse(&v[0], &u[0])?;
        for i in 1..n_ref {
            acc = acc.add(&mse(&v[i], &u[i])?)?;
        }
        acc.scale(T::one() / T::from_f64(n_ref as f64))
    };
    let target = mse(&v[n_ref], &u[n_ref])?;
    let total = reference.add(&target)?;
    Ok(LossTerms {
        total,
        reference,
        target,
    })
}

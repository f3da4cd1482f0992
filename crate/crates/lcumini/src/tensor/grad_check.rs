//! Finite-difference verification of reverse-mode gradients.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Compare analytic gradients of `f` against central finite differences.
///
/// `f` must rebuild its graph from the given leaf parameters on every
/// call, returning a scalar loss. Returns the worst relative error
/// `|a - n| / (|a| + |n| + 1e-12)` over every element of every
/// parameter. Parameters the loss does not depend on contribute zero on
/// both sides and are therefore safe to include.
pub fn finite_diff_check<T, F>(f: F, params: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn() -> Result<Tensor<T>>,
{
    for p in params {
        if !p.requires_grad() {
            return Err(Error::Contract(
                "finite_diff_check: all checked parameters must require grad".into(),
            ));
        }
        p.zero_grad();
    }

    let loss = f()?;
    if !loss.all_finite() {
        return Err(Error::NonFinite("loss in finite_diff_check".into()));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.grad()
                .map(|g| g.iter().map(|v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    let epst = T::from_f64(eps);
    let mut worst = 0.0f64;
    for (p, ga) in params.iter().zip(&analytic) {
        for i in 0..p.numel() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + epst;
            let plus = f()?.item().as_f64();
            p.data_mut()[i] = orig - epst;
            let minus = f()?.item().as_f64();
            p.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite("perturbed loss in finite_diff_check".into()));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = ga[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

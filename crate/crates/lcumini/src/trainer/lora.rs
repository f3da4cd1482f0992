//! Adapter lifecycle: freeze the base model, hang low-rank adapters on
//! named linear layers, and restore the base afterwards.

use crate::error::{Error, Result};
use crate::model::{LoraAdapter, Model};
use crate::tensor::Scalar;
use rand::Rng;

/// Attaches a rank-`rank` adapter to each named target layer and
/// freezes every base parameter. Adapters are initialized in model
/// order regardless of the order of `targets`, so a fixed rng seed
/// gives a fixed adapter state. B starts at zero, so outputs are
/// unchanged until training moves it.
pub fn attach_lora<T: Scalar, R: Rng + ?Sized>(
    model: &mut Model<T>,
    rank: usize,
    alpha: f64,
    targets: &[String],
    rng: &mut R,
) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::Config("adapter target list is empty".into()));
    }
    let known: Vec<String> = model
        .named_linears()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    for (i, t) in targets.iter().enumerate() {
        if !known.contains(t) {
            return Err(Error::Config(format!(
                "unknown adapter target '{t}'; linear layers are: {}",
                known.join(", ")
            )));
        }
        if targets[..i].contains(t) {
            return Err(Error::Config(format!("duplicate adapter target '{t}'")));
        }
    }
    for (_, p) in model.params() {
        p.set_requires_grad(false);
    }
    for (name, layer) in model.named_linears_mut() {
        if !targets.contains(&name) {
            continue;
        }
        if layer.lora.is_some() {
            return Err(Error::Config(format!("layer '{name}' already has an adapter")));
        }
        let d_in = layer.w.shape()[0];
        let d_out = layer.w.shape()[1];
        layer.lora = Some(LoraAdapter::new(d_in, d_out, rank, alpha, rng)?);
    }
    Ok(())
}

/// Drops every adapter and unfreezes the base parameters.
pub fn detach_lora<T: Scalar>(model: &mut Model<T>) {
    for (_, layer) in model.named_linears_mut() {
        layer.lora = None;
    }
    for (_, p) in model.params() {
        p.set_requires_grad(true);
    }
}

/// Closed-form trainable-parameter count: sum of rank·(d_in + d_out)
/// over the adapted layers.
pub fn adapter_param_count<T: Scalar>(model: &Model<T>) -> usize {
    model
        .adapter_params()
        .iter()
        .map(|(_, p)| p.numel())
        .sum()
}

//! Inference: guidance combination, Euler integration of the flow ODE
//! over all condition units jointly, and mask compositing.

use crate::error::{Error, Result};
use crate::lcu::{ConditionUnit, CuRole, LcuPlusPlus, TextInstruction};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 20,
            guidance_scale: 1.0,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampling needs at least 1 step".into()));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::Config("guidance_scale must be finite".into()));
        }
        Ok(())
    }
}

/// v_uncond + ω·(v_cond − v_uncond). ω = 1 returns the conditional
/// velocity without touching its bits; ω = 0 likewise the
/// unconditional one.
pub fn cfg_combine<T: Scalar>(
    v_cond: &Tensor<T>,
    v_uncond: &Tensor<T>,
    omega: f64,
) -> Result<Tensor<T>> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(Error::ShapeMismatch {
            op: "cfg_combine",
            lhs: v_cond.shape().to_vec(),
            rhs: v_uncond.shape().to_vec(),
        });
    }
    if omega == 1.0 {
        return Ok(v_cond.clone());
    }
    if omega == 0.0 {
        return Ok(v_uncond.clone());
    }
    v_uncond.add(&v_cond.sub(v_uncond)?.scale(T::from_f64(omega)))
}

/// Euler integration on the uniform grid t_k = k/steps:
/// x ← x + (1/steps)·velocity_fn(x, t_k) for k = 0..steps−1.
pub fn euler_integrate<T, F>(
    mut velocity_fn: F,
    x_init: Vec<Tensor<T>>,
    steps: usize,
) -> Result<Vec<Tensor<T>>>
where
    T: Scalar,
    F: FnMut(&[Tensor<T>], f64) -> Result<Vec<Tensor<T>>>,
{
    if steps == 0 {
        return Err(Error::Contract("euler_integrate needs steps >= 1".into()));
    }
    if x_init.is_empty() {
        return Err(Error::Contract("euler_integrate needs at least one state".into()));
    }
    let dt = T::from_f64(1.0 / steps as f64);
    let mut x = x_init;
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = velocity_fn(&x, t)?;
        if v.len() != x.len() {
            return Err(Error::Contract(format!(
                "velocity_fn returned {} fields for {} states",
                v.len(),
                x.len()
            )));
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            let next = xi.add(&vi.scale(dt))?;
            if !next.all_finite() {
                return Err(Error::NonFinite(format!(
                    "integration state diverged at step {k} (t = {t})"
                )));
            }
            *xi = next;
        }
    }
    Ok(x)
}

/// Per-element selection by a binary mask: generated where mask = 1,
/// input where mask = 0. Selection copies bits, so preserved pixels
/// are untouched whatever the generated values hold.
pub fn composite_masked<T: Scalar>(
    generated: &Tensor<T>,
    input: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    if generated.shape() != input.shape() {
        return Err(Error::ShapeMismatch {
            op: "composite_masked",
            lhs: generated.shape().to_vec(),
            rhs: input.shape().to_vec(),
        });
    }
    let shape = generated.shape().to_vec();
    if shape.len() != 3 || mask.shape() != [1, shape[1], shape[2]] {
        return Err(Error::ShapeMismatch {
            op: "composite_masked",
            lhs: shape,
            rhs: mask.shape().to_vec(),
        });
    }
    let plane = shape[1] * shape[2];
    let m = mask.data();
    if m.iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::Contract("composite mask must be binary".into()));
    }
    let g = generated.data();
    let inp = input.data();
    let mut out = Vec::with_capacity(g.len());
    for c in 0..shape[0] {
        for i in 0..plane {
            let idx = c * plane + i;
            out.push(if m[i] == T::one() { g[idx] } else { inp[idx] });
        }
    }
    drop(g);
    drop(inp);
    drop(m);
    Tensor::from_vec(generated.shape(), out)
}

fn clamp01<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = x
        .data()
        .iter()
        .map(|&v| {
            if v < T::zero() {
                T::zero()
            } else if v > T::one() {
                T::one()
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("shape is unchanged")
}

pub struct GenerateOutcome<T: Scalar> {
    /// Composited output: clamped generated content under the mask,
    /// the input image bit-for-bit elsewhere.
    pub image: Tensor<T>,
    /// Integrated target-unit state before clamping and compositing.
    pub raw_target: Tensor<T>,
    /// Forward passes performed (steps when ω = 1, 2·steps otherwise).
    pub model_evals: usize,
}

/// Runs the full mask-fill pipeline: seeds every unit's noise channel,
/// integrates all units jointly, discards the reference
/// reconstructions, and composites the target under the mask.
///
/// ω = 1 evaluates only the conditional branch each step; any other ω
/// adds a null-instruction pass and mixes the two velocities.
pub fn generate<T: Scalar>(
    model: &Model<T>,
    references: &[Tensor<T>],
    input_image: &Tensor<T>,
    mask: &Tensor<T>,
    instruction: &TextInstruction,
    cfg: &SampleConfig,
) -> Result<GenerateOutcome<T>> {
    cfg.validate()?;
    let shape = input_image.shape().to_vec();
    let mut units = Vec::with_capacity(references.len() + 1);
    for r in references {
        units.push(ConditionUnit::new(
            r.clone(),
            Tensor::ones(&[1, shape[1], shape[2]]),
            Tensor::zeros(&shape),
            CuRole::Reference,
        )?);
    }
    units.push(ConditionUnit::new(
        input_image.clone(),
        mask.clone(),
        Tensor::zeros(&shape),
        CuRole::Target,
    )?);
    let lcu = LcuPlusPlus::new(instruction.clone(), units)?;

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let x_init: Vec<Tensor<T>> = (0..lcu.n_units())
        .map(|_| Tensor::randn(&shape, T::one(), &mut rng))
        .collect();

    let omega = cfg.guidance_scale;
    let null = TextInstruction::null();
    let mut evals = 0usize;
    let velocity = |xs: &[Tensor<T>], t: f64| -> Result<Vec<Tensor<T>>> {
        let state = lcu.with_noisy(xs)?;
        if omega == 1.0 {
            evals += 1;
            let v = model.forward(&state, t, state.instruction())?;
            Ok(v.iter().map(|vi| vi.detached()).collect())
        } else {
            evals += 2;
            let v_c = model.forward(&state, t, state.instruction())?;
            let v_u = model.forward(&state, t, &null)?;
            v_c.iter()
                .zip(&v_u)
                .map(|(c, u)| Ok(cfg_combine(c, u, omega)?.detached()))
                .collect()
        }
    };
    let finals = euler_integrate(velocity, x_init, cfg.steps)?;
    let raw_target = finals.last().expect("at least the target unit").clone();
    let image = composite_masked(&clamp01(&raw_target), input_image, mask)?;
    Ok(GenerateOutcome {
        image,
        raw_target,
        model_evals: evals,
    })
}

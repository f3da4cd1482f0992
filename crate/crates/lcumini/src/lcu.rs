//! Condition units and model-input assembly.
//!
//! A condition unit (CU) bundles an image block, a generation mask, and
//! the current noise state for one sample slot. The modern assembly
//! concatenates the three blocks per CU along the channel axis (7
//! channels) and concatenates CUs along the sequence axis. The legacy
//! assembly kept condition and noise as separate 4-channel maps, which
//! doubles the token count and quadruples attention work; it is kept
//! here for the efficiency comparison.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Tokenized text instruction; the null value is the unconditional
/// branch used by classifier-free guidance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextInstruction {
    token_ids: Vec<usize>,
    is_null: bool,
}

impl TextInstruction {
    /// A non-empty instruction. Ids must be below `vocab_size`.
    pub fn new(token_ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if token_ids.is_empty() {
            return Err(Error::Contract(
                "empty instruction: use TextInstruction::null() for the unconditional branch"
                    .into(),
            ));
        }
        if let Some(&bad) = token_ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::Contract(format!(
                "instruction token {bad} out of range for vocabulary of {vocab_size}"
            )));
        }
        Ok(TextInstruction {
            token_ids,
            is_null: false,
        })
    }

    /// The unconditional (dropped-text) instruction.
    pub fn null() -> Self {
        TextInstruction {
            token_ids: Vec::new(),
            is_null: true,
        }
    }

    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn is_null(&self) -> bool {
        self.is_null
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CuRole {
    Reference,
    Target,
}

/// One condition unit: image content, generation mask, and noise state.
///
/// Invariants (enforced at construction):
/// - image and noisy are `[3, H, W]`, mask is `[1, H, W]`, shared `H, W`
/// - mask values are exactly 0 or 1 (1 = region to generate)
/// - a reference unit carries an all-ones mask
#[derive(Debug, Clone)]
pub struct ConditionUnit<T: Scalar> {
    image: Tensor<T>,
    mask: Tensor<T>,
    noisy: Tensor<T>,
    role: CuRole,
}

impl<T: Scalar> ConditionUnit<T> {
    pub fn new(image: Tensor<T>, mask: Tensor<T>, noisy: Tensor<T>, role: CuRole) -> Result<Self> {
        let ishape = image.shape();
        if ishape.len() != 3 || ishape[0] != 3 {
            return Err(Error::Geometry(format!(
                "condition unit image must be [3, H, W], got {ishape:?}"
            )));
        }
        let (h, w) = (ishape[1], ishape[2]);
        if mask.shape() != [1, h, w] {
            return Err(Error::Geometry(format!(
                "mask shape {:?} does not match image [3, {h}, {w}]",
                mask.shape()
            )));
        }
        if noisy.shape() != [3, h, w] {
            return Err(Error::Geometry(format!(
                "noise shape {:?} does not match image [3, {h}, {w}]",
                noisy.shape()
            )));
        }
        {
            let m = mask.data();
            if !m.iter().all(|&v| v == T::zero() || v == T::one()) {
                return Err(Error::Contract(
                    "mask must be strictly binary (every value 0 or 1)".into(),
                ));
            }
            if role == CuRole::Reference && m.iter().any(|&v| v != T::one()) {
                return Err(Error::Contract(
                    "reference unit requires an all-ones mask (full reconstruction)".into(),
                ));
            }
        }
        Ok(ConditionUnit {
            image,
            mask,
            noisy,
            role,
        })
    }

    pub fn image(&self) -> &Tensor<T> {
        &self.image
    }

    pub fn mask(&self) -> &Tensor<T> {
        &self.mask
    }

    pub fn noisy(&self) -> &Tensor<T> {
        &self.noisy
    }

    pub fn role(&self) -> CuRole {
        self.role
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Same unit with a replaced noise state (used per sampler step).
    pub fn with_noisy(&self, noisy: Tensor<T>) -> Result<Self> {
        Self::new(self.image.clone(), self.mask.clone(), noisy, self.role)
    }
}

/// An ordered list of condition units plus the shared instruction. The
/// final unit is the generation target; any earlier units are
/// references.
#[derive(Debug, Clone)]
pub struct LcuPlusPlus<T: Scalar> {
    instruction: TextInstruction,
    units: Vec<ConditionUnit<T>>,
}

impl<T: Scalar> LcuPlusPlus<T> {
    pub fn new(instruction: TextInstruction, units: Vec<ConditionUnit<T>>) -> Result<Self> {
        let Some(last) = units.last() else {
            return Err(Error::Contract("an LCU needs at least one unit".into()));
        };
        if last.role() != CuRole::Target {
            return Err(Error::Contract("the final unit must be the target".into()));
        }
        if units[..units.len() - 1]
            .iter()
            .any(|u| u.role() != CuRole::Reference)
        {
            return Err(Error::Contract(
                "exactly one target unit is allowed and it must be last".into(),
            ));
        }
        let (h, w) = (last.height(), last.width());
        if units.iter().any(|u| u.height() != h || u.width() != w) {
            return Err(Error::Geometry(
                "all units in one LCU must share the same H and W".into(),
            ));
        }
        Ok(LcuPlusPlus { instruction, units })
    }

    pub fn instruction(&self) -> &TextInstruction {
        &self.instruction
    }

    pub fn units(&self) -> &[ConditionUnit<T>] {
        &self.units
    }

    pub fn target(&self) -> &ConditionUnit<T> {
        self.units.last().expect("validated nonempty")
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    /// Number of reference units (N - 1; zero for 0-ref tasks).
    pub fn n_ref(&self) -> usize {
        self.units.len() - 1
    }

    pub fn height(&self) -> usize {
        self.units[0].height()
    }

    pub fn width(&self) -> usize {
        self.units[0].width()
    }

    /// Same LCU with a different instruction (used for text dropout and
    /// the unconditional guidance branch).
    pub fn with_instruction(&self, instruction: TextInstruction) -> Self {
        LcuPlusPlus {
            instruction,
            units: self.units.clone(),
        }
    }

    /// Same LCU with replaced per-unit noise states.
    pub fn with_noisy(&self, noisy: &[Tensor<T>]) -> Result<Self> {
        if noisy.len() != self.units.len() {
            return Err(Error::Contract(format!(
                "{} noise states for {} units",
                noisy.len(),
                self.units.len()
            )));
        }
        let units = self
            .units
            .iter()
            .zip(noisy)
            .map(|(u, x)| u.with_noisy(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.instruction.clone(), units)
    }
}

/// Assembled model input: one spatial map per sequence slot plus token
/// accounting.
#[derive(Debug, Clone)]
pub struct TokenLayout<T: Scalar> {
    pub maps: Vec<Tensor<T>>,
    pub tokens_per_cu: usize,
    pub total_tokens: usize,
}

fn check_patch(h: usize, w: usize, patch: usize) -> Result<usize> {
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Geometry(format!(
            "patch size {patch} does not divide image {h}x{w}"
        )));
    }
    Ok((h / patch) * (w / patch))
}

/// Stack one unit's blocks into a single 7-channel map:
/// channels 0-2 image, 3 mask, 4-6 noise. Exact copies, no scaling.
pub fn build_cu_map<T: Scalar>(unit: &ConditionUnit<T>) -> Result<Tensor<T>> {
    Tensor::concat(
        &[unit.image().clone(), unit.mask().clone(), unit.noisy().clone()],
        0,
    )
}

/// Modern assembly: one 7-channel map per unit, units concatenated
/// along the sequence axis by the model.
pub fn assemble_lcu_pp<T: Scalar>(lcu: &LcuPlusPlus<T>, patch: usize) -> Result<TokenLayout<T>> {
    let tokens_per_cu = check_patch(lcu.height(), lcu.width(), patch)?;
    let maps = lcu
        .units()
        .iter()
        .map(build_cu_map)
        .collect::<Result<Vec<_>>>()?;
    let total_tokens = maps.len() * tokens_per_cu;
    Ok(TokenLayout {
        maps,
        tokens_per_cu,
        total_tokens,
    })
}

/// Legacy assembly for the zero-reference case: condition map `[I; M]`
/// and noise map `[X_t; M]` stay separate 4-channel sequence slots, so
/// the token count doubles relative to the modern assembly.
pub fn assemble_legacy_lcu_0ref<T: Scalar>(
    unit: &ConditionUnit<T>,
    patch: usize,
) -> Result<TokenLayout<T>> {
    let tokens_per_cu = check_patch(unit.height(), unit.width(), patch)?;
    let cond = Tensor::concat(&[unit.image().clone(), unit.mask().clone()], 0)?;
    let noise = Tensor::concat(&[unit.noisy().clone(), unit.mask().clone()], 0)?;
    Ok(TokenLayout {
        maps: vec![cond, noise],
        tokens_per_cu,
        total_tokens: 2 * tokens_per_cu,
    })
}

/// Attention FLOPs for one layer at this sequence length: 2·T²·d for
/// Q·Kᵀ plus 2·T²·d for scores·V, i.e. 4·T²·d with T = total_tokens and
/// d = model_dim. Projections are linear in T and excluded; this is the
/// quadratic term the sequence length controls.
pub fn attention_cost<T: Scalar>(layout: &TokenLayout<T>, model_dim: usize) -> u64 {
    let t = layout.total_tokens as u64;
    let d = model_dim as u64;
    4 * t * t * d
}

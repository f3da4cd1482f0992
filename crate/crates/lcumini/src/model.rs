//! Miniature diffusion transformer over condition-unit token sequences.
//!
//! Each 7-channel CU map is patchified and linearly embedded (the
//! x-embed layer), tagged with a shared 2-D positional table plus a
//! per-CU slot embedding, prefixed with instruction tokens, and given an
//! additive timestep embedding on every token. Unmasked bidirectional
//! attention runs over the whole concatenated sequence, so reference
//! units can condition the target's velocity prediction. Output tokens
//! for each CU unpatchify to a 3-channel velocity map; instruction-token
//! outputs are discarded.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lcu::{build_cu_map, LcuPlusPlus, TextInstruction};
use crate::tensor::{Scalar, Tensor};

/// Number of sinusoidal timestep features fed to the t-embedding map.
const T_FEATURES: usize = 16;

/// Epsilon used by every layer norm in the model.
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub patch: usize,
    pub image_size: usize,
    pub vocab_size: usize,
    pub max_cus: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            model_dim: 64,
            n_layers: 2,
            n_heads: 4,
            patch: 4,
            image_size: 16,
            vocab_size: 15,
            max_cus: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.patch == 0
            || self.image_size == 0
            || self.vocab_size == 0
            || self.max_cus == 0
        {
            return Err(Error::Config("all model dimensions must be positive".into()));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "patch {} does not divide image_size {}",
                self.patch, self.image_size
            )));
        }
        Ok(())
    }

    /// Patch-grid side length.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// Tokens produced per condition unit.
    pub fn tokens_per_cu(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Low-rank adapter on one linear layer: effective weight
/// W + (alpha / rank) · A·B with A `[d_in, rank]`, B `[rank, d_out]`.
#[derive(Debug, Clone)]
pub struct LoraAdapter<T: Scalar> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub rank: usize,
    pub alpha: f64,
}

impl<T: Scalar> LoraAdapter<T> {
    /// A gets small random init, B starts at zero, so the adapter is an
    /// exact no-op until B moves.
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "adapter rank {rank} invalid for a {d_in}x{d_out} layer"
            )));
        }
        let std = T::from_f64(1.0 / (d_in as f64).sqrt());
        let a = Tensor::randn(&[d_in, rank], std, rng);
        a.set_requires_grad(true);
        let b = Tensor::param(&[rank, d_out], vec![T::zero(); rank * d_out])?;
        Ok(LoraAdapter { a, b, rank, alpha })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Linear layer `y = x·W (+ b)`, optionally with a low-rank adapter.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Option<Tensor<T>>,
    pub lora: Option<LoraAdapter<T>>,
}

impl<T: Scalar> Linear<T> {
    fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let mut l = Self::new_no_bias(d_in, d_out, rng);
        l.b = Some(Tensor::param(&[d_out], vec![T::zero(); d_out]).expect("bias shape"));
        l
    }

    fn new_no_bias<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let std = T::from_f64(1.0 / (d_in as f64).sqrt());
        let w = Tensor::randn(&[d_in, d_out], std, rng);
        w.set_requires_grad(true);
        Linear { w, b: None, lora: None }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = x.matmul(&self.w)?;
        if let Some(b) = &self.b {
            y = y.add_bias(b)?;
        }
        if let Some(lora) = &self.lora {
            let delta = x.matmul(&lora.a)?.matmul(&lora.b)?;
            y = y.add(&delta.scale(T::from_f64(lora.scaling())))?;
        }
        Ok(y)
    }
}

/// Affine layer norm (normalize over the feature axis, then scale/shift).
#[derive(Debug, Clone)]
pub struct LayerNorm<T: Scalar> {
    pub g: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    fn new(d: usize) -> Self {
        let g = Tensor::param(&[d], vec![T::one(); d]).expect("ln gain");
        let b = Tensor::param(&[d], vec![T::zero(); d]).expect("ln bias");
        LayerNorm { g, b }
    }

    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(LN_EPS)?.mul_row(&self.g)?.add_bias(&self.b)
    }
}

#[derive(Debug, Clone)]
pub struct Attention<T: Scalar> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct Mlp<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct Block<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

/// The velocity model. All parameters are graph leaves with
/// `requires_grad` set; names are stable and used by checkpoints and
/// adapter targeting.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    pub x_embed: Linear<T>,
    pub pos_2d: Tensor<T>,
    pub cu_index: Tensor<T>,
    pub instr_embed: Tensor<T>,
    pub t_embed: Linear<T>,
    pub blocks: Vec<Block<T>>,
    pub final_ln: LayerNorm<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let patch_in = 7 * config.patch * config.patch;
        let table_std = T::from_f64(0.02);

        let x_embed = Linear::new(patch_in, d, rng);
        let pos_2d = Tensor::randn(&[config.tokens_per_cu(), d], table_std, rng);
        pos_2d.set_requires_grad(true);
        let cu_index = Tensor::randn(&[config.max_cus, d], table_std, rng);
        cu_index.set_requires_grad(true);
        // Row 0 is the learned null-instruction vector; token id k lives
        // at row k + 1.
        let instr_embed = Tensor::randn(&[config.vocab_size + 1, d], table_std, rng);
        instr_embed.set_requires_grad(true);
        let t_embed = Linear::new(T_FEATURES, d, rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                attn: Attention {
                    q: Linear::new(d, d, rng),
                    // A key bias shifts every attention score in a query
                    // row by the same amount, which softmax cancels; the
                    // parameter could never affect the output, so it is
                    // omitted.
                    k: Linear::new_no_bias(d, d, rng),
                    v: Linear::new(d, d, rng),
                    o: Linear::new(d, d, rng),
                },
                ln2: LayerNorm::new(d),
                mlp: Mlp {
                    fc1: Linear::new(d, 4 * d, rng),
                    fc2: Linear::new(4 * d, d, rng),
                },
            })
            .collect();
        let final_ln = LayerNorm::new(d);
        // The head stays randomly initialized: a zero head would zero
        // every upstream gradient at step one.
        let head = Linear::new(d, 3 * config.patch * config.patch, rng);

        Ok(Model {
            config,
            x_embed,
            pos_2d,
            cu_index,
            instr_embed,
            t_embed,
            blocks,
            final_ln,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Stable (name, tensor) listing of every base parameter. Adapter
    /// tensors are excluded; see [`Model::adapter_params`].
    pub fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = Vec::new();
        let lin = |out: &mut Vec<(String, Tensor<T>)>, name: String, l: &Linear<T>| {
            out.push((format!("{name}.w"), l.w.clone()));
            if let Some(b) = &l.b {
                out.push((format!("{name}.b"), b.clone()));
            }
        };
        lin(&mut out, "x_embed".into(), &self.x_embed);
        out.push(("pos_2d".into(), self.pos_2d.clone()));
        out.push(("cu_index".into(), self.cu_index.clone()));
        out.push(("instr_embed".into(), self.instr_embed.clone()));
        lin(&mut out, "t_embed".into(), &self.t_embed);
        for (i, blk) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.ln1.g"), blk.ln1.g.clone()));
            out.push((format!("blocks.{i}.ln1.b"), blk.ln1.b.clone()));
            lin(&mut out, format!("blocks.{i}.attn.q"), &blk.attn.q);
            lin(&mut out, format!("blocks.{i}.attn.k"), &blk.attn.k);
            lin(&mut out, format!("blocks.{i}.attn.v"), &blk.attn.v);
            lin(&mut out, format!("blocks.{i}.attn.o"), &blk.attn.o);
            out.push((format!("blocks.{i}.ln2.g"), blk.ln2.g.clone()));
            out.push((format!("blocks.{i}.ln2.b"), blk.ln2.b.clone()));
            lin(&mut out, format!("blocks.{i}.mlp.fc1"), &blk.mlp.fc1);
            lin(&mut out, format!("blocks.{i}.mlp.fc2"), &blk.mlp.fc2);
        }
        out.push(("final_ln.g".into(), self.final_ln.g.clone()));
        out.push(("final_ln.b".into(), self.final_ln.b.clone()));
        lin(&mut out, "head".into(), &self.head);
        out
    }

    /// (name, tensor) listing of attached adapter parameters only.
    pub fn adapter_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (name, l) in self.named_linears() {
            if let Some(lora) = &l.lora {
                out.push((format!("{name}.lora_a"), lora.a.clone()));
                out.push((format!("{name}.lora_b"), lora.b.clone()));
            }
        }
        out
    }

    /// Every linear layer by stable name (adapter attachment points).
    pub fn named_linears(&self) -> Vec<(String, &Linear<T>)> {
        let mut out: Vec<(String, &Linear<T>)> = vec![
            ("x_embed".into(), &self.x_embed),
            ("t_embed".into(), &self.t_embed),
        ];
        for (i, blk) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.attn.q"), &blk.attn.q));
            out.push((format!("blocks.{i}.attn.k"), &blk.attn.k));
            out.push((format!("blocks.{i}.attn.v"), &blk.attn.v));
            out.push((format!("blocks.{i}.attn.o"), &blk.attn.o));
            out.push((format!("blocks.{i}.mlp.fc1"), &blk.mlp.fc1));
            out.push((format!("blocks.{i}.mlp.fc2"), &blk.mlp.fc2));
        }
        out.push(("head".into(), &self.head));
        out
    }

    pub fn named_linears_mut(&mut self) -> Vec<(String, &mut Linear<T>)> {
        let mut out: Vec<(String, &mut Linear<T>)> = vec![
            ("x_embed".into(), &mut self.x_embed),
            ("t_embed".into(), &mut self.t_embed),
        ];
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.attn.q"), &mut blk.attn.q));
            out.push((format!("blocks.{i}.attn.k"), &mut blk.attn.k));
            out.push((format!("blocks.{i}.attn.v"), &mut blk.attn.v));
            out.push((format!("blocks.{i}.attn.o"), &mut blk.attn.o));
            out.push((format!("blocks.{i}.mlp.fc1"), &mut blk.mlp.fc1));
            out.push((format!("blocks.{i}.mlp.fc2"), &mut blk.mlp.fc2));
        }
        out.push(("head".into(), &mut self.head));
        out
    }

    /// Parameters the optimizer should update: adapter tensors when any
    /// adapter is attached and the base is frozen, otherwise every base
    /// parameter that requires grad.
    pub fn trainable_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params()
            .into_iter()
            .filter(|(_, p)| p.requires_grad())
            .collect();
        out.extend(
            self.adapter_params()
                .into_iter()
                .filter(|(_, p)| p.requires_grad()),
        );
        out
    }

    /// Patchify + linear x-embed + 2-D positional table.
    pub fn x_embed_tokens(&self, map: &Tensor<T>) -> Result<Tensor<T>> {
        let patches = patchify(map, self.config.patch)?;
        if patches.shape()[1] != self.x_embed.d_in() {
            return Err(Error::Geometry(format!(
                "map channels {:?} do not match the 7-channel x-embed input",
                map.shape()
            )));
        }
        let tokens = self.x_embed.apply(&patches)?;
        if tokens.shape()[0] != self.config.tokens_per_cu() {
            return Err(Error::Geometry(format!(
                "map {:?} yields {} tokens but the positional table holds {}",
                map.shape(),
                tokens.shape()[0],
                self.config.tokens_per_cu()
            )));
        }
        tokens.add(&self.pos_2d)
    }

    /// Instruction tokens: the learned null vector for the unconditional
    /// branch, otherwise one embedding row per token id.
    pub fn embed_instruction(&self, instr: &TextInstruction) -> Result<Tensor<T>> {
        if instr.is_null() {
            return self.instr_embed.embed_rows(&[0]);
        }
        let rows: Vec<usize> = instr.token_ids().iter().map(|&id| id + 1).collect();
        if rows.iter().any(|&r| r > self.config.vocab_size) {
            return Err(Error::Contract(format!(
                "instruction ids {:?} exceed vocab size {}",
                instr.token_ids(),
                self.config.vocab_size
            )));
        }
        self.instr_embed.embed_rows(&rows)
    }

    fn timestep_embedding(&self, t: f64) -> Result<Tensor<T>> {
        let feats = timestep_features::<T>(t);
        let row = Tensor::from_vec(&[1, T_FEATURES], feats)?;
        self.t_embed.apply(&row)?.reshape(&[self.config.model_dim])
    }

    /// Predict per-CU velocities for one LCU at time `t`.
    ///
    /// `instr` is the instruction actually embedded, so callers can
    /// swap in the null instruction (text dropout, guidance) without
    /// rebuilding the unit list.
    pub fn forward(
        &self,
        lcu: &LcuPlusPlus<T>,
        t: f64,
        instr: &TextInstruction,
    ) -> Result<Vec<Tensor<T>>> {
        if lcu.n_units() > self.config.max_cus {
            return Err(Error::Contract(format!(
                "{} condition units exceed the model's max of {}",
                lcu.n_units(),
                self.config.max_cus
            )));
        }
        let s = self.config.image_size;
        if lcu.height() != s || lcu.width() != s {
            return Err(Error::Geometry(format!(
                "LCU geometry {}x{} does not match the model's image size {s}",
                lcu.height(),
                lcu.width()
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Contract(format!("timestep {t} outside [0, 1]")));
        }

        let tpc = self.config.tokens_per_cu();
        let d = self.config.model_dim;

        // Instruction prefix, then one token block per CU.
        let mut segments = vec![self.embed_instruction(instr)?];
        for (i, unit) in lcu.units().iter().enumerate() {
            let map = build_cu_map(unit)?;
            let tokens = self.x_embed_tokens(&map)?;
            let slot = self.cu_index.embed_rows(&[i])?.reshape(&[d])?;
            segments.push(tokens.add_bias(&slot)?);
        }
        let text_len = segments[0].shape()[0];
        let mut seq = Tensor::concat(&segments, 0)?;

        // Additive timestep conditioning on every token.
        let t_row = self.timestep_embedding(t)?;
        seq = seq.add_bias(&t_row)?;

        for blk in &self.blocks {
            seq = seq.add(&self.attention(blk, &seq)?)?;
            let h = blk.mlp.fc1.apply(&blk.ln2.apply(&seq)?)?.gelu();
            seq = seq.add(&blk.mlp.fc2.apply(&h)?)?;
        }
        seq = self.final_ln.apply(&seq)?;

        let mut velocities = Vec::with_capacity(lcu.n_units());
        for i in 0..lcu.n_units() {
            let block = seq.slice(0, text_len + i * tpc, tpc)?;
            let out = self.head.apply(&block)?;
            velocities.push(unpatchify(&out, 3, s, s, self.config.patch)?);
        }
        Ok(velocities)
    }

    fn attention(&self, blk: &Block<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.config.model_dim;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let xn = blk.ln1.apply(x)?;
        let q = blk.attn.q.apply(&xn)?;
        let k = blk.attn.k.apply(&xn)?;
        let v = blk.attn.v.apply(&xn)?;

        let mut ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.slice(1, h * dh, dh)?;
            let kh = k.slice(1, h * dh, dh)?;
            let vh = v.slice(1, h * dh, dh)?;
            let scores = qh.matmul(&kh.transpose2d()?)?.scale(scale);
            let attn = scores.softmax(1)?;
            ctx.push(attn.matmul(&vh)?);
        }
        blk.attn.o.apply(&Tensor::concat(&ctx, 1)?)
    }
}

/// Sinusoidal timestep featurization: 8 octaves of (sin, cos) pairs.
fn timestep_features<T: Scalar>(t: f64) -> Vec<T> {
    let mut feats = Vec::with_capacity(T_FEATURES);
    for j in 0..T_FEATURES / 2 {
        let angle = t * std::f64::consts::PI * (1 << j) as f64;
        feats.push(T::from_f64(angle.sin()));
        feats.push(T::from_f64(angle.cos()));
    }
    feats
}

/// `[C, H, W]` -> `[(H/p)(W/p), C·p·p]`, patches in row-major grid
/// order, channel-major within a patch. Built from slice/concat/reshape
/// so it is differentiable end to end.
pub fn patchify<T: Scalar>(map: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let shape = map.shape();
    if shape.len() != 3 {
        return Err(Error::Geometry(format!(
            "patchify expects [C, H, W], got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Geometry(format!(
            "patch {patch} does not divide {h}x{w}"
        )));
    }
    let flat = c * patch * patch;
    let mut rows = Vec::with_capacity((h / patch) * (w / patch));
    for r in 0..h / patch {
        let strip = map.slice(1, r * patch, patch)?;
        for cidx in 0..w / patch {
            let p = strip.slice(2, cidx * patch, patch)?;
            rows.push(p.reshape(&[1, flat])?);
        }
    }
    Tensor::concat(&rows, 0)
}

/// Inverse of [`patchify`]: `[(H/p)(W/p), C·p·p]` -> `[C, H, W]`.
pub fn unpatchify<T: Scalar>(
    tokens: &Tensor<T>,
    channels: usize,
    h: usize,
    w: usize,
    patch: usize,
) -> Result<Tensor<T>> {
    let grid_w = w / patch;
    let grid_h = h / patch;
    let flat = channels * patch * patch;
    if tokens.shape() != [grid_h * grid_w, flat] {
        return Err(Error::Geometry(format!(
            "token block {:?} does not unpatchify to [{channels}, {h}, {w}] at patch {patch}",
            tokens.shape()
        )));
    }
    let mut strips = Vec::with_capacity(grid_h);
    for r in 0..grid_h {
        let mut row_patches = Vec::with_capacity(grid_w);
        for cidx in 0..grid_w {
            let tok = tokens.slice(0, r * grid_w + cidx, 1)?;
            row_patches.push(tok.reshape(&[channels, patch, patch])?);
        }
        strips.push(Tensor::concat(&row_patches, 2)?);
    }
    Tensor::concat(&strips, 1)
}

//! Two-stage training orchestration: instruction dropout, shared-t
//! noise draws per condition unit, the decomposed loss, AdamW with
//! global-norm clipping, and per-step reporting.

mod lora;
mod optim;

pub use lora::{adapter_param_count, attach_lora, detach_lora};
pub use optim::{clip_gradients, global_grad_norm, AdamW, BETA1, BETA2, EPS};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::flow::{compute_loss, sample_timestep, velocity_target, FlowState, LossBreakdown};
use crate::lcu::{ConditionUnit, CuRole, LcuPlusPlus, TextInstruction};
use crate::model::{Model, ModelConfig};
use crate::tasks::TaskSample;
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Low-rank adapter request: rank, scale numerator, and the linear
/// layers to adapt (names as listed by the model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub uncond_prob: f64,
    pub guidance_scale: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub stage: u8,
    pub adapter: Option<AdapterConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-2,
            clip_norm: 1.0,
            uncond_prob: 0.1,
            guidance_scale: 1.0,
            batch_size: 16,
            steps: 1000,
            seed: 0,
            stage: 1,
            adapter: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            )));
        }
        if !(0.0..=1.0).contains(&self.uncond_prob) {
            return Err(Error::Config(format!(
                "uncond_prob must lie in [0, 1], got {}",
                self.uncond_prob
            )));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::Config("guidance_scale must be finite".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if let Some(a) = &self.adapter {
            if a.rank == 0 {
                return Err(Error::Config("adapter rank must be at least 1".into()));
            }
            if !a.alpha.is_finite() {
                return Err(Error::Config("adapter alpha must be finite".into()));
            }
            if a.targets.is_empty() {
                return Err(Error::Config("adapter target list is empty".into()));
            }
        }
        Ok(())
    }
}

/// With probability `p` the instruction collapses to the null token,
/// training the unconditional branch. `p` must lie in [0, 1].
pub fn cfg_dropout<R: Rng + ?Sized>(
    instr: &TextInstruction,
    rng: &mut R,
    p: f64,
) -> TextInstruction {
    assert!((0.0..=1.0).contains(&p), "dropout probability {p} outside [0, 1]");
    if rng.gen_bool(p) {
        TextInstruction::null()
    } else {
        instr.clone()
    }
}

/// Condition units plus clean endpoints for one task sample. Reference
/// units reconstruct their own image under an all-ones mask; the
/// target unit carries the task's input image and editing mask and
/// denoises toward the target image.
pub fn sample_units<T: Scalar>(
    sample: &TaskSample<T>,
) -> Result<(Vec<ConditionUnit<T>>, Vec<Tensor<T>>)> {
    let shape = sample.input_image.shape().to_vec();
    let h = shape[1];
    let w = shape[2];
    let mut units = Vec::with_capacity(sample.references.len() + 1);
    let mut x1 = Vec::with_capacity(sample.references.len() + 1);
    for r in &sample.references {
        units.push(ConditionUnit::new(
            r.clone(),
            Tensor::ones(&[1, h, w]),
            Tensor::zeros(&shape),
            CuRole::Reference,
        )?);
        x1.push(r.clone());
    }
    units.push(ConditionUnit::new(
        sample.input_image.clone(),
        sample.mask.clone(),
        Tensor::zeros(&shape),
        CuRole::Target,
    )?);
    x1.push(sample.target_image.clone());
    Ok((units, x1))
}

/// Everything observed about one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub total: f64,
    pub reference: f64,
    pub target: f64,
    pub grad_norm_preclip: f64,
    pub post_clip_norm: f64,
    pub clip_scale: f64,
    pub uncond_fraction: f64,
}

/// One gradient step over a batch: per sample, dropout the instruction,
/// draw a shared t and per-unit noise, forward, decomposed loss scaled
/// by 1/B, accumulate gradients; then clip and apply AdamW.
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    opt: &mut AdamW<T>,
    trainable: &[(String, Tensor<T>)],
    batch: &[&TaskSample<T>],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::Contract("train_step requires a nonempty batch".into()));
    }
    for (_, p) in trainable {
        p.zero_grad();
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut loss = LossBreakdown {
        total: 0.0,
        reference: 0.0,
        target: 0.0,
    };
    let mut n_uncond = 0usize;
    for sample in batch {
        let instr = cfg_dropout(&sample.instruction, rng, cfg.uncond_prob);
        if instr.is_null() {
            n_uncond += 1;
        }
        let t = sample_timestep(rng);
        let (units, x1) = sample_units(sample)?;
        let mut noisy = Vec::with_capacity(x1.len());
        let mut u = Vec::with_capacity(x1.len());
        for endpoint in &x1 {
            let state = FlowState::draw(endpoint.clone(), t, rng)?;
            u.push(velocity_target(&state.x0, &state.x1)?);
            noisy.push(state.xt);
        }
        let lcu = LcuPlusPlus::new(instr, units)?.with_noisy(&noisy)?;
        let v = model.forward(&lcu, t, lcu.instruction())?;
        let terms = compute_loss(&v, &u, lcu.n_ref())?;
        let b = terms.breakdown();
        if !b.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss diverged on sample seed {}: total {}, ref {}, tar {}",
                sample.seed, b.total, b.reference, b.target
            )));
        }
        loss.total += b.total * inv_b;
        loss.reference += b.reference * inv_b;
        loss.target += b.target * inv_b;
        terms.total.scale(T::from_f64(inv_b)).backward()?;
    }
    let grad_norm_preclip = global_grad_norm(trainable)?;
    let clip_scale = clip_gradients(trainable, cfg.clip_norm)?;
    let post_clip_norm = global_grad_norm(trainable)?;
    opt.step(trainable)?;
    Ok(StepRecord {
        step: opt.step_count(),
        total: loss.total,
        reference: loss.reference,
        target: loss.target,
        grad_norm_preclip,
        post_clip_norm,
        clip_scale,
        uncond_fraction: n_uncond as f64 * inv_b,
    })
}

/// Where a stage's weights come from.
pub enum StageInit<T: Scalar> {
    /// Seeded random initialization.
    Fresh(ModelConfig),
    /// Continue from in-memory weights.
    Weights(Box<Model<T>>),
    /// Load a checkpoint file.
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub wall_time_secs: f64,
    pub final_checkpoint: Option<String>,
}

impl TrainReport {
    /// Mean of the total loss over records[start..start+len].
    pub fn smoothed_total(&self, start: usize, len: usize) -> f64 {
        assert!(len > 0 && start + len <= self.records.len());
        self.records[start..start + len]
            .iter()
            .map(|r| r.total)
            .sum::<f64>()
            / len as f64
    }

    /// CSV report: `#` header lines echoing the recipe, then one row
    /// per step.
    pub fn write_csv<W: IoWrite>(&self, out: &mut W, cfg: &TrainConfig) -> Result<()> {
        writeln!(
            out,
            "# lr={} weight_decay={} clip_norm={} uncond_prob={} guidance_scale={}",
            cfg.lr, cfg.weight_decay, cfg.clip_norm, cfg.uncond_prob, cfg.guidance_scale
        )?;
        writeln!(
            out,
            "# batch_size={} steps={} seed={} stage={}",
            cfg.batch_size, cfg.steps, cfg.seed, cfg.stage
        )?;
        writeln!(out, "step,total,ref,tar,grad_norm,was_unconditional")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step, r.total, r.reference, r.target, r.grad_norm_preclip, r.uncond_fraction
            )?;
        }
        Ok(())
    }
}

fn checkpoint_name(step: usize) -> String {
    format!("checkpoint_step{step:06}.bin")
}

/// Runs one training stage: validates the stage/dataset pairing,
/// resolves the initial weights, then takes `cfg.steps` optimizer
/// steps over the dataset with a seeded reshuffle each epoch.
///
/// Stage 1 accepts 0-ref samples only. Stage 2 expects checkpoint or
/// in-memory weights; `allow_fresh_stage2` opts into the from-scratch
/// baseline. With an output directory, checkpoints land there every
/// 1000 steps plus at the end, along with `train_log.csv`.
pub fn run_stage<T: Scalar>(
    init: StageInit<T>,
    dataset: &[TaskSample<T>],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    allow_fresh_stage2: bool,
    mut on_step: Option<&mut dyn FnMut(&StepRecord)>,
) -> Result<(Model<T>, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    if cfg.batch_size > dataset.len() {
        return Err(Error::Dataset(format!(
            "batch_size {} exceeds dataset size {}",
            cfg.batch_size,
            dataset.len()
        )));
    }
    if cfg.stage == 1 {
        if let Some((i, s)) = dataset
            .iter()
            .enumerate()
            .find(|(_, s)| !s.references.is_empty())
        {
            return Err(Error::Dataset(format!(
                "stage 1 trains 0-ref tasks only, but sample {i} ({}) carries {} reference(s)",
                s.kind.name(),
                s.references.len()
            )));
        }
    }
    if cfg.stage == 2 && matches!(init, StageInit::Fresh(_)) && !allow_fresh_stage2 {
        return Err(Error::Dataset(
            "stage 2 fine-tunes a stage-1 checkpoint; pass one as init, or explicitly \
             request the from-scratch baseline"
                .into(),
        ));
    }

    let mut model = match init {
        StageInit::Fresh(config) => {
            let mut init_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
            init_rng.set_stream(0);
            Model::new(config, &mut init_rng)?
        }
        StageInit::Weights(m) => *m,
        StageInit::Checkpoint(path) => checkpoint::load::<T>(&path)?.0,
    };
    if let Some(a) = &cfg.adapter {
        let mut adapter_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        adapter_rng.set_stream(2);
        attach_lora(&mut model, a.rank, a.alpha, &a.targets, &mut adapter_rng)?;
    }

    let trainable = model.trainable_params();
    let mut opt = AdamW::new(&trainable, cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut pos = dataset.len();
    let mut records = Vec::with_capacity(cfg.steps);
    let started = Instant::now();
    let mut batch: Vec<&TaskSample<T>> = Vec::with_capacity(cfg.batch_size);
    for step in 1..=cfg.steps {
        if pos + cfg.batch_size > dataset.len() {
            order.shuffle(&mut rng);
            pos = 0;
        }
        batch.clear();
        batch.extend(order[pos..pos + cfg.batch_size].iter().map(|&i| &dataset[i]));
        pos += cfg.batch_size;
        let record = train_step(&model, &mut opt, &trainable, &batch, cfg, &mut rng)?;
        if let Some(cb) = on_step.as_deref_mut() {
            cb(&record);
        }
        records.push(record);
        if let Some(dir) = out_dir {
            if step % 1000 == 0 && step != cfg.steps {
                checkpoint::save(&dir.join(checkpoint_name(step)), &model, cfg)?;
            }
        }
    }

    let final_checkpoint = match out_dir {
        Some(dir) => {
            let name = "checkpoint_final.bin".to_string();
            checkpoint::save(&dir.join(&name), &model, cfg)?;
            Some(name)
        }
        None => None,
    };
    let report = TrainReport {
        records,
        wall_time_secs: started.elapsed().as_secs_f64(),
        final_checkpoint,
    };
    if let Some(dir) = out_dir {
        let mut f = std::fs::File::create(dir.join("train_log.csv"))?;
        report.write_csv(&mut f, cfg)?;
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{gen_sample, make_split, TaskKind};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            model_dim: 8,
            n_layers: 1,
            n_heads: 2,
            patch: 4,
            image_size: 8,
            vocab_size: 15,
            max_cus: 2,
        }
    }

    fn tiny_cfg(steps: usize, batch: usize) -> TrainConfig {
        TrainConfig {
            batch_size: batch,
            steps,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn dropout_endpoints() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let instr = TextInstruction::new(vec![0, 4], 15).unwrap();
        for _ in 0..200 {
            assert!(!cfg_dropout(&instr, &mut rng, 0.0).is_null());
            assert!(cfg_dropout(&instr, &mut rng, 1.0).is_null());
        }
    }

    #[test]
    fn dropout_rate_within_binomial_bound() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let instr = TextInstruction::new(vec![0, 4], 15).unwrap();
        let trials = 100_000;
        let nulls = (0..trials)
            .filter(|_| cfg_dropout(&instr, &mut rng, 0.1).is_null())
            .count();
        let frac = nulls as f64 / trials as f64;
        assert!((frac - 0.1).abs() < 0.005, "null fraction {frac}");
    }

    #[test]
    fn sample_units_audit() {
        let sample = gen_sample::<f32>(TaskKind::SubjectRef, 42, 8);
        let (units, x1) = sample_units(&sample).unwrap();
        assert_eq!(units.len(), 2);
        assert_eq!(x1.len(), 2);
        assert_eq!(units[0].role(), CuRole::Reference);
        assert_eq!(units[1].role(), CuRole::Target);
        assert!(units[0].mask().to_vec().iter().all(|&m| m == 1.0));
        assert_eq!(x1[0].to_vec(), sample.references[0].to_vec());
        assert_eq!(x1[1].to_vec(), sample.target_image.to_vec());
    }

    #[test]
    fn stage1_rejects_reference_samples() {
        let (train, _) = make_split::<f32>(&[TaskKind::Inpaint, TaskKind::SubjectRef], 8, 1, 3, 8).unwrap();
        let err = run_stage(
            StageInit::Fresh(tiny_config()),
            &train,
            &tiny_cfg(2, 2),
            None,
            false,
            None,
        );
        match err {
            Err(Error::Dataset(msg)) => assert!(msg.contains("stage 1")),
            other => panic!("expected Dataset error, got {other:?}"),
        }
    }

    #[test]
    fn stage2_requires_checkpoint_unless_overridden() {
        let (train, _) = make_split::<f32>(&[TaskKind::SubjectRef], 4, 1, 5, 8).unwrap();
        let cfg = TrainConfig {
            stage: 2,
            ..tiny_cfg(2, 2)
        };
        let err = run_stage(
            StageInit::Fresh(tiny_config()),
            &train,
            &cfg,
            None,
            false,
            None,
        );
        match err {
            Err(Error::Dataset(msg)) => assert!(msg.contains("stage-1 checkpoint")),
            other => panic!("expected Dataset error, got {other:?}"),
        }
        let (_, report) = run_stage(
            StageInit::Fresh(tiny_config()),
            &train,
            &cfg,
            None,
            true,
            None,
        )
        .unwrap();
        assert_eq!(report.records.len(), 2);
    }

    #[test]
    fn identical_seeds_identical_traces() {
        let (train, _) = make_split::<f32>(&[TaskKind::Inpaint], 8, 1, 11, 8).unwrap();
        let run = || {
            run_stage(
                StageInit::Fresh(tiny_config()),
                &train,
                &tiny_cfg(6, 4),
                None,
                false,
                None,
            )
            .unwrap()
            .1
        };
        let a = run();
        let b = run();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn stage1_reference_loss_identically_zero_and_clip_holds() {
        let (train, _) = make_split::<f32>(&[TaskKind::Inpaint], 8, 1, 13, 8).unwrap();
        let cfg = tiny_cfg(12, 4);
        let (_, report) = run_stage(
            StageInit::Fresh(tiny_config()),
            &train,
            &cfg,
            None,
            false,
            None,
        )
        .unwrap();
        assert_eq!(report.records.len(), 12);
        for r in &report.records {
            assert_eq!(r.reference, 0.0);
            assert!(r.total.is_finite());
            assert!(r.post_clip_norm <= cfg.clip_norm + 1e-6, "step {}", r.step);
        }
    }

    #[test]
    fn short_run_loss_decreases() {
        let (train, _) = make_split::<f32>(&[TaskKind::Inpaint], 16, 1, 17, 8).unwrap();
        let (_, report) = run_stage(
            StageInit::Fresh(tiny_config()),
            &train,
            &tiny_cfg(200, 4),
            None,
            false,
            None,
        )
        .unwrap();
        let head = report.smoothed_total(0, 50);
        let tail = report.smoothed_total(150, 50);
        assert!(tail < head, "head {head}, tail {tail}");
    }

    #[test]
    fn csv_header_echoes_recipe() {
        let (train, _) = make_split::<f32>(&[TaskKind::Inpaint], 4, 1, 19, 8).unwrap();
        let (_, report) = run_stage(
            StageInit::Fresh(tiny_config()),
            &train,
            &tiny_cfg(2, 2),
            None,
            false,
            None,
        )
        .unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf, &tiny_cfg(2, 2)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("# lr=0.001 weight_decay=0.01 clip_norm=1 uncond_prob=0.1 guidance_scale=1"));
        assert!(text.contains("step,total,ref,tar,grad_norm,was_unconditional"));
        assert_eq!(text.lines().count(), 2 + 1 + 2);
    }

    #[test]
    fn adapter_training_moves_only_adapters() {
        let (train, _) = make_split::<f32>(&[TaskKind::Inpaint], 4, 1, 23, 8).unwrap();
        let mut init_rng = ChaCha20Rng::seed_from_u64(7);
        init_rng.set_stream(0);
        let model = Model::<f32>::new(tiny_config(), &mut init_rng).unwrap();
        let base_before: Vec<Vec<f32>> = model.params().iter().map(|(_, p)| p.to_vec()).collect();
        let cfg = TrainConfig {
            adapter: Some(AdapterConfig {
                rank: 2,
                alpha: 4.0,
                targets: vec!["blocks.0.attn.q".into(), "head".into()],
            }),
            ..tiny_cfg(5, 2)
        };
        let (trained, report) = run_stage(
            StageInit::Weights(Box::new(model)),
            &train,
            &cfg,
            None,
            false,
            None,
        )
        .unwrap();
        assert_eq!(report.records.len(), 5);
        for ((_, p), before) in trained.params().iter().zip(&base_before) {
            assert_eq!(&p.to_vec(), before);
        }
        let moved = trained
            .adapter_params()
            .iter()
            .any(|(_, p)| p.to_vec().iter().any(|&v| v != 0.0));
        assert!(moved);
    }
}

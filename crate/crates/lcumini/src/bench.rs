//! Attention-cost accounting and a wall-clock benchmark comparing the
//! channel-concatenated layout against the legacy two-map layout at
//! their respective sequence lengths.

use crate::error::{Error, Result};
use crate::tensor::kernels;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::hint::black_box;
use std::time::Instant;

#[derive(Debug, Clone, Copy)]
pub struct BenchRow {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub tokens_pp: usize,
    pub tokens_legacy: usize,
    pub flops_pp: u64,
    pub flops_legacy: u64,
    pub time_pp_ms: f64,
    pub time_legacy_ms: f64,
}

impl BenchRow {
    pub fn token_ratio(&self) -> f64 {
        self.tokens_legacy as f64 / self.tokens_pp as f64
    }

    pub fn flop_ratio(&self) -> f64 {
        self.flops_legacy as f64 / self.flops_pp as f64
    }

    pub fn time_ratio(&self) -> f64 {
        self.time_legacy_ms / self.time_pp_ms
    }

    pub fn csv_header() -> &'static str {
        "h,w,patch,dim,tokens_pp,tokens_legacy,token_ratio,flops_pp,flops_legacy,flop_ratio,time_pp_ms,time_legacy_ms,time_ratio"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.height,
            self.width,
            self.patch,
            self.dim,
            self.tokens_pp,
            self.tokens_legacy,
            self.token_ratio(),
            self.flops_pp,
            self.flops_legacy,
            self.flop_ratio(),
            self.time_pp_ms,
            self.time_legacy_ms,
            self.time_ratio()
        )
    }
}

/// QKᵀ plus attention·V: 2·T²·d + 2·T²·d multiply-adds counted as one
/// FLOP each.
pub fn attention_flops(tokens: usize, dim: usize) -> u64 {
    4 * (tokens as u64) * (tokens as u64) * (dim as u64)
}

fn attention_pass(q: &[f32], k: &[f32], v: &[f32], tokens: usize, dim: usize) -> Vec<f32> {
    let scale = 1.0 / (dim as f32).sqrt();
    let mut scores = kernels::mm_nt(q, k, tokens, dim, tokens);
    for row in scores.chunks_exact_mut(tokens) {
        let mut max = f32::NEG_INFINITY;
        for &s in row.iter() {
            max = max.max(s * scale);
        }
        let mut sum = 0.0f32;
        for s in row.iter_mut() {
            *s = (*s * scale - max).exp();
            sum += *s;
        }
        for s in row.iter_mut() {
            *s /= sum;
        }
    }
    kernels::mm_nn(&scores, v, tokens, tokens, dim)
}

fn time_attention(tokens: usize, dim: usize, runs: usize) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(tokens as u64);
    let mut mat = || -> Vec<f32> { (0..tokens * dim).map(|_| rng.gen::<f32>() - 0.5).collect() };
    let q = mat();
    let k = mat();
    let v = mat();
    // Warm-up pass outside the timed set.
    black_box(attention_pass(&q, &k, &v, tokens, dim));
    let mut times: Vec<f64> = (0..runs)
        .map(|_| {
            let t0 = Instant::now();
            black_box(attention_pass(&q, &k, &v, tokens, dim));
            t0.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times[times.len() / 2]
}

/// Benchmarks a 0-ref geometry: the channel-concatenated layout packs
/// one map (T tokens), the legacy layout two maps (2T tokens). Wall
/// times are medians over `runs` passes of softmax(QKᵀ/√d)·V.
pub fn bench_attention(
    height: usize,
    width: usize,
    patch: usize,
    dim: usize,
    runs: usize,
) -> Result<BenchRow> {
    if patch == 0 || height == 0 || width == 0 || dim == 0 {
        return Err(Error::Config("benchmark geometry must be positive".into()));
    }
    if height % patch != 0 || width % patch != 0 {
        return Err(Error::Config(format!(
            "patch {patch} does not divide {height}x{width}"
        )));
    }
    if runs < 5 {
        return Err(Error::Config("benchmark needs at least 5 runs".into()));
    }
    let tokens_pp = (height / patch) * (width / patch);
    let tokens_legacy = 2 * tokens_pp;
    Ok(BenchRow {
        height,
        width,
        patch,
        dim,
        tokens_pp,
        tokens_legacy,
        flops_pp: attention_flops(tokens_pp, dim),
        flops_legacy: attention_flops(tokens_legacy, dim),
        time_pp_ms: time_attention(tokens_pp, dim, runs),
        time_legacy_ms: time_attention(tokens_legacy, dim, runs),
    })
}

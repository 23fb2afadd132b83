//! Product quantization of latent frames into discrete targets via Gumbel
//! softmax, plus codebook-usage statistics for the diversity loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::params::TapeParams;
use crate::numerics::{softmax, ParamSet, Tape, Tensor, VarId};

/// Quantization module layout: `groups` independent codebooks of
/// `entries_per_group` vectors, a logit projection from the latent space,
/// and an output projection from the concatenated selections.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerConfig {
    pub groups: usize,
    pub entries_per_group: usize,
    pub entry_dim: usize,
    /// Latent input dimension (matches the encoder's latent_dim).
    pub input_dim: usize,
    /// Target dimension after the output projection; equals the context
    /// dimension so cosine similarity against context frames is defined.
    pub output_dim: usize,
    /// Softmax temperature for the usage distribution (no sampling noise).
    pub usage_temperature: f64,
    /// Compute usage from averaged softmax probabilities instead of the
    /// softmax of averaged logits.
    pub usage_from_probs: bool,
}

impl QuantizerConfig {
    pub fn paper(input_dim: usize, output_dim: usize) -> Self {
        Self {
            groups: 2,
            entries_per_group: 320,
            entry_dim: 128,
            input_dim,
            output_dim,
            usage_temperature: 1.0,
            usage_from_probs: false,
        }
    }

    pub fn desk(input_dim: usize, output_dim: usize) -> Self {
        Self {
            groups: 2,
            entries_per_group: 16,
            entry_dim: 8,
            input_dim,
            output_dim,
            usage_temperature: 1.0,
            usage_from_probs: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("quantizer.groups", self.groups),
            ("quantizer.entries_per_group", self.entries_per_group),
            ("quantizer.entry_dim", self.entry_dim),
            ("quantizer.input_dim", self.input_dim),
            ("quantizer.output_dim", self.output_dim),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig {
                    key: key.into(),
                    reason: "must be positive".into(),
                });
            }
        }
        if self.usage_temperature <= 0.0 {
            return Err(Error::InvalidConfig {
                key: "quantizer.usage_temperature".into(),
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn logit_dim(&self) -> usize {
        self.groups * self.entries_per_group
    }
}

/// How selections are made and how gradients flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizeMode {
    /// Hard one-hot forward, straight-through soft backward.
    TrainHard,
    /// Fully soft forward (used by gradient checks).
    TrainSoft,
    /// Pure argmax, no noise, no gradient semantics.
    Eval,
}

/// Average codebook usage: one probability row per group, each summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageDistribution {
    /// [groups, entries_per_group].
    pub probs: Tensor,
}

impl UsageDistribution {
    /// exp(entropy) per group, in [1, entries_per_group].
    pub fn perplexity(&self) -> Vec<f64> {
        (0..self.probs.rows())
            .map(|g| {
                let h: f64 = self
                    .probs
                    .row(g)
                    .iter()
                    .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
                    .sum();
                h.exp()
            })
            .collect()
    }
}

/// Initialize quantizer parameters under the `quant.` prefix. Codebook
/// entries start uniform in [-1/sqrt(entry_dim), 1/sqrt(entry_dim)]; the
/// small scale avoids early one-entry collapse.
pub fn init_params<R: Rng>(cfg: &QuantizerConfig, params: &mut ParamSet, rng: &mut R) {
    let bound = 1.0 / (cfg.entry_dim as f64).sqrt();
    for g in 0..cfg.groups {
        params.insert(
            format!("quant.entries{g}"),
            Tensor::rand_uniform(
                vec![cfg.entries_per_group, cfg.entry_dim],
                -bound,
                bound,
                rng,
            ),
        );
    }
    let lb = 1.0 / (cfg.input_dim as f64).sqrt();
    params.insert(
        "quant.logit.weight",
        Tensor::rand_uniform(vec![cfg.input_dim, cfg.logit_dim()], -lb, lb, rng),
    );
    params.insert("quant.logit.bias", Tensor::zeros(vec![cfg.logit_dim()]));
    let ob = 1.0 / ((cfg.groups * cfg.entry_dim) as f64).sqrt();
    params.insert(
        "quant.out.weight",
        Tensor::rand_uniform(
            vec![cfg.groups * cfg.entry_dim, cfg.output_dim],
            -ob,
            ob,
            rng,
        ),
    );
    params.insert("quant.out.bias", Tensor::zeros(vec![cfg.output_dim]));
}

/// Tape handles produced by [`quantize_rows`].
pub struct QuantizeOutput {
    /// Quantized targets, [rows, output_dim].
    pub quantized: VarId,
    /// Raw logits for the same rows, [rows, groups * entries_per_group].
    pub logits: VarId,
    /// Selected entry per (row, group).
    pub indices: Vec<Vec<usize>>,
    /// Per-group selection probabilities, each [rows, entries_per_group].
    pub group_probs: Vec<VarId>,
}

/// Project latent rows to logits.
pub fn project_logits(tape: &mut Tape, tp: &TapeParams, z_rows: VarId) -> VarId {
    let y = tape.matmul(z_rows, tp.id("quant.logit.weight"));
    tape.add_row_vec(y, tp.id("quant.logit.bias"))
}

/// Quantize latent rows [M, input_dim] into targets [M, output_dim].
///
/// Train modes require `temperature > 0`. Gumbel noise is drawn from `rng`
/// when provided; passing `None` suppresses it (selection becomes argmax of
/// the raw logits). In `TrainHard` the forward value is the one-hot
/// selection and the backward pass is straight-through to the soft
/// probabilities.
pub fn quantize_rows<R: Rng>(
    tape: &mut Tape,
    tp: &TapeParams,
    cfg: &QuantizerConfig,
    z_rows: VarId,
    temperature: f64,
    mode: QuantizeMode,
    mut rng: Option<&mut R>,
) -> Result<QuantizeOutput> {
    if mode != QuantizeMode::Eval && temperature <= 0.0 {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    let rows = tape.value(z_rows).rows();
    let v = cfg.entries_per_group;
    let logits = project_logits(tape, tp, z_rows);

    let mut selected_parts = Vec::with_capacity(cfg.groups);
    let mut group_probs = Vec::with_capacity(cfg.groups);
    let mut indices = vec![Vec::with_capacity(cfg.groups); rows];
    for g in 0..cfg.groups {
        let group_logits = tape.slice_cols(logits, g * v, v);
        let (selector, probs, picked) = match mode {
            QuantizeMode::Eval => {
                let picked = argmax_rows(tape.value(group_logits));
                let mut onehot = Tensor::zeros(vec![rows, v]);
                for (r, &p) in picked.iter().enumerate() {
                    onehot.data_mut()[r * v + p] = 1.0;
                }
                let probs = tape.softmax_rows(group_logits);
                (tape.leaf(onehot), probs, picked)
            }
            QuantizeMode::TrainHard | QuantizeMode::TrainSoft => {
                let noisy = match rng.as_deref_mut() {
                    Some(r) => {
                        let noise = gumbel_noise(rows, v, r);
                        let noise = tape.leaf(noise);
                        tape.add(group_logits, noise)
                    }
                    None => group_logits,
                };
                let scaled = tape.scale(noisy, 1.0 / temperature);
                let probs = tape.softmax_rows(scaled);
                let picked = argmax_rows(tape.value(probs));
                let selector = if mode == QuantizeMode::TrainHard {
                    tape.straight_through(probs, picked.clone())
                } else {
                    probs
                };
                (selector, probs, picked)
            }
        };
        for (r, &p) in picked.iter().enumerate() {
            indices[r].push(p);
        }
        group_probs.push(probs);
        selected_parts.push(tape.matmul(selector, tp.id(&format!("quant.entries{g}"))));
    }
    let concat = tape.concat_cols(&selected_parts);
    let projected = tape.matmul(concat, tp.id("quant.out.weight"));
    let quantized = tape.add_row_vec(projected, tp.id("quant.out.bias"));
    Ok(QuantizeOutput {
        quantized,
        logits,
        indices,
        group_probs,
    })
}

/// Quantize a single latent frame outside any training tape.
/// Returns the target vector, the selected entry per group, and the
/// per-group selection probabilities.
pub fn quantize_frame<R: Rng>(
    params: &ParamSet,
    cfg: &QuantizerConfig,
    z_t: &Tensor,
    temperature: f64,
    mode: QuantizeMode,
    rng: Option<&mut R>,
) -> Result<(Tensor, Vec<usize>, Tensor)> {
    let mut tape = Tape::new();
    let tp = params.load(&mut tape);
    let z = tape.leaf(Tensor::matrix(1, z_t.len(), z_t.data().to_vec())?);
    let out = quantize_rows(&mut tape, &tp, cfg, z, temperature, mode, rng)?;
    let mut probs = Tensor::zeros(vec![cfg.groups, cfg.entries_per_group]);
    for (g, &p) in out.group_probs.iter().enumerate() {
        probs.data_mut()[g * cfg.entries_per_group..(g + 1) * cfg.entries_per_group]
            .copy_from_slice(tape.value(p).row(0));
    }
    Ok((
        tape.value(out.quantized).clone(),
        out.indices[0].clone(),
        probs,
    ))
}

/// Average the given logit rows and apply a noise-free temperature softmax
/// per group (or average per-frame softmax probabilities when configured).
pub fn usage_distribution(cfg: &QuantizerConfig, logits: &Tensor) -> Result<UsageDistribution> {
    if logits.len() == 0 || logits.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let v = cfg.entries_per_group;
    debug_assert_eq!(logits.cols(), cfg.logit_dim());
    let rows = logits.rows();
    let probs = if cfg.usage_from_probs {
        let mut acc = Tensor::zeros(vec![cfg.groups, v]);
        for r in 0..rows {
            for g in 0..cfg.groups {
                let scaled: Vec<f64> = logits.row(r)[g * v..(g + 1) * v]
                    .iter()
                    .map(|&l| l / cfg.usage_temperature)
                    .collect();
                let p = softmax(&Tensor::from_vec(scaled), 0);
                for (i, &pv) in p.data().iter().enumerate() {
                    acc.data_mut()[g * v + i] += pv / rows as f64;
                }
            }
        }
        acc
    } else {
        let mut mean = vec![0.0; cfg.logit_dim()];
        for r in 0..rows {
            for (m, &l) in mean.iter_mut().zip(logits.row(r)) {
                *m += l;
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
            *m /= cfg.usage_temperature;
        }
        let grouped = Tensor::matrix(cfg.groups, v, mean)?;
        softmax(&grouped, 1)
    };
    Ok(UsageDistribution { probs })
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn gumbel_noise<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().max(1e-20);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("noise shape")
}

//! Span masking, distractor sampling, the three-term contrastive
//! pre-training loss, and the pre-training step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{self, EncoderConfig, MaskInput};
use crate::error::{Error, Result};
use crate::numerics::params::{OptimizerState, TapeParams};
use crate::numerics::{lr_at_step, ParamSet, ScheduleConfig, Tape, Tensor, VarId};
use crate::quantizer::{self, QuantizeMode, QuantizerConfig, UsageDistribution};

/// Span-mask parameters. Each frame is independently a span start with
/// probability `start_probability`; each start masks `span_length`
/// consecutive frames, truncated at the sequence end (union semantics).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub start_probability: f64,
    pub span_length: usize,
}

impl MaskSpec {
    pub fn paper() -> Self {
        Self {
            start_probability: 0.065,
            span_length: 10,
        }
    }

    pub fn desk() -> Self {
        Self {
            start_probability: 0.2,
            span_length: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.start_probability) {
            return Err(Error::InvalidConfig {
                key: "mask.start_probability".into(),
                reason: format!("must be in [0,1], got {}", self.start_probability),
            });
        }
        if self.span_length == 0 {
            return Err(Error::InvalidConfig {
                key: "mask.span_length".into(),
                reason: "must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// Loss weights and contrastive settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the diversity term.
    pub diversity_weight: f64,
    /// Weight of the L2 penalty term.
    pub penalty_weight: f64,
    /// Similarity temperature in the contrastive softmax.
    pub similarity_temperature: f64,
    /// Distractors per masked position.
    pub distractors: usize,
}

impl LossWeights {
    pub fn paper() -> Self {
        Self {
            diversity_weight: 0.1,
            penalty_weight: 10.0,
            similarity_temperature: 0.1,
            distractors: 100,
        }
    }

    pub fn desk() -> Self {
        Self {
            distractors: 8,
            ..Self::paper()
        }
    }
}

/// Loss values of one step. `total` is exactly
/// `contrastive + diversity_weight * diversity + penalty_weight * penalty`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub contrastive: f64,
    pub diversity: f64,
    pub penalty: f64,
    pub diversity_weight: f64,
    pub penalty_weight: f64,
}

/// Annealed Gumbel temperature: max(floor, start * decay^step).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelSchedule {
    pub start: f64,
    pub floor: f64,
    pub decay: f64,
}

impl GumbelSchedule {
    pub fn paper() -> Self {
        Self {
            start: 2.0,
            floor: 0.5,
            decay: 0.999995,
        }
    }

    pub fn desk() -> Self {
        Self {
            start: 2.0,
            floor: 0.5,
            decay: 0.999,
        }
    }

    pub fn at_step(&self, step: u64) -> f64 {
        (self.start * self.decay.powf(step as f64)).max(self.floor)
    }
}

/// Sample a span mask of length `frames`.
pub fn sample_mask<R: Rng>(frames: usize, spec: &MaskSpec, rng: &mut R) -> Vec<bool> {
    let mut mask = vec![false; frames];
    for t in 0..frames {
        if rng.gen::<f64>() < spec.start_probability {
            for m in mask.iter_mut().skip(t).take(spec.span_length) {
                *m = true;
            }
        }
    }
    mask
}

/// Replace masked rows of `z` by the shared learned embedding.
pub fn apply_mask(z: &Tensor, embed: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if mask.len() != z.rows() {
        return Err(Error::MaskLengthMismatch {
            mask: mask.len(),
            frames: z.rows(),
        });
    }
    if embed.len() != z.cols() {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            expected: vec![z.cols()],
            got: embed.shape().to_vec(),
        });
    }
    let mut out = z.clone();
    let cols = z.cols();
    for (r, &m) in mask.iter().enumerate() {
        if m {
            out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(embed.data());
        }
    }
    Ok(out)
}

/// Draw `count` distractor indices for position `t` uniformly from the other
/// masked indices: distinct when enough candidates exist, with replacement
/// otherwise. `t` never appears in the result.
pub fn sample_distractors<R: Rng>(
    masked_indices: &[usize],
    t: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut candidates: Vec<usize> = masked_indices.iter().copied().filter(|&i| i != t).collect();
    if candidates.is_empty() {
        return Err(Error::NoDistractorCandidates(t));
    }
    if candidates.len() >= count {
        // partial Fisher-Yates for a distinct sample
        for i in 0..count {
            let j = rng.gen_range(i..candidates.len());
            candidates.swap(i, j);
        }
        candidates.truncate(count);
        Ok(candidates)
    } else {
        Ok((0..count)
            .map(|_| candidates[rng.gen_range(0..candidates.len())])
            .collect())
    }
}

/// Contrastive loss for one masked position: negative log probability of the
/// true target among {target} + distractors under temperature-scaled cosine
/// similarities.
pub fn contrastive_loss(
    context: &Tensor,
    target: &Tensor,
    distractors: &[Tensor],
    temperature: f64,
) -> Result<f64> {
    let mut logits = Vec::with_capacity(distractors.len() + 1);
    logits.push(cosine(context, target)? / temperature);
    for d in distractors {
        logits.push(cosine(context, d)? / temperature);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[0])
}

fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    let na: f64 = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Diversity loss: mean of p*ln(p) over all codebook entries, in
/// [-ln(V)/V, 0]. Minimized exactly at uniform usage.
pub fn diversity_loss(usage: &UsageDistribution) -> f64 {
    let n = usage.probs.len() as f64;
    usage
        .probs
        .data()
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum::<f64>()
        / n
}

/// L2 penalty: mean of the squared latent entries.
pub fn l2_penalty(z: &Tensor) -> f64 {
    z.data().iter().map(|v| v * v).sum::<f64>() / z.len() as f64
}

/// Combine the three terms with the configured weights.
pub fn total_loss(
    contrastive: f64,
    diversity: f64,
    penalty: f64,
    weights: &LossWeights,
) -> LossBreakdown {
    LossBreakdown {
        total: contrastive + weights.diversity_weight * diversity + weights.penalty_weight * penalty,
        contrastive,
        diversity,
        penalty,
        diversity_weight: weights.diversity_weight,
        penalty_weight: weights.penalty_weight,
    }
}

/// Model bundle for pre-training: configs plus every trainable tensor.
#[derive(Debug, Clone)]
pub struct PretrainModel {
    pub encoder: EncoderConfig,
    pub quantizer: QuantizerConfig,
    pub mask: MaskSpec,
    pub weights: LossWeights,
    pub params: ParamSet,
}

impl PretrainModel {
    /// Initialize all parameters from the dedicated init stream of `seed`.
    pub fn init(
        encoder_cfg: EncoderConfig,
        quantizer_cfg: QuantizerConfig,
        mask: MaskSpec,
        weights: LossWeights,
        seed: u64,
    ) -> Result<Self> {
        encoder_cfg.validate()?;
        quantizer_cfg.validate()?;
        mask.validate()?;
        if weights.similarity_temperature <= 0.0 {
            return Err(Error::InvalidConfig {
                key: "loss.similarity_temperature".into(),
                reason: "must be positive".into(),
            });
        }
        if weights.distractors == 0 {
            return Err(Error::InvalidConfig {
                key: "loss.distractors".into(),
                reason: "must be >= 1".into(),
            });
        }
        let mut rng = crate::rng::for_stream(seed, crate::rng::STREAM_INIT);
        let mut params = ParamSet::new();
        encoder::init_params(&encoder_cfg, &mut params, &mut rng);
        quantizer::init_params(&quantizer_cfg, &mut params, &mut rng);
        let d = encoder_cfg.latent_dim();
        let bound = 1.0 / (d as f64).sqrt();
        params.insert(
            "mask.embed",
            Tensor::rand_uniform(vec![d], -bound, bound, &mut rng),
        );
        Ok(Self {
            encoder: encoder_cfg,
            quantizer: quantizer_cfg,
            mask,
            weights,
            params,
        })
    }
}

/// Step outcome: losses, codebook perplexity per group, and bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub perplexity: Vec<f64>,
    pub used_utterances: usize,
    pub masked_frames: usize,
}

/// Stable tab-separated training-log format, one line per step.
pub const LOG_HEADER: &str = "step\tlr\tloss\tcontrastive\tdiversity\tpenalty\tperplexity";

pub fn log_line(report: &StepReport) -> String {
    let perp = report
        .perplexity
        .iter()
        .map(|p| format!("{p:.4}"))
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        report.step,
        report.lr,
        report.loss.total,
        report.loss.contrastive,
        report.loss.diversity,
        report.loss.penalty,
        perp
    )
}

struct UtteranceLoss {
    contrastive: VarId,
    masked_frames: usize,
    penalty: VarId,
    latent_values: usize,
    logits: VarId,
}

/// Assemble the pooled three-term loss for a batch of waveforms on `tape`.
///
/// Contrastive targets are quantizations of the unmasked latents at masked
/// positions; the context path sees the masked latents. Returns the loss
/// root plus the pooled masked-frame logits for usage statistics.
#[allow(clippy::too_many_arguments)]
fn batch_loss(
    tape: &mut Tape,
    tp: &TapeParams,
    model: &PretrainModel,
    batch: &[Vec<f64>],
    gumbel_temperature: f64,
    mode: QuantizeMode,
    with_noise: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(VarId, LossParts, Tensor, usize)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let k = model.weights.distractors;
    let mut per_utt = Vec::new();
    for wave in batch {
        let frames = match model.encoder.frame_count(wave.len()) {
            Ok(t) => t,
            Err(e) => return Err(e),
        };
        let mask = sample_mask(frames, &model.mask, rng);
        let masked_idx: Vec<usize> = (0..frames).filter(|&t| mask[t]).collect();
        if masked_idx.len() < 2 {
            // cannot sample distractors; skip this utterance
            continue;
        }

        let wave_id = tape.leaf(Tensor::matrix(wave.len(), 1, wave.clone())?);
        let out = encoder::forward(
            tape,
            tp,
            &model.encoder,
            wave_id,
            Some(MaskInput {
                mask: &mask,
                embed: tp.id("mask.embed"),
            }),
        )?;

        // quantized targets from the unmasked latents at masked positions
        let masked_latents = tape.gather_rows(out.latents, &masked_idx);
        let quant = quantizer::quantize_rows(
            tape,
            tp,
            &model.quantizer,
            masked_latents,
            gumbel_temperature,
            mode,
            if with_noise { Some(rng) } else { None },
        )?;

        let context = out.context();
        let masked_context = tape.gather_rows(context, &masked_idx);
        for id in [masked_context, quant.quantized] {
            let v = tape.value(id);
            for r in 0..v.rows() {
                if v.row(r).iter().all(|&x| x == 0.0) {
                    return Err(Error::ZeroNorm);
                }
            }
        }
        let c_hat = tape.normalize_rows(masked_context);
        let q_hat = tape.normalize_rows(quant.quantized);
        let sims = tape.matmul_nt(c_hat, q_hat);

        // local positions within the masked list
        let m = masked_idx.len();
        let mut pairs = Vec::with_capacity(m * (k + 1));
        for i in 0..m {
            pairs.push((i, i));
            let locals: Vec<usize> = (0..m).collect();
            let picked = sample_distractors(&locals, i, k, rng)?;
            for j in picked {
                pairs.push((i, j));
            }
        }
        let cand = tape.gather_pairs(sims, pairs, k + 1);
        let logits = tape.scale(cand, 1.0 / model.weights.similarity_temperature);
        let contrastive = tape.cross_entropy_rows(logits, &vec![0; m]);

        let sq = tape.mul(out.latents, out.latents);
        let penalty = tape.mean_all(sq);

        per_utt.push(UtteranceLoss {
            contrastive,
            masked_frames: m,
            penalty,
            latent_values: tape.value(out.latents).len(),
            logits: quant.logits,
        });
    }

    if per_utt.is_empty() {
        return Err(Error::BatchUnusable);
    }

    // contrastive pooled over all masked positions in the batch
    let total_masked: usize = per_utt.iter().map(|u| u.masked_frames).sum();
    let mut contrastive: Option<VarId> = None;
    for u in &per_utt {
        let w = u.masked_frames as f64 / total_masked as f64;
        let scaled = tape.scale(u.contrastive, w);
        contrastive = Some(match contrastive {
            Some(acc) => tape.add(acc, scaled),
            None => scaled,
        });
    }
    let contrastive = contrastive.expect("non-empty");

    // L2 penalty pooled over all latent entries in the batch
    let total_values: usize = per_utt.iter().map(|u| u.latent_values).sum();
    let mut penalty: Option<VarId> = None;
    for u in &per_utt {
        let w = u.latent_values as f64 / total_values as f64;
        let scaled = tape.scale(u.penalty, w);
        penalty = Some(match penalty {
            Some(acc) => tape.add(acc, scaled),
            None => scaled,
        });
    }
    let penalty = penalty.expect("non-empty");

    // diversity from the pooled masked-frame logits
    let logit_ids: Vec<VarId> = per_utt.iter().map(|u| u.logits).collect();
    let pooled_logits = tape.concat_rows(&logit_ids);
    let v = model.quantizer.entries_per_group;
    let groups = model.quantizer.groups;
    let usage = if model.quantizer.usage_from_probs {
        let mut rows = Vec::with_capacity(groups);
        for g in 0..groups {
            let part = tape.slice_cols(pooled_logits, g * v, v);
            let scaled = tape.scale(part, 1.0 / model.quantizer.usage_temperature);
            let probs = tape.softmax_rows(scaled);
            rows.push(tape.mean_rows(probs));
        }
        tape.concat_rows(&rows)
    } else {
        let mean = tape.mean_rows(pooled_logits);
        let scaled = tape.scale(mean, 1.0 / model.quantizer.usage_temperature);
        let grouped = tape.reshape(scaled, vec![groups, v]);
        tape.softmax_rows(grouped)
    };
    let plogp = tape.xlogx(usage);
    let summed = tape.sum_all(plogp);
    let diversity = tape.scale(summed, 1.0 / (groups * v) as f64);

    let weighted_div = tape.scale(diversity, model.weights.diversity_weight);
    let weighted_pen = tape.scale(penalty, model.weights.penalty_weight);
    let partial = tape.add(contrastive, weighted_div);
    let total = tape.add(partial, weighted_pen);

    let parts = LossParts {
        contrastive,
        diversity,
        penalty,
    };
    let pooled_logit_values = tape.value(pooled_logits).clone();
    Ok((total, parts, pooled_logit_values, total_masked))
}

struct LossParts {
    contrastive: VarId,
    diversity: VarId,
    penalty: VarId,
}

/// One pre-training step: forward, three-term loss, backward, Adam update at
/// the scheduled rate. Deterministic given (model, batch, step, seed).
pub fn pretrain_step(
    model: &mut PretrainModel,
    optimizer: &mut OptimizerState,
    schedule: &ScheduleConfig,
    gumbel: &GumbelSchedule,
    batch: &[Vec<f64>],
    step: u64,
    seed: u64,
) -> Result<StepReport> {
    let lr = lr_at_step(schedule, step);
    let temperature = gumbel.at_step(step);
    let mut rng = crate::rng::for_step(seed, step);

    let mut tape = Tape::new();
    let tp = model.params.load(&mut tape);
    let (total, parts, pooled_logits, masked_frames) = batch_loss(
        &mut tape,
        &tp,
        model,
        batch,
        temperature,
        QuantizeMode::TrainHard,
        true,
        &mut rng,
    )?;

    let loss = LossBreakdown {
        total: tape.value(total).item(),
        contrastive: tape.value(parts.contrastive).item(),
        diversity: tape.value(parts.diversity).item(),
        penalty: tape.value(parts.penalty).item(),
        diversity_weight: model.weights.diversity_weight,
        penalty_weight: model.weights.penalty_weight,
    };
    if !loss.total.is_finite() {
        return Err(Error::InvalidConfig {
            key: "pretrain.loss".into(),
            reason: format!("non-finite loss at step {step}"),
        });
    }

    let grads = tape.backward(total);
    optimizer.step(&mut model.params, &tp, &grads, lr, |_| false)?;
    debug_assert!(model.params.is_finite());

    let usage = quantizer::usage_distribution(&model.quantizer, &pooled_logits)?;
    Ok(StepReport {
        step,
        lr,
        loss,
        perplexity: usage.perplexity(),
        used_utterances: batch.len(),
        masked_frames,
    })
}

/// Forward-only loss evaluation with the soft (noise-free) quantizer path.
/// Gradient checks differentiate this route.
pub fn batch_loss_soft(
    model: &PretrainModel,
    batch: &[Vec<f64>],
    gumbel_temperature: f64,
    seed: u64,
    step: u64,
) -> Result<LossBreakdown> {
    let mut rng = crate::rng::for_step(seed, step);
    let mut tape = Tape::new();
    let tp = model.params.load(&mut tape);
    let (total, parts, _, _) = batch_loss(
        &mut tape,
        &tp,
        model,
        batch,
        gumbel_temperature,
        QuantizeMode::TrainSoft,
        false,
        &mut rng,
    )?;
    Ok(LossBreakdown {
        total: tape.value(total).item(),
        contrastive: tape.value(parts.contrastive).item(),
        diversity: tape.value(parts.diversity).item(),
        penalty: tape.value(parts.penalty).item(),
        diversity_weight: model.weights.diversity_weight,
        penalty_weight: model.weights.penalty_weight,
    })
}

/// Gradients of the soft-path batch loss for every parameter, plus the loss.
/// Test support for the finite-difference suite.
pub fn batch_loss_soft_grads(
    model: &PretrainModel,
    batch: &[Vec<f64>],
    gumbel_temperature: f64,
    seed: u64,
    step: u64,
) -> Result<(f64, std::collections::BTreeMap<String, Tensor>)> {
    let mut rng = crate::rng::for_step(seed, step);
    let mut tape = Tape::new();
    let tp = model.params.load(&mut tape);
    let (total, _, _, _) = batch_loss(
        &mut tape,
        &tp,
        model,
        batch,
        gumbel_temperature,
        QuantizeMode::TrainSoft,
        false,
        &mut rng,
    )?;
    let grads = tape.backward(total);
    let mut out = std::collections::BTreeMap::new();
    for (name, &id) in tp.iter() {
        out.insert(
            name.clone(),
            grads.get_or_zeros(id, model.params.get(name).shape()),
        );
    }
    Ok((tape.value(total).item(), out))
}

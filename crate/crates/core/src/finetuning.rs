//! Downstream heads and fine-tuning: average pooling, AM-softmax speaker
//! classification, cross-entropy language classification, joint multi-task
//! training with balanced sampling and freeze schedules, and the linear
//! probe for layer-wise distinguishability.

use std::io::{BufRead, Write};

use rand::Rng;

use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, ScoreSet, TrialList};
use crate::numerics::params::{OptimizerState, TapeParams};
use crate::numerics::{lr_at_step, AdamConfig, ParamSet, ScheduleConfig, Tape, Tensor, VarId};

/// AM-softmax speaker head: scaled cosine logits with an additive margin on
/// the target class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeakerHeadConfig {
    pub num_speakers: usize,
    pub scale: f64,
    pub margin: f64,
}

impl SpeakerHeadConfig {
    pub fn new(num_speakers: usize) -> Self {
        Self {
            num_speakers,
            scale: 30.0,
            margin: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 2 {
            return Err(Error::InvalidConfig {
                key: "head.num_speakers".into(),
                reason: "need >= 2 classes".into(),
            });
        }
        if self.scale <= 0.0 || self.margin < 0.0 {
            return Err(Error::InvalidConfig {
                key: "head.scale".into(),
                reason: format!("scale must be > 0 and margin >= 0, got {} / {}", self.scale, self.margin),
            });
        }
        Ok(())
    }
}

/// Affine language head trained with plain cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LanguageHeadConfig {
    pub num_languages: usize,
}

impl LanguageHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_languages < 2 {
            return Err(Error::InvalidConfig {
                key: "head.num_languages".into(),
                reason: "need >= 2 classes".into(),
            });
        }
        Ok(())
    }
}

/// Joint-training weights: loss mix and per-slot dataset probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiTaskConfig {
    pub lambda: f64,
    pub sv_probability: f64,
}

impl Default for MultiTaskConfig {
    fn default() -> Self {
        Self {
            lambda: 0.7,
            sv_probability: 0.5,
        }
    }
}

impl MultiTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig {
                key: "multi.lambda".into(),
                reason: format!("must be in [0,1], got {}", self.lambda),
            });
        }
        if !(0.0..=1.0).contains(&self.sv_probability) {
            return Err(Error::InvalidConfig {
                key: "multi.sv_probability".into(),
                reason: format!("must be in [0,1], got {}", self.sv_probability),
            });
        }
        Ok(())
    }
}

/// Which classification task an item belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Sv,
    Lid,
}

/// Training mode of a fine-tuning run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTask {
    Sv,
    Lid,
    Multi,
}

/// Arithmetic mean over time of frame-level context representations.
pub fn average_pool(frames: &Tensor) -> Tensor {
    let (rows, cols) = (frames.rows(), frames.cols());
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(frames.row(r)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= rows as f64;
    }
    Tensor::from_vec(out)
}

/// AM-softmax loss for one embedding: cross-entropy over `scale * cos`
/// logits with the target logit replaced by `scale * (cos - margin)`.
/// Cosines come from the unit-normalized embedding and class rows.
pub fn am_softmax_loss(
    embedding: &[f64],
    label: usize,
    class_weights: &Tensor,
    head: &SpeakerHeadConfig,
) -> Result<f64> {
    if label >= class_weights.rows() {
        return Err(Error::LabelOutOfRange {
            got: label,
            classes: class_weights.rows(),
        });
    }
    let cosines = am_scores(embedding, class_weights)?;
    let logits: Vec<f64> = cosines
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let margined = if j == label { c - head.margin } else { c };
            head.scale * margined
        })
        .collect();
    Ok(cross_entropy_scalar(&logits, label))
}

/// Cosine of the embedding against every class row; the speaker scoring
/// path. Invariant under positive rescaling of the embedding.
pub fn am_scores(embedding: &[f64], class_weights: &Tensor) -> Result<Vec<f64>> {
    let norm: f64 = embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let mut out = Vec::with_capacity(class_weights.rows());
    for r in 0..class_weights.rows() {
        let row = class_weights.row(r);
        let wnorm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if wnorm == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let dot: f64 = embedding.iter().zip(row).map(|(a, b)| a * b).sum();
        out.push(dot / (norm * wnorm));
    }
    Ok(out)
}

/// Softmax cross-entropy on affine logits `W e + b`.
pub fn ce_language_loss(
    embedding: &[f64],
    label: usize,
    weights: &Tensor,
    bias: &Tensor,
) -> Result<f64> {
    if label >= weights.rows() {
        return Err(Error::LabelOutOfRange {
            got: label,
            classes: weights.rows(),
        });
    }
    let logits = language_logits(embedding, weights, bias);
    Ok(cross_entropy_scalar(&logits, label))
}

/// Affine language logits for one embedding.
pub fn language_logits(embedding: &[f64], weights: &Tensor, bias: &Tensor) -> Vec<f64> {
    (0..weights.rows())
        .map(|r| {
            bias.data()[r]
                + weights
                    .row(r)
                    .iter()
                    .zip(embedding)
                    .map(|(w, e)| w * e)
                    .sum::<f64>()
        })
        .collect()
}

fn cross_entropy_scalar(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Exact convex combination of the two task losses.
pub fn multi_task_loss(sv_loss: f64, lid_loss: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig {
            key: "multi.lambda".into(),
            reason: format!("must be in [0,1], got {lambda}"),
        });
    }
    Ok(lambda * sv_loss + (1.0 - lambda) * lid_loss)
}

/// Fill `batch_size` slots by drawing each one from the SV pool with
/// probability `sv_probability`, else from the LID pool. Items keep their
/// task tag so each loss term sees only its own items.
pub fn balanced_batch<'a, T, R: Rng>(
    sv_pool: &'a [T],
    lid_pool: &'a [T],
    batch_size: usize,
    sv_probability: f64,
    rng: &mut R,
) -> Result<Vec<(Task, &'a T)>> {
    if sv_pool.is_empty() || lid_pool.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        if rng.gen::<f64>() < sv_probability {
            out.push((Task::Sv, &sv_pool[rng.gen_range(0..sv_pool.len())]));
        } else {
            out.push((Task::Lid, &lid_pool[rng.gen_range(0..lid_pool.len())]));
        }
    }
    Ok(out)
}

/// Fine-tuning model: the encoder body plus whichever heads the task needs.
#[derive(Debug, Clone)]
pub struct FinetuneModel {
    pub encoder: EncoderConfig,
    pub speaker_head: Option<SpeakerHeadConfig>,
    pub language_head: Option<LanguageHeadConfig>,
    pub params: ParamSet,
}

impl FinetuneModel {
    /// Take the encoder parameters from a pre-trained set (quantizer and
    /// mask tensors are left behind) and attach freshly initialized heads.
    pub fn from_pretrained(
        pretrained: &ParamSet,
        encoder_cfg: EncoderConfig,
        speaker_head: Option<SpeakerHeadConfig>,
        language_head: Option<LanguageHeadConfig>,
        seed: u64,
    ) -> Result<Self> {
        encoder_cfg.validate()?;
        if speaker_head.is_none() && language_head.is_none() {
            return Err(Error::InvalidConfig {
                key: "finetune.heads".into(),
                reason: "need at least one head".into(),
            });
        }
        let mut params = ParamSet::new();
        for (name, tensor) in pretrained.iter() {
            if encoder::is_encoder_param(name) {
                params.insert(name.clone(), tensor.clone());
            }
        }
        let d = encoder_cfg.model_dim;
        let mut rng = crate::rng::for_stream(seed, crate::rng::STREAM_INIT);
        if let Some(head) = speaker_head {
            head.validate()?;
            let bound = 1.0 / (d as f64).sqrt();
            params.insert(
                "head.sv.weight",
                Tensor::rand_uniform(vec![head.num_speakers, d], -bound, bound, &mut rng),
            );
        }
        if let Some(head) = language_head {
            head.validate()?;
            let bound = 1.0 / (d as f64).sqrt();
            params.insert(
                "head.lid.weight",
                Tensor::rand_uniform(vec![head.num_languages, d], -bound, bound, &mut rng),
            );
            params.insert(
                "head.lid.bias",
                Tensor::zeros(vec![head.num_languages]),
            );
        }
        Ok(Self {
            encoder: encoder_cfg,
            speaker_head,
            language_head,
            params,
        })
    }
}

/// One labeled fine-tuning utterance.
#[derive(Debug, Clone)]
pub struct FinetuneItem {
    pub wave: Vec<f64>,
    pub label: usize,
    pub task: Task,
}

/// Outcome of one fine-tuning step.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub sv_loss: Option<f64>,
    pub lid_loss: Option<f64>,
    pub encoder_frozen: bool,
}

fn pooled_rows(
    tape: &mut Tape,
    tp: &TapeParams,
    cfg: &EncoderConfig,
    items: &[&FinetuneItem],
) -> Result<VarId> {
    let mut rows = Vec::with_capacity(items.len());
    for item in items {
        let wave = tape.leaf(Tensor::matrix(item.wave.len(), 1, item.wave.clone())?);
        let out = encoder::forward(tape, tp, cfg, wave, None)?;
        let context = out.context();
        rows.push(tape.mean_rows(context));
    }
    Ok(tape.concat_rows(&rows))
}

fn sv_batch_loss(
    tape: &mut Tape,
    tp: &TapeParams,
    head: &SpeakerHeadConfig,
    pooled: VarId,
    labels: &[usize],
) -> VarId {
    let e_hat = tape.normalize_rows(pooled);
    let w_hat = tape.normalize_rows(tp.id("head.sv.weight"));
    let cos = tape.matmul_nt(e_hat, w_hat);
    let mut margins = Tensor::zeros(vec![labels.len(), head.num_speakers]);
    for (r, &y) in labels.iter().enumerate() {
        margins.data_mut()[r * head.num_speakers + y] = head.margin;
    }
    let margins = tape.leaf(margins);
    let margined = tape.sub(cos, margins);
    let logits = tape.scale(margined, head.scale);
    tape.cross_entropy_rows(logits, labels)
}

fn lid_batch_loss(tape: &mut Tape, tp: &TapeParams, pooled: VarId, labels: &[usize]) -> VarId {
    let raw = tape.matmul_nt(pooled, tp.id("head.lid.weight"));
    let logits = tape.add_row_vec(raw, tp.id("head.lid.bias"));
    tape.cross_entropy_rows(logits, labels)
}

/// One fine-tuning step. While `step < freeze_steps` the encoder receives no
/// update (bitwise constant); the heads always train. In multi-task mode the
/// loss is `lambda * L_sv + (1 - lambda) * L_lid` over the per-task
/// sub-batches; a missing sub-batch contributes 0.
#[allow(clippy::too_many_arguments)]
pub fn finetune_step(
    model: &mut FinetuneModel,
    optimizer: &mut OptimizerState,
    task: TrainTask,
    schedule: &ScheduleConfig,
    freeze_steps: u64,
    multi: &MultiTaskConfig,
    batch: &[FinetuneItem],
    step: u64,
) -> Result<FinetuneReport> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    multi.validate()?;
    let lr = lr_at_step(schedule, step);
    let frozen = step < freeze_steps;

    let mut tape = Tape::new();
    let tp = model.params.load(&mut tape);

    let sv_items: Vec<&FinetuneItem> = batch.iter().filter(|i| i.task == Task::Sv).collect();
    let lid_items: Vec<&FinetuneItem> = batch.iter().filter(|i| i.task == Task::Lid).collect();

    let mut sv_loss_id = None;
    if !sv_items.is_empty() && task != TrainTask::Lid {
        let head = model.speaker_head.ok_or_else(|| Error::InvalidConfig {
            key: "finetune.heads".into(),
            reason: "speaker items in batch but no speaker head".into(),
        })?;
        let labels: Vec<usize> = sv_items.iter().map(|i| i.label).collect();
        for &l in &labels {
            if l >= head.num_speakers {
                return Err(Error::LabelOutOfRange {
                    got: l,
                    classes: head.num_speakers,
                });
            }
        }
        let pooled = pooled_rows(&mut tape, &tp, &model.encoder, &sv_items)?;
        sv_loss_id = Some(sv_batch_loss(&mut tape, &tp, &head, pooled, &labels));
    }

    let mut lid_loss_id = None;
    if !lid_items.is_empty() && task != TrainTask::Sv {
        let head = model.language_head.ok_or_else(|| Error::InvalidConfig {
            key: "finetune.heads".into(),
            reason: "language items in batch but no language head".into(),
        })?;
        let labels: Vec<usize> = lid_items.iter().map(|i| i.label).collect();
        for &l in &labels {
            if l >= head.num_languages {
                return Err(Error::LabelOutOfRange {
                    got: l,
                    classes: head.num_languages,
                });
            }
        }
        let pooled = pooled_rows(&mut tape, &tp, &model.encoder, &lid_items)?;
        lid_loss_id = Some(lid_batch_loss(&mut tape, &tp, pooled, &labels));
    }

    let total = match task {
        TrainTask::Sv => sv_loss_id.ok_or(Error::EmptyBatch)?,
        TrainTask::Lid => lid_loss_id.ok_or(Error::EmptyBatch)?,
        TrainTask::Multi => {
            let sv_part = sv_loss_id.map(|id| tape.scale(id, multi.lambda));
            let lid_part = lid_loss_id.map(|id| tape.scale(id, 1.0 - multi.lambda));
            match (sv_part, lid_part) {
                (Some(a), Some(b)) => tape.add(a, b),
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => return Err(Error::EmptyBatch),
            }
        }
    };

    let grads = tape.backward(total);
    optimizer.step(&mut model.params, &tp, &grads, lr, |name| {
        frozen && encoder::is_encoder_param(name)
    })?;

    Ok(FinetuneReport {
        step,
        lr,
        loss: tape.value(total).item(),
        sv_loss: sv_loss_id.map(|id| tape.value(id).item()),
        lid_loss: lid_loss_id.map(|id| tape.value(id).item()),
        encoder_frozen: frozen,
    })
}

/// Stable fine-tuning log format, one line per step.
pub const LOG_HEADER: &str = "step\tlr\tloss\tsv\tlid\tfrozen";

pub fn log_line(report: &FinetuneReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}",
        report.step,
        report.lr,
        report.loss,
        opt(report.sv_loss),
        opt(report.lid_loss),
        report.encoder_frozen as u8
    )
}

/// Pooled context embedding of one utterance at a given layer (1-based).
pub fn pooled_embedding(
    params: &ParamSet,
    cfg: &EncoderConfig,
    wave: &[f64],
    layer_index: usize,
) -> Result<Vec<f64>> {
    let ctx = encoder::extract_layer(params, cfg, wave, layer_index)?;
    Ok(average_pool(&ctx.frames).into_data())
}

// --- linear probe ---

/// Probe training settings: full-batch Adam steps on cached embeddings.
#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub steps: u64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.05,
            seed: 0,
        }
    }
}

/// Trained probe head with its training curve.
#[derive(Debug, Clone)]
pub struct Probe {
    pub weight: Tensor,
    pub bias: Tensor,
    pub layer_index: usize,
    pub losses: Vec<f64>,
}

impl Probe {
    /// Probe logits for one embedding.
    pub fn logits(&self, embedding: &[f64]) -> Vec<f64> {
        language_logits(embedding, &self.weight, &self.bias)
    }

    /// Bias-free projection used for trial scoring in probe space.
    pub fn project(&self, embedding: &[f64]) -> Vec<f64> {
        (0..self.weight.rows())
            .map(|r| {
                self.weight
                    .row(r)
                    .iter()
                    .zip(embedding)
                    .map(|(w, e)| w * e)
                    .sum()
            })
            .collect()
    }
}

/// Train a single fully connected layer on frozen embeddings.
pub fn train_probe(
    embeddings: &[(Vec<f64>, usize)],
    num_classes: usize,
    layer_index: usize,
    cfg: &ProbeConfig,
) -> Result<Probe> {
    if num_classes < 2 {
        return Err(Error::InvalidConfig {
            key: "probe.num_classes".into(),
            reason: "need >= 2 classes".into(),
        });
    }
    if embeddings.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let dim = embeddings[0].0.len();
    for (e, label) in embeddings {
        if e.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "train_probe",
                expected: vec![dim],
                got: vec![e.len()],
            });
        }
        if *label >= num_classes {
            return Err(Error::LabelOutOfRange {
                got: *label,
                classes: num_classes,
            });
        }
    }

    let mut rng = crate::rng::for_stream(cfg.seed, crate::rng::STREAM_PROBE);
    let bound = 1.0 / (dim as f64).sqrt();
    let mut params = ParamSet::new();
    params.insert(
        "probe.weight",
        Tensor::rand_uniform(vec![num_classes, dim], -bound, bound, &mut rng),
    );
    params.insert("probe.bias", Tensor::zeros(vec![num_classes]));
    let mut opt = OptimizerState::new(&params, AdamConfig::default());

    let flat: Vec<f64> = embeddings.iter().flat_map(|(e, _)| e.clone()).collect();
    let features = Tensor::matrix(embeddings.len(), dim, flat)?;
    let labels: Vec<usize> = embeddings.iter().map(|(_, l)| *l).collect();

    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let tp = params.load(&mut tape);
        let x = tape.leaf(features.clone());
        let raw = tape.matmul_nt(x, tp.id("probe.weight"));
        let logits = tape.add_row_vec(raw, tp.id("probe.bias"));
        let loss = tape.cross_entropy_rows(logits, &labels);
        losses.push(tape.value(loss).item());
        let grads = tape.backward(loss);
        opt.step(&mut params, &tp, &grads, cfg.lr, |_| false)?;
    }

    Ok(Probe {
        weight: params.get("probe.weight").clone(),
        bias: params.get("probe.bias").clone(),
        layer_index,
        losses,
    })
}

/// Score verification trials by cosine in the probe's projection space.
pub fn probe_trial_eer(
    probe: &Probe,
    embeddings: &[(String, Vec<f64>)],
    trials: &TrialList,
) -> Result<f64> {
    let mut map = std::collections::HashMap::new();
    for (id, emb) in embeddings {
        map.insert(id.as_str(), probe.project(emb));
    }
    let mut set = ScoreSet::default();
    for t in &trials.0 {
        let enroll = map.get(t.enroll.as_str()).ok_or_else(|| Error::MissingScore {
            enroll: t.enroll.clone(),
            test: t.test.clone(),
        })?;
        let test = map.get(t.test.as_str()).ok_or_else(|| Error::MissingScore {
            enroll: t.enroll.clone(),
            test: t.test.clone(),
        })?;
        set.entries.push((t.target, metrics::cosine_score(enroll, test)?));
    }
    Ok(metrics::eer(&set)?.0)
}

// --- embedding file format ---

pub const EMBEDDING_MAGIC: &str = "WREMB1";

/// One embedding record: utterance id, the layer it was tapped from, and the
/// vector itself.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub utterance: String,
    pub layer_index: u32,
    pub vector: Vec<f64>,
}

/// Write embeddings: an ASCII header line `WREMB1 <dim> <count>`, then one
/// little-endian binary record per utterance:
/// `u32 id_len, id bytes, u32 layer_index, dim f64 values`.
pub fn write_embeddings<W: Write>(
    writer: &mut W,
    dim: usize,
    records: &[EmbeddingRecord],
) -> Result<()> {
    writeln!(writer, "{EMBEDDING_MAGIC} {dim} {}", records.len())?;
    for rec in records {
        if rec.vector.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "write_embeddings",
                expected: vec![dim],
                got: vec![rec.vector.len()],
            });
        }
        let id = rec.utterance.as_bytes();
        writer.write_all(&(id.len() as u32).to_le_bytes())?;
        writer.write_all(id)?;
        writer.write_all(&rec.layer_index.to_le_bytes())?;
        for v in &rec.vector {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read an embedding file produced by [`write_embeddings`].
pub fn read_embeddings<R: BufRead>(reader: &mut R, path: &str) -> Result<(usize, Vec<EmbeddingRecord>)> {
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 || fields[0] != EMBEDDING_MAGIC {
        return Err(Error::MalformedLine {
            path: path.into(),
            line: 1,
            reason: format!("bad embedding header {header:?}"),
        });
    }
    let dim: usize = fields[1].parse().map_err(|_| Error::MalformedLine {
        path: path.into(),
        line: 1,
        reason: "bad dim".into(),
    })?;
    let count: usize = fields[2].parse().map_err(|_| Error::MalformedLine {
        path: path.into(),
        line: 1,
        reason: "bad count".into(),
    })?;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len4 = [0u8; 4];
        reader.read_exact(&mut len4)?;
        let id_len = u32::from_le_bytes(len4) as usize;
        let mut id = vec![0u8; id_len];
        reader.read_exact(&mut id)?;
        let mut layer4 = [0u8; 4];
        reader.read_exact(&mut layer4)?;
        let mut vector = Vec::with_capacity(dim);
        let mut v8 = [0u8; 8];
        for _ in 0..dim {
            reader.read_exact(&mut v8)?;
            vector.push(f64::from_le_bytes(v8));
        }
        records.push(EmbeddingRecord {
            utterance: String::from_utf8(id).map_err(|_| Error::MalformedLine {
                path: path.into(),
                line: 0,
                reason: "utterance id is not UTF-8".into(),
            })?,
            layer_index: u32::from_le_bytes(layer4),
            vector,
        });
    }
    Ok((dim, records))
}

//! Run configuration: every hyperparameter of the pipeline in one struct,
//! with named presets and a flat key-value text format.
//!
//! The file format is one `key = value` per line, `#` comments, unknown
//! keys rejected. Keys carry units where ambiguity is possible
//! (`mask.span_frames`, `pretrain.crop_samples`).

use wavrep::encoder::EncoderConfig;
use wavrep::error::{Error, Result};
use wavrep::finetuning::MultiTaskConfig;
use wavrep::numerics::{AdamConfig, ScheduleConfig};
use wavrep::pretraining::{GumbelSchedule, LossWeights, MaskSpec};
use wavrep::quantizer::QuantizerConfig;

/// Quantizer layout without the derived input/output dims.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerSettings {
    pub groups: usize,
    pub entries_per_group: usize,
    pub entry_dim: usize,
    pub usage_temperature: f64,
    pub usage_from_probs: bool,
}

/// Pre-training phase: schedule is derived from `steps` and
/// `warmup_fraction` (the warmup covers that fraction of all updates).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainPhase {
    pub steps: u64,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub batch_utterances: usize,
    pub max_batch_samples: usize,
    pub crop_samples: usize,
}

impl PretrainPhase {
    pub fn schedule(&self) -> ScheduleConfig {
        let warmup = (self.steps as f64 * self.warmup_fraction).round() as u64;
        ScheduleConfig {
            peak_lr: self.peak_lr,
            warmup_steps: warmup.max(1),
            decay_steps: self.steps.saturating_sub(warmup.max(1)),
        }
    }
}

/// One fine-tuning recipe: explicit warmup/decay/freeze step counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetunePhase {
    pub steps: u64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub decay_steps: u64,
    pub freeze_steps: u64,
    pub batch_utterances: usize,
    pub crop_samples: usize,
}

impl FinetunePhase {
    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            decay_steps: self.decay_steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadSettings {
    pub scale: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSettings {
    pub steps: u64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub quantizer: QuantizerSettings,
    pub mask: MaskSpec,
    pub loss: LossWeights,
    pub gumbel: GumbelSchedule,
    pub adam: AdamConfig,
    pub pretrain: PretrainPhase,
    pub sv: FinetunePhase,
    pub lid: FinetunePhase,
    pub multi: FinetunePhase,
    pub multi_task: MultiTaskConfig,
    pub head: HeadSettings,
    pub probe: ProbeSettings,
}

impl RunConfig {
    /// Published-scale hyperparameters.
    pub fn paper() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::paper(),
            quantizer: QuantizerSettings {
                groups: 2,
                entries_per_group: 320,
                entry_dim: 128,
                usage_temperature: 1.0,
                usage_from_probs: false,
            },
            mask: MaskSpec::paper(),
            loss: LossWeights::paper(),
            gumbel: GumbelSchedule::paper(),
            adam: AdamConfig::default(),
            pretrain: PretrainPhase {
                steps: 400_000,
                peak_lr: 5e-3,
                warmup_fraction: 0.08,
                batch_utterances: 8,
                max_batch_samples: 1_400_000,
                crop_samples: 250_000,
            },
            sv: FinetunePhase {
                steps: 13_000,
                peak_lr: 5e-3,
                warmup_steps: 6_000,
                decay_steps: 7_000,
                freeze_steps: 10_000,
                batch_utterances: 8,
                crop_samples: 48_000,
            },
            lid: FinetunePhase {
                steps: 13_000,
                peak_lr: 5e-3,
                warmup_steps: 5_000,
                decay_steps: 8_000,
                freeze_steps: 5_000,
                batch_utterances: 8,
                crop_samples: 48_000,
            },
            multi: FinetunePhase {
                steps: 13_000,
                peak_lr: 5e-3,
                warmup_steps: 6_000,
                decay_steps: 7_000,
                freeze_steps: 10_000,
                batch_utterances: 8,
                crop_samples: 48_000,
            },
            multi_task: MultiTaskConfig::default(),
            head: HeadSettings {
                scale: 30.0,
                margin: 0.2,
            },
            probe: ProbeSettings {
                steps: 200,
                lr: 0.05,
            },
        }
    }

    /// CPU-sized preset for smoke runs and the synthetic corpora.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::desk(),
            quantizer: QuantizerSettings {
                groups: 2,
                entries_per_group: 16,
                entry_dim: 8,
                usage_temperature: 1.0,
                usage_from_probs: false,
            },
            mask: MaskSpec::desk(),
            loss: LossWeights::desk(),
            gumbel: GumbelSchedule::desk(),
            adam: AdamConfig::default(),
            pretrain: PretrainPhase {
                steps: 2_000,
                peak_lr: 3e-4,
                warmup_fraction: 0.08,
                batch_utterances: 4,
                max_batch_samples: 16_000,
                crop_samples: 4_000,
            },
            sv: FinetunePhase {
                steps: 400,
                peak_lr: 2e-3,
                warmup_steps: 60,
                decay_steps: 340,
                freeze_steps: 80,
                batch_utterances: 8,
                crop_samples: 6_000,
            },
            lid: FinetunePhase {
                steps: 400,
                peak_lr: 2e-3,
                warmup_steps: 50,
                decay_steps: 350,
                freeze_steps: 50,
                batch_utterances: 8,
                crop_samples: 6_000,
            },
            multi: FinetunePhase {
                steps: 500,
                peak_lr: 2e-3,
                warmup_steps: 60,
                decay_steps: 440,
                freeze_steps: 80,
                batch_utterances: 8,
                crop_samples: 6_000,
            },
            multi_task: MultiTaskConfig::default(),
            head: HeadSettings {
                scale: 30.0,
                margin: 0.2,
            },
            probe: ProbeSettings {
                steps: 200,
                lr: 0.05,
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::InvalidConfig {
                key: "preset".into(),
                reason: format!("unknown preset {other} (want paper|desk)"),
            }),
        }
    }

    /// Derived quantizer config (input = latent dim, output = model dim).
    pub fn quantizer_config(&self) -> QuantizerConfig {
        QuantizerConfig {
            groups: self.quantizer.groups,
            entries_per_group: self.quantizer.entries_per_group,
            entry_dim: self.quantizer.entry_dim,
            input_dim: self.encoder.latent_dim(),
            output_dim: self.encoder.model_dim,
            usage_temperature: self.quantizer.usage_temperature,
            usage_from_probs: self.quantizer.usage_from_probs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.quantizer_config().validate()?;
        self.mask.validate()?;
        self.multi_task.validate()?;
        // pretrain.steps = 0 stays legal (init-only runs)
        let phase = &self.pretrain;
        if phase.peak_lr < 0.0 || !(0.0..=1.0).contains(&phase.warmup_fraction) {
            return Err(Error::InvalidConfig {
                key: "pretrain.peak_lr".into(),
                reason: "peak_lr must be >= 0 and warmup_fraction in [0,1]".into(),
            });
        }
        if phase.batch_utterances == 0 || phase.crop_samples == 0 {
            return Err(Error::InvalidConfig {
                key: "pretrain.batch_utterances".into(),
                reason: "batch and crop sizes must be positive".into(),
            });
        }
        for (key, phase) in [("sv", &self.sv), ("lid", &self.lid), ("multi", &self.multi)] {
            if phase.peak_lr < 0.0 {
                return Err(Error::InvalidConfig {
                    key: format!("finetune.{key}.peak_lr"),
                    reason: "must be >= 0".into(),
                });
            }
            if phase.batch_utterances == 0 || phase.crop_samples == 0 {
                return Err(Error::InvalidConfig {
                    key: format!("finetune.{key}.batch_utterances"),
                    reason: "batch and crop sizes must be positive".into(),
                });
            }
        }
        if self.head.scale <= 0.0 || self.head.margin < 0.0 {
            return Err(Error::InvalidConfig {
                key: "head.scale".into(),
                reason: "scale must be > 0 and margin >= 0".into(),
            });
        }
        if self.loss.similarity_temperature <= 0.0 || self.loss.distractors == 0 {
            return Err(Error::InvalidConfig {
                key: "loss.similarity_temperature".into(),
                reason: "temperature must be > 0 and distractors >= 1".into(),
            });
        }
        if self.gumbel.start <= 0.0 || self.gumbel.floor <= 0.0 || self.gumbel.decay <= 0.0 {
            return Err(Error::InvalidConfig {
                key: "gumbel.start".into(),
                reason: "gumbel schedule values must be positive".into(),
            });
        }
        if self.probe.steps == 0 || self.probe.lr <= 0.0 {
            return Err(Error::InvalidConfig {
                key: "probe.steps".into(),
                reason: "probe needs steps >= 1 and lr > 0".into(),
            });
        }
        Ok(())
    }

    /// Apply `key = value` overrides, one per line. Unknown keys are
    /// rejected by name.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfig {
                    key: format!("line {}", idx + 1),
                    reason: format!("expected key = value, got {raw:?}"),
                });
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Set one key. The key namespace is exactly what `to_text` emits.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn bad(key: &str, value: &str, want: &str) -> Error {
            Error::InvalidConfig {
                key: key.to_string(),
                reason: format!("cannot parse {value:?} as {want}"),
            }
        }
        macro_rules! parse {
            ($ty:ty, $want:literal) => {
                value.parse::<$ty>().map_err(|_| bad(key, value, $want))?
            };
        }
        let parse_list = |value: &str| -> Result<Vec<usize>> {
            value
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| bad(key, value, "comma-separated integers"))
                })
                .collect()
        };
        match key {
            "seed" => self.seed = parse!(u64, "integer"),
            "encoder.conv_channels" => self.encoder.conv_channels = parse!(usize, "integer"),
            "encoder.conv_strides" => self.encoder.conv_strides = parse_list(value)?,
            "encoder.conv_kernels" => self.encoder.conv_kernels = parse_list(value)?,
            "encoder.transformer_layers" => {
                self.encoder.transformer_layers = parse!(usize, "integer")
            }
            "encoder.model_dim" => self.encoder.model_dim = parse!(usize, "integer"),
            "encoder.ffn_dim" => self.encoder.ffn_dim = parse!(usize, "integer"),
            "encoder.heads" => self.encoder.heads = parse!(usize, "integer"),
            "encoder.pos_kernel_frames" => self.encoder.pos_kernel = parse!(usize, "integer"),
            "encoder.pos_groups" => self.encoder.pos_groups = parse!(usize, "integer"),
            "encoder.pre_norm" => self.encoder.pre_norm = parse!(bool, "bool"),
            "quantizer.groups" => self.quantizer.groups = parse!(usize, "integer"),
            "quantizer.entries_per_group" => {
                self.quantizer.entries_per_group = parse!(usize, "integer")
            }
            "quantizer.entry_dim" => self.quantizer.entry_dim = parse!(usize, "integer"),
            "quantizer.usage_temperature" => {
                self.quantizer.usage_temperature = parse!(f64, "float")
            }
            "quantizer.usage_from_probs" => {
                self.quantizer.usage_from_probs = parse!(bool, "bool")
            }
            "mask.start_probability" => self.mask.start_probability = parse!(f64, "float"),
            "mask.span_frames" => self.mask.span_length = parse!(usize, "integer"),
            "loss.diversity_weight" => self.loss.diversity_weight = parse!(f64, "float"),
            "loss.penalty_weight" => self.loss.penalty_weight = parse!(f64, "float"),
            "loss.similarity_temperature" => {
                self.loss.similarity_temperature = parse!(f64, "float")
            }
            "loss.distractors" => self.loss.distractors = parse!(usize, "integer"),
            "gumbel.start" => self.gumbel.start = parse!(f64, "float"),
            "gumbel.floor" => self.gumbel.floor = parse!(f64, "float"),
            "gumbel.decay" => self.gumbel.decay = parse!(f64, "float"),
            "adam.beta1" => self.adam.beta1 = parse!(f64, "float"),
            "adam.beta2" => self.adam.beta2 = parse!(f64, "float"),
            "adam.epsilon" => self.adam.epsilon = parse!(f64, "float"),
            "pretrain.steps" => self.pretrain.steps = parse!(u64, "integer"),
            "pretrain.peak_lr" => self.pretrain.peak_lr = parse!(f64, "float"),
            "pretrain.warmup_fraction" => self.pretrain.warmup_fraction = parse!(f64, "float"),
            "pretrain.batch_utterances" => {
                self.pretrain.batch_utterances = parse!(usize, "integer")
            }
            "pretrain.max_batch_samples" => {
                self.pretrain.max_batch_samples = parse!(usize, "integer")
            }
            "pretrain.crop_samples" => self.pretrain.crop_samples = parse!(usize, "integer"),
            "multi.lambda" => self.multi_task.lambda = parse!(f64, "float"),
            "multi.sv_probability" => self.multi_task.sv_probability = parse!(f64, "float"),
            "head.scale" => self.head.scale = parse!(f64, "float"),
            "head.margin" => self.head.margin = parse!(f64, "float"),
            "probe.steps" => self.probe.steps = parse!(u64, "integer"),
            "probe.lr" => self.probe.lr = parse!(f64, "float"),
            _ => {
                for (prefix, phase) in [
                    ("finetune.sv.", &mut self.sv),
                    ("finetune.lid.", &mut self.lid),
                    ("finetune.multi.", &mut self.multi),
                ] {
                    if let Some(field) = key.strip_prefix(prefix) {
                        match field {
                            "steps" => phase.steps = parse!(u64, "integer"),
                            "peak_lr" => phase.peak_lr = parse!(f64, "float"),
                            "warmup_steps" => phase.warmup_steps = parse!(u64, "integer"),
                            "decay_steps" => phase.decay_steps = parse!(u64, "integer"),
                            "freeze_steps" => phase.freeze_steps = parse!(u64, "integer"),
                            "batch_utterances" => {
                                phase.batch_utterances = parse!(usize, "integer")
                            }
                            "crop_samples" => phase.crop_samples = parse!(usize, "integer"),
                            _ => {
                                return Err(Error::InvalidConfig {
                                    key: key.to_string(),
                                    reason: "unknown key".into(),
                                })
                            }
                        }
                        return Ok(());
                    }
                }
                return Err(Error::InvalidConfig {
                    key: key.to_string(),
                    reason: "unknown key".into(),
                });
            }
        }
        Ok(())
    }

    /// Canonical text form; `apply_text` of this output reproduces the
    /// config exactly.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("encoder.conv_channels", self.encoder.conv_channels.to_string());
        kv("encoder.conv_strides", list(&self.encoder.conv_strides));
        kv("encoder.conv_kernels", list(&self.encoder.conv_kernels));
        kv(
            "encoder.transformer_layers",
            self.encoder.transformer_layers.to_string(),
        );
        kv("encoder.model_dim", self.encoder.model_dim.to_string());
        kv("encoder.ffn_dim", self.encoder.ffn_dim.to_string());
        kv("encoder.heads", self.encoder.heads.to_string());
        kv("encoder.pos_kernel_frames", self.encoder.pos_kernel.to_string());
        kv("encoder.pos_groups", self.encoder.pos_groups.to_string());
        kv("encoder.pre_norm", self.encoder.pre_norm.to_string());
        kv("quantizer.groups", self.quantizer.groups.to_string());
        kv(
            "quantizer.entries_per_group",
            self.quantizer.entries_per_group.to_string(),
        );
        kv("quantizer.entry_dim", self.quantizer.entry_dim.to_string());
        kv(
            "quantizer.usage_temperature",
            self.quantizer.usage_temperature.to_string(),
        );
        kv(
            "quantizer.usage_from_probs",
            self.quantizer.usage_from_probs.to_string(),
        );
        kv("mask.start_probability", self.mask.start_probability.to_string());
        kv("mask.span_frames", self.mask.span_length.to_string());
        kv("loss.diversity_weight", self.loss.diversity_weight.to_string());
        kv("loss.penalty_weight", self.loss.penalty_weight.to_string());
        kv(
            "loss.similarity_temperature",
            self.loss.similarity_temperature.to_string(),
        );
        kv("loss.distractors", self.loss.distractors.to_string());
        kv("gumbel.start", self.gumbel.start.to_string());
        kv("gumbel.floor", self.gumbel.floor.to_string());
        kv("gumbel.decay", self.gumbel.decay.to_string());
        kv("adam.beta1", self.adam.beta1.to_string());
        kv("adam.beta2", self.adam.beta2.to_string());
        kv("adam.epsilon", self.adam.epsilon.to_string());
        kv("pretrain.steps", self.pretrain.steps.to_string());
        kv("pretrain.peak_lr", self.pretrain.peak_lr.to_string());
        kv(
            "pretrain.warmup_fraction",
            self.pretrain.warmup_fraction.to_string(),
        );
        kv(
            "pretrain.batch_utterances",
            self.pretrain.batch_utterances.to_string(),
        );
        kv(
            "pretrain.max_batch_samples",
            self.pretrain.max_batch_samples.to_string(),
        );
        kv("pretrain.crop_samples", self.pretrain.crop_samples.to_string());
        for (prefix, phase) in [
            ("finetune.sv.", &self.sv),
            ("finetune.lid.", &self.lid),
            ("finetune.multi.", &self.multi),
        ] {
            kv(&format!("{prefix}steps"), phase.steps.to_string());
            kv(&format!("{prefix}peak_lr"), phase.peak_lr.to_string());
            kv(&format!("{prefix}warmup_steps"), phase.warmup_steps.to_string());
            kv(&format!("{prefix}decay_steps"), phase.decay_steps.to_string());
            kv(&format!("{prefix}freeze_steps"), phase.freeze_steps.to_string());
            kv(
                &format!("{prefix}batch_utterances"),
                phase.batch_utterances.to_string(),
            );
            kv(&format!("{prefix}crop_samples"), phase.crop_samples.to_string());
        }
        kv("multi.lambda", self.multi_task.lambda.to_string());
        kv("multi.sv_probability", self.multi_task.sv_probability.to_string());
        kv("head.scale", self.head.scale.to_string());
        kv("head.margin", self.head.margin.to_string());
        kv("probe.steps", self.probe.steps.to_string());
        kv("probe.lr", self.probe.lr.to_string());
        out
    }
}

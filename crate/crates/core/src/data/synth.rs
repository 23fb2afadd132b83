//! Synthetic dataset generator: a desk-scale stand-in for the speaker and
//! language corpora.
//!
//! Every synthetic speaker is a fixed pair of resonant-filter signatures
//! applied to seeded noise; every synthetic language is a distinct slow
//! amplitude-modulation pattern layered on top. Speaker utterances carry a
//! random modulation and language utterances a random filler spectrum, so
//! neither task leaks into the other and per-utterance RMS normalization
//! removes overall energy as a cue.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::manifest::{write_manifest, ManifestEntry};
use super::wav::{write_wav_f64, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::metrics::{write_trials, Trial, TrialList};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    /// Total speakers; the last `test_speaker_count()` are held out of
    /// training entirely.
    pub num_speakers: usize,
    pub num_languages: usize,
    /// Utterances generated per speaker and per language.
    pub utterances_per_class: usize,
    pub min_samples: usize,
    pub max_samples: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn desk(seed: u64) -> Self {
        Self {
            num_speakers: 8,
            num_languages: 4,
            utterances_per_class: 40,
            min_samples: 6000,
            max_samples: 9600,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 4 {
            return Err(Error::InvalidConfig {
                key: "synth.num_speakers".into(),
                reason: "need >= 4 speakers (at least two are held out for trials)".into(),
            });
        }
        if self.num_languages < 2 {
            return Err(Error::InvalidConfig {
                key: "synth.num_languages".into(),
                reason: "need >= 2 languages".into(),
            });
        }
        if self.utterances_per_class < 5 {
            return Err(Error::InvalidConfig {
                key: "synth.utterances_per_class".into(),
                reason: "need >= 5 utterances per class".into(),
            });
        }
        if self.min_samples < 1000 || self.max_samples < self.min_samples {
            return Err(Error::InvalidConfig {
                key: "synth.min_samples".into(),
                reason: "need 1000 <= min_samples <= max_samples".into(),
            });
        }
        Ok(())
    }

    /// Speakers reserved for the disjoint test split.
    pub fn test_speaker_count(&self) -> usize {
        (self.num_speakers / 4).max(2)
    }
}

/// Where everything was written.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub root: PathBuf,
    pub train_manifest: PathBuf,
    pub dev_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub trials: PathBuf,
    pub train: Vec<ManifestEntry>,
    pub dev: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

struct SpeakerVoice {
    freq1: f64,
    freq2: f64,
}

/// Two-pole resonator bank plus a small broadband floor.
fn speaker_filter(noise: &[f64], voice: &SpeakerVoice) -> Vec<f64> {
    let resonate = |freq: f64, r: f64| {
        let omega = 2.0 * std::f64::consts::PI * freq / SAMPLE_RATE as f64;
        let a1 = 2.0 * r * omega.cos();
        let a2 = -r * r;
        let gain = 1.0 - r;
        let mut y1 = 0.0;
        let mut y2 = 0.0;
        let mut out = Vec::with_capacity(noise.len());
        for &x in noise {
            let y = a1 * y1 + a2 * y2 + gain * x;
            out.push(y);
            y2 = y1;
            y1 = y;
        }
        out
    };
    let band1 = resonate(voice.freq1, 0.985);
    let band2 = resonate(voice.freq2, 0.99);
    noise
        .iter()
        .zip(band1.iter().zip(&band2))
        .map(|(&x, (&b1, &b2))| b1 + b2 + 0.05 * x)
        .collect()
}

/// Slow amplitude modulation: rate in Hz plus an odd-power sharpening that
/// alternates between languages.
fn modulate(samples: &mut [f64], rate: f64, power: u32, phase: f64) {
    let two_pi = 2.0 * std::f64::consts::PI;
    for (n, s) in samples.iter_mut().enumerate() {
        let t = n as f64 / SAMPLE_RATE as f64;
        let base = 0.5 + 0.5 * (two_pi * rate * t + phase).sin();
        *s *= 0.15 + 0.85 * base.powi(power as i32);
    }
}

fn normalize_rms(samples: &mut [f64], target: f64) {
    let rms = (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt();
    if rms > 0.0 {
        let g = target / rms;
        for s in samples {
            *s = (*s * g).clamp(-0.99, 0.99);
        }
    }
}

fn language_rate(lang: usize) -> f64 {
    3.0 + 5.0 * lang as f64
}

fn language_power(lang: usize) -> u32 {
    if lang % 2 == 0 {
        1
    } else {
        3
    }
}

/// Generate the corpus: WAV files, train/dev/test manifests with disjoint
/// test speakers, and the verification trial list over test-speaker
/// utterances. Byte-identical for identical specs.
pub fn synth_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir)?;
    let mut rng = crate::rng::for_stream(spec.seed, crate::rng::STREAM_SYNTH);

    // fixed, well-separated speaker signatures: slots in a low and a high
    // band, with the high slot decorrelated from the low one
    let voices: Vec<SpeakerVoice> = (0..spec.num_speakers)
        .map(|s| {
            let n = spec.num_speakers as f64;
            let low_slot = (s as f64 + 0.5) / n;
            let high_slot = ((s * 5 + 2) % spec.num_speakers) as f64 / n;
            SpeakerVoice {
                freq1: 300.0 + low_slot * 2200.0,
                freq2: 2800.0 + (high_slot + 0.5 / n) * 4200.0,
            }
        })
        .collect();

    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    let test_speakers = spec.test_speaker_count();
    let first_test_speaker = spec.num_speakers - test_speakers;
    let dev_per_class = (spec.utterances_per_class / 10).max(1);
    let test_per_class = (spec.utterances_per_class / 5).max(1);

    // speaker-labeled pool
    for s in 0..spec.num_speakers {
        for u in 0..spec.utterances_per_class {
            let len = rng.gen_range(spec.min_samples..=spec.max_samples);
            let noise: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut samples = speaker_filter(&noise, &voices[s]);
            let rate = rng.gen_range(2.5..25.0);
            let power = if rng.gen::<bool>() { 1 } else { 3 };
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            modulate(&mut samples, rate, power, phase);
            normalize_rms(&mut samples, 0.1);

            let id = format!("sv_s{s:02}_u{u:03}");
            let rel = format!("wav/{id}.wav");
            write_wav_f64(&out_dir.join(&rel), &samples)?;
            let entry = ManifestEntry {
                id,
                path: rel,
                samples: samples.len(),
                speaker: Some(format!("spk{s:02}")),
                language: None,
            };
            if s >= first_test_speaker {
                test.push(entry);
            } else if u < dev_per_class {
                dev.push(entry);
            } else {
                train.push(entry);
            }
        }
    }

    // language-labeled pool with per-utterance filler spectra
    for l in 0..spec.num_languages {
        for u in 0..spec.utterances_per_class {
            let len = rng.gen_range(spec.min_samples..=spec.max_samples);
            let noise: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let filler = SpeakerVoice {
                freq1: rng.gen_range(300.0..2500.0),
                freq2: rng.gen_range(2800.0..7000.0),
            };
            let mut samples = speaker_filter(&noise, &filler);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            modulate(&mut samples, language_rate(l), language_power(l), phase);
            normalize_rms(&mut samples, 0.1);

            let id = format!("lid_l{l:02}_u{u:03}");
            let rel = format!("wav/{id}.wav");
            write_wav_f64(&out_dir.join(&rel), &samples)?;
            let entry = ManifestEntry {
                id,
                path: rel,
                samples: samples.len(),
                speaker: None,
                language: Some(format!("lang{l}")),
            };
            if u < dev_per_class {
                dev.push(entry);
            } else if u < dev_per_class + test_per_class {
                test.push(entry);
            } else {
                train.push(entry);
            }
        }
    }

    // verification trials over the disjoint test speakers
    let sv_test: Vec<&ManifestEntry> = test.iter().filter(|e| e.speaker.is_some()).collect();
    let mut trials = TrialList::default();
    for i in 0..sv_test.len() {
        for j in i + 1..sv_test.len() {
            trials.0.push(Trial {
                enroll: sv_test[i].id.clone(),
                test: sv_test[j].id.clone(),
                target: sv_test[i].speaker == sv_test[j].speaker,
            });
        }
    }

    let train_manifest = out_dir.join("train.tsv");
    let dev_manifest = out_dir.join("dev.tsv");
    let test_manifest = out_dir.join("test.tsv");
    let trials_path = out_dir.join("trials.txt");
    write_manifest(&train_manifest, &train)?;
    write_manifest(&dev_manifest, &dev)?;
    write_manifest(&test_manifest, &test)?;
    let mut trial_file = fs::File::create(&trials_path)?;
    write_trials(&mut trial_file, &trials)?;

    Ok(SynthOutput {
        root: out_dir.to_path_buf(),
        train_manifest,
        dev_manifest,
        test_manifest,
        trials: trials_path,
        train,
        dev,
        test,
    })
}

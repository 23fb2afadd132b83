//! Crop-based batch assembly under a total-sample budget.
//!
//! The policy is "reject short, never pad": an utterance shorter than the
//! crop is used whole, one shorter than the encoder's minimum receptive
//! field is an error.

use std::path::Path;

use rand::Rng;

use super::manifest::ManifestEntry;
use super::wav::read_wav;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropPolicy {
    /// Target crop length per utterance.
    pub crop_samples: usize,
    /// Upper bound on the summed sample count of one batch.
    pub max_total_samples: usize,
    /// Minimum usable utterance length (the encoder's receptive field).
    pub min_samples: usize,
}

/// Draw `count` distinct manifest rows for one batch (uniform without
/// replacement; the whole pool when it is smaller).
pub fn sample_batch_entries<'a, R: Rng>(
    entries: &'a [ManifestEntry],
    count: usize,
    rng: &mut R,
) -> Vec<&'a ManifestEntry> {
    if entries.len() <= count {
        return entries.iter().collect();
    }
    let mut indices: Vec<usize> = (0..entries.len()).collect();
    for i in 0..count {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    indices[..count].iter().map(|&i| &entries[i]).collect()
}

/// Random-crop one utterance: a uniform window of `crop_samples` when the
/// utterance is longer, the whole utterance otherwise. Rejects anything
/// shorter than `min_samples`.
pub fn crop_utterance<R: Rng>(
    samples: Vec<f64>,
    id: &str,
    policy: &CropPolicy,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if samples.len() < policy.min_samples {
        return Err(Error::UtteranceTooShort {
            id: id.to_string(),
            min: policy.min_samples,
            got: samples.len(),
        });
    }
    if samples.len() > policy.crop_samples {
        let offset = rng.gen_range(0..=samples.len() - policy.crop_samples);
        Ok(samples[offset..offset + policy.crop_samples].to_vec())
    } else {
        Ok(samples)
    }
}

/// Read and crop the given utterances into one batch, stopping when the
/// sample budget would be exceeded. Crop offsets are uniform.
pub fn build_batch<R: Rng>(
    entries: &[&ManifestEntry],
    base_dir: &Path,
    policy: &CropPolicy,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if entries.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut batch = Vec::new();
    let mut used = 0usize;
    for entry in entries {
        let samples = read_wav(&base_dir.join(&entry.path))?;
        let cropped = crop_utterance(samples, &entry.id, policy, rng)?;
        if used + cropped.len() > policy.max_total_samples && !batch.is_empty() {
            break;
        }
        used += cropped.len();
        batch.push(cropped);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::wav::write_wav_f64;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(id: &str, path: &str, samples: usize) -> ManifestEntry {
        ManifestEntry {
            id: id.into(),
            path: path.into(),
            samples,
            speaker: None,
            language: None,
        }
    }

    fn write_ramp(dir: &Path, name: &str, len: usize) {
        // strictly increasing ramp makes crop offsets observable
        let samples: Vec<f64> = (0..len).map(|i| i as f64 / (len as f64 * 2.0)).collect();
        write_wav_f64(&dir.join(name), &samples).unwrap();
    }

    #[test]
    fn crop_equal_length_uses_whole_utterance() {
        let dir = tempfile::tempdir().unwrap();
        write_ramp(dir.path(), "a.wav", 1000);
        let e = entry("a", "a.wav", 1000);
        let policy = CropPolicy {
            crop_samples: 1000,
            max_total_samples: 10_000,
            min_samples: 100,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = build_batch(&[&e], dir.path(), &policy, &mut rng).unwrap();
        assert_eq!(batch.len(), 1);
        assert_eq!(batch[0].len(), 1000);
        assert_eq!(batch[0][0], 0.0);
    }

    #[test]
    fn crop_offset_within_range() {
        let dir = tempfile::tempdir().unwrap();
        write_ramp(dir.path(), "b.wav", 32_000);
        let e = entry("b", "b.wav", 32_000);
        let policy = CropPolicy {
            crop_samples: 16_000,
            max_total_samples: 64_000,
            min_samples: 100,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let batch = build_batch(&[&e], dir.path(), &policy, &mut rng).unwrap();
            assert_eq!(batch[0].len(), 16_000);
            // recover the offset from the ramp value
            let offset = (batch[0][0] * 64_000.0).round() as usize;
            assert!(offset <= 16_000);
        }
    }

    #[test]
    fn budget_caps_batch_size() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..5 {
            write_ramp(dir.path(), &format!("u{i}.wav"), 20_000);
        }
        let entries: Vec<ManifestEntry> = (0..5)
            .map(|i| entry(&format!("u{i}"), &format!("u{i}.wav"), 20_000))
            .collect();
        let refs: Vec<&ManifestEntry> = entries.iter().collect();
        let policy = CropPolicy {
            crop_samples: 16_000,
            max_total_samples: 48_000,
            min_samples: 100,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = build_batch(&refs, dir.path(), &policy, &mut rng).unwrap();
        assert_eq!(batch.len(), 3);
    }

    #[test]
    fn too_short_utterance_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_ramp(dir.path(), "tiny.wav", 50);
        let e = entry("tiny", "tiny.wav", 50);
        let policy = CropPolicy {
            crop_samples: 1000,
            max_total_samples: 4000,
            min_samples: 400,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let err = build_batch(&[&e], dir.path(), &policy, &mut rng);
        assert!(matches!(err, Err(Error::UtteranceTooShort { min: 400, got: 50, .. })));
    }

    #[test]
    fn sample_entries_distinct_and_reproducible() {
        let entries: Vec<ManifestEntry> = (0..10)
            .map(|i| entry(&format!("u{i}"), "x.wav", 100))
            .collect();
        let pick = |seed: u64| -> Vec<String> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_batch_entries(&entries, 4, &mut rng)
                .iter()
                .map(|e| e.id.clone())
                .collect()
        };
        let a = pick(5);
        let b = pick(5);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let mut sorted = a.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
    }
}

//! Audio ingestion, dataset manifests, batching policy, and the synthetic
//! dataset generator for desk-scale speaker/language experiments.

pub mod batch;
pub mod manifest;
pub mod synth;
pub mod wav;

pub use batch::{build_batch, crop_utterance, sample_batch_entries, CropPolicy};
pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use synth::{synth_dataset, SynthOutput, SyntheticSpec};
pub use wav::{read_wav, write_wav, write_wav_f64, SAMPLE_RATE};

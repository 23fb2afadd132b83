//! RIFF/WAVE reader and writer, restricted to PCM16 mono 16 kHz.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// The only sample rate this pipeline accepts.
pub const SAMPLE_RATE: u32 = 16_000;

/// Read a PCM16 mono 16 kHz WAV file. Samples are scaled to [-1, 1) by
/// dividing by 32768; the parse is bit-exact little-endian.
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    let name = path.display().to_string();
    let malformed = |reason: &str| Error::WavMalformed {
        path: name.clone(),
        reason: reason.into(),
    };

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::WavNotRiff { path: name });
    }

    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None; // tag, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start + size;
        if body_end > bytes.len() {
            return Err(malformed("chunk extends past end of file"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(malformed("fmt chunk too small"));
                }
                let body = &bytes[body_start..body_end];
                format = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {}
        }
        // chunks are word-aligned
        pos = body_end + (size & 1);
    }

    let (tag, channels, rate, bits) = format.ok_or_else(|| malformed("missing fmt chunk"))?;
    if tag != 1 || bits != 16 {
        return Err(Error::WavCodec {
            path: name,
            format: tag,
            bits,
        });
    }
    if channels != 1 {
        return Err(Error::WavChannels {
            path: name,
            got: channels,
        });
    }
    if rate != SAMPLE_RATE {
        return Err(Error::WavSampleRate {
            path: name,
            got: rate,
            want: SAMPLE_RATE,
        });
    }
    let data = data.ok_or_else(|| malformed("missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(malformed("odd data chunk length"));
    }
    Ok(data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect())
}

/// Write PCM16 mono 16 kHz samples.
pub fn write_wav(path: &Path, samples: &[i16]) -> Result<()> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Quantize float samples in [-1, 1) to PCM16 and write them.
pub fn write_wav_f64(path: &Path, samples: &[f64]) -> Result<()> {
    let quantized: Vec<i16> = samples
        .iter()
        .map(|&s| (s * 32768.0).clamp(-32768.0, 32767.0) as i16)
        .collect();
    write_wav(path, &quantized)
}

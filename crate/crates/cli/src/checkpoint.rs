//! Checkpoint serialization.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic    8 bytes  b"WRCKPT01"
//! version  u32      1
//! floats   u8       8 (f64) or 4 (f32 export)
//! step     u64      global training step
//! config   u64 len + UTF-8 blob (canonical RunConfig text)
//! opt flag u8       1 when optimizer state follows the payloads
//! count    u32      tensor count
//! directory: per tensor { u16 name_len, name, u8 ndim, u64 dims...,
//!                         u64 payload_offset, u64 payload_len }
//! payloads: tensors in directory order
//! optimizer (optional): per tensor in directory order
//!   { u64 step_count, first-moment payload, second-moment payload }
//! ```
//! Offsets are relative to the start of the payload section. Tensor names
//! are unique by construction (directory order is the parameter order).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use wavrep::error::{Error, Result};
use wavrep::numerics::params::OptimizerState;
use wavrep::numerics::{AdamConfig, AdamState, ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"WRCKPT01";
pub const VERSION: u32 = 1;

/// In-memory checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    pub step: u64,
    pub params: ParamSet,
    pub optimizer: Option<OptimizerState>,
}

fn write_tensor_payload(out: &mut Vec<u8>, tensor: &Tensor, f32_export: bool) {
    if f32_export {
        for v in tensor.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    } else {
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serialize a checkpoint. `f32_export` halves the size at the cost of the
/// bitwise round-trip guarantee (which holds only for 64-bit floats).
pub fn save(path: &Path, ckpt: &Checkpoint, f32_export: bool) -> Result<()> {
    let width: usize = if f32_export { 4 } else { 8 };
    let mut directory = Vec::new();
    let mut payloads = Vec::new();
    let mut offset = 0u64;
    for (name, tensor) in ckpt.params.iter() {
        let name_bytes = name.as_bytes();
        directory.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        directory.extend_from_slice(name_bytes);
        directory.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            directory.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let len = (tensor.len() * width) as u64;
        directory.extend_from_slice(&offset.to_le_bytes());
        directory.extend_from_slice(&len.to_le_bytes());
        offset += len;
        write_tensor_payload(&mut payloads, tensor, f32_export);
    }

    let mut optimizer = Vec::new();
    if let Some(opt) = &ckpt.optimizer {
        for (name, _) in ckpt.params.iter() {
            let slot = opt.slots.get(name).ok_or_else(|| Error::InvalidConfig {
                key: format!("checkpoint.optimizer.{name}"),
                reason: "missing optimizer slot".into(),
            })?;
            optimizer.extend_from_slice(&slot.step_count.to_le_bytes());
            write_tensor_payload(&mut optimizer, &slot.first_moment, f32_export);
            write_tensor_payload(&mut optimizer, &slot.second_moment, f32_export);
        }
    }

    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[width as u8])?;
    w.write_all(&ckpt.step.to_le_bytes())?;
    let config = ckpt.config_text.as_bytes();
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(config)?;
    w.write_all(&[ckpt.optimizer.is_some() as u8])?;
    w.write_all(&(ckpt.params.len() as u32).to_le_bytes())?;
    w.write_all(&directory)?;
    w.write_all(&payloads)?;
    w.write_all(&optimizer)?;
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::MalformedLine {
                path: self.path.clone(),
                line: 0,
                reason: format!("truncated checkpoint at byte {}", self.pos),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self, count: usize, width: usize) -> Result<Vec<f64>> {
        let raw = self.take(count * width)?;
        Ok(if width == 4 {
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect()
        })
    }
}

/// Load a checkpoint, verifying magic, version, directory consistency, and
/// name uniqueness.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    let malformed = |r: &Reader, reason: String| Error::MalformedLine {
        path: r.path.clone(),
        line: 0,
        reason,
    };

    if r.take(8)? != MAGIC {
        return Err(malformed(&r, "bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(malformed(&r, format!("unrecognized version {version}")));
    }
    let width = r.u8()? as usize;
    if width != 4 && width != 8 {
        return Err(malformed(&r, format!("bad float width {width}")));
    }
    let step = r.u64()?;
    let config_len = r.u64()? as usize;
    let config_text = String::from_utf8(r.take(config_len)?.to_vec())
        .map_err(|_| malformed(&r, "config blob is not UTF-8".into()))?;
    let has_optimizer = r.u8()? != 0;
    let count = r.u32()? as usize;

    let mut names = Vec::with_capacity(count);
    let mut shapes = Vec::with_capacity(count);
    let mut spans = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| malformed(&r, "tensor name is not UTF-8".into()))?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let offset = r.u64()?;
        let len = r.u64()?;
        let elems: usize = shape.iter().product();
        if len as usize != elems * width {
            return Err(malformed(
                &r,
                format!("tensor {name}: payload length {len} does not match shape {shape:?}"),
            ));
        }
        if names.contains(&name) {
            return Err(malformed(&r, format!("duplicate tensor name {name}")));
        }
        names.push(name);
        shapes.push(shape);
        spans.push((offset, elems));
    }

    let mut params = ParamSet::new();
    let mut expected_offset = 0u64;
    for ((name, shape), (offset, elems)) in names.iter().zip(&shapes).zip(&spans) {
        if *offset != expected_offset {
            return Err(malformed(
                &r,
                format!("tensor {name}: offset {offset} out of order"),
            ));
        }
        expected_offset += (*elems * width) as u64;
        let data = r.floats(*elems, width)?;
        params.insert(name.clone(), Tensor::new(shape.clone(), data)?);
    }

    let optimizer = if has_optimizer {
        // Adam constants live in the config blob; reconstructed by the
        // caller via attach_adam. Here we restore the raw moments.
        let mut opt = OptimizerState::new(&params, AdamConfig::default());
        for ((name, shape), (_, elems)) in names.iter().zip(&shapes).zip(&spans) {
            let step_count = r.u64()?;
            let m = r.floats(*elems, width)?;
            let v = r.floats(*elems, width)?;
            opt.slots.insert(
                name.clone(),
                AdamState {
                    first_moment: Tensor::new(shape.clone(), m)?,
                    second_moment: Tensor::new(shape.clone(), v)?,
                    step_count,
                    config: AdamConfig::default(),
                },
            );
        }
        Some(opt)
    } else {
        None
    };

    if r.pos != r.bytes.len() {
        return Err(malformed(&r, "trailing bytes after checkpoint".into()));
    }

    Ok(Checkpoint {
        config_text,
        step,
        params,
        optimizer,
    })
}

/// Re-bind the Adam constants from the run config onto a loaded optimizer
/// state (they are not stored per slot).
pub fn attach_adam(optimizer: &mut OptimizerState, adam: AdamConfig) {
    optimizer.config = adam;
    for slot in optimizer.slots.values_mut() {
        slot.config = adam;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_params(seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params.insert("b.matrix", Tensor::rand_uniform(vec![3, 4], -1.0, 1.0, &mut rng));
        params.insert("a.vector", Tensor::rand_uniform(vec![7], -1.0, 1.0, &mut rng));
        params.insert(
            "c.cube",
            Tensor::rand_uniform(vec![2, 3, 2], -1.0, 1.0, &mut rng),
        );
        params
    }

    #[test]
    fn round_trip_is_bitwise_with_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = sample_params(1);
        let mut opt = OptimizerState::new(&params, AdamConfig::default());
        // make the moments nonzero
        for slot in opt.slots.values_mut() {
            slot.step_count = 17;
            for v in slot.first_moment.data_mut() {
                *v = 0.123456789012345678;
            }
        }
        let ckpt = Checkpoint {
            config_text: RunConfig::desk().to_text(),
            step: 42,
            params: params.clone(),
            optimizer: Some(opt.clone()),
        };
        save(&path, &ckpt, false).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.config_text, ckpt.config_text);
        assert_eq!(loaded.params, params);
        let lopt = loaded.optimizer.unwrap();
        for (name, slot) in &opt.slots {
            let l = &lopt.slots[name];
            assert_eq!(l.step_count, slot.step_count);
            assert_eq!(l.first_moment, slot.first_moment);
            assert_eq!(l.second_moment, slot.second_moment);
        }

        // saving the loaded checkpoint reproduces the same bytes
        let path2 = dir.path().join("model2.ckpt");
        save(
            &path2,
            &Checkpoint {
                config_text: loaded.config_text,
                step: loaded.step,
                params: loaded.params,
                optimizer: Some(lopt),
            },
            false,
        )
        .unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn f32_export_loads_with_reduced_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("export.ckpt");
        let params = sample_params(2);
        let ckpt = Checkpoint {
            config_text: String::new(),
            step: 0,
            params: params.clone(),
            optimizer: None,
        };
        save(&path, &ckpt, true).unwrap();
        let loaded = load(&path).unwrap();
        for (name, tensor) in params.iter() {
            let l = loaded.params.get(name);
            for (a, b) in tensor.data().iter().zip(l.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        // f32 file is smaller
        let big = dir.path().join("big.ckpt");
        save(&big, &ckpt, false).unwrap();
        assert!(fs::metadata(&path).unwrap().len() < fs::metadata(&big).unwrap().len());
    }

    #[test]
    fn rejects_corrupted_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"WRONGMAG rest").unwrap();
        assert!(load(&path).is_err());

        let good = dir.path().join("good.ckpt");
        let ckpt = Checkpoint {
            config_text: "x = 1".into(),
            step: 1,
            params: sample_params(3),
            optimizer: None,
        };
        save(&good, &ckpt, false).unwrap();
        let mut bytes = fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, &bytes).unwrap();
        assert!(load(&path).is_err());
    }
}

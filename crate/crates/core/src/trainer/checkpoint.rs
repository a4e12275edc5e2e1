//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//! magic `PXPRO6'1'`, format version u32, SHA-256 of the canonical config
//! text, step u64, config text (u64 length + UTF-8 bytes), entry count
//! u64, then one manifest record per tensor — kind, decay-exempt flag,
//! name, shape, byte offset — followed by the concatenated f64 payloads.
//! Saving is deterministic, so save → load → save is byte-identical.

use super::config::TrainRunConfig;
use super::lars::OptimizerState;
use super::TrainState;
use crate::error::{io, PixproError};
use crate::params::{BufferSet, ParamSet};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MAGIC: &[u8; 6] = b"PXPRO1";
pub const FORMAT_VERSION: u32 = 1;

const KIND_ONLINE: u8 = 0;
const KIND_MOMENTUM: u8 = 1;
const KIND_OPTIMIZER: u8 = 2;
const KIND_BUFFER: u8 = 3;

struct Entry {
    kind: u8,
    exempt: u8,
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn collect_entries(state: &TrainState) -> Vec<Entry> {
    let mut entries = Vec::new();
    for def in state.online.iter() {
        entries.push(Entry {
            kind: KIND_ONLINE,
            exempt: def.decay_exempt as u8,
            name: def.name.clone(),
            shape: def.shape.clone(),
            values: def.values.clone(),
        });
    }
    for def in state.momentum.iter() {
        entries.push(Entry {
            kind: KIND_MOMENTUM,
            exempt: def.decay_exempt as u8,
            name: def.name.clone(),
            shape: def.shape.clone(),
            values: def.values.clone(),
        });
    }
    let mut opt_names: Vec<&String> = state.opt.momentum.keys().collect();
    opt_names.sort();
    for name in opt_names {
        let values = &state.opt.momentum[name];
        entries.push(Entry {
            kind: KIND_OPTIMIZER,
            exempt: 0,
            name: name.clone(),
            shape: vec![values.len()],
            values: values.clone(),
        });
    }
    for (name, values) in state.buffers.iter() {
        entries.push(Entry {
            kind: KIND_BUFFER,
            exempt: 0,
            name: name.to_string(),
            shape: vec![values.len()],
            values: values.to_vec(),
        });
    }
    entries
}

pub fn serialize(state: &TrainState) -> Vec<u8> {
    let config_text = state.config.to_text();
    let digest = Sha256::digest(config_text.as_bytes());
    let entries = collect_entries(state);

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&digest);
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());

    let mut offset = 0u64;
    for e in &entries {
        out.push(e.kind);
        out.push(e.exempt);
        out.extend_from_slice(&(e.name.len() as u64).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u64).to_le_bytes());
        for d in &e.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (e.values.len() * 8) as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for e in &entries {
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(state: &TrainState, path: &Path) -> Result<(), PixproError> {
    let bytes = serialize(state);
    // write to a sibling temp file and rename so a crash never leaves a
    // truncated checkpoint under the final name
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PixproError> {
        if self.pos + n > self.bytes.len() {
            return Err(PixproError::Checkpoint(format!(
                "truncated checkpoint: needed {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PixproError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PixproError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, PixproError> {
        let len = self.u64()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| PixproError::Checkpoint("non-UTF-8 string in checkpoint".into()))
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<TrainState, PixproError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(6)?;
    if magic != MAGIC {
        return Err(PixproError::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(PixproError::CheckpointVersion {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let digest: [u8; 32] = cur.take(32)?.try_into().unwrap();
    let step = cur.u64()?;
    let config_text = cur.string()?;
    let actual = Sha256::digest(config_text.as_bytes());
    if actual.as_slice() != digest {
        return Err(PixproError::Checkpoint(
            "config digest does not match the embedded config text".into(),
        ));
    }
    let config = TrainRunConfig::parse(&config_text)?;

    let n_entries = cur.u64()? as usize;
    let mut manifest = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let kind = cur.take(1)?[0];
        let exempt = cur.take(1)?[0] != 0;
        let name = cur.string()?;
        let ndim = cur.u64()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64()? as usize);
        }
        let offset = cur.u64()? as usize;
        manifest.push((kind, exempt, name, shape, offset));
    }
    let payload_len = cur.u64()? as usize;
    let payload = cur.take(payload_len)?;
    if cur.pos != bytes.len() {
        return Err(PixproError::Checkpoint(format!(
            "{} trailing bytes after payload",
            bytes.len() - cur.pos
        )));
    }

    let mut online = ParamSet::new();
    let mut momentum = ParamSet::new();
    let mut opt = OptimizerState::new();
    let mut buffers = BufferSet::new();
    for (kind, exempt, name, shape, offset) in manifest {
        let numel: usize = shape.iter().product();
        let end = offset + numel * 8;
        if end > payload.len() {
            return Err(PixproError::Checkpoint(format!(
                "tensor '{name}' extends past the payload"
            )));
        }
        let values: Vec<f64> = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        match kind {
            KIND_ONLINE => online.add(&name, &shape, values, exempt),
            KIND_MOMENTUM => momentum.add(&name, &shape, values, exempt),
            KIND_OPTIMIZER => {
                opt.momentum.insert(name, values);
            }
            KIND_BUFFER => buffers.add(&name, values),
            other => {
                return Err(PixproError::Checkpoint(format!(
                    "unknown tensor kind {other} for '{name}'"
                )))
            }
        }
    }

    Ok(TrainState {
        config,
        step,
        online,
        momentum,
        buffers,
        opt,
    })
}

pub fn load(path: &Path) -> Result<TrainState, PixproError> {
    let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
    deserialize(&bytes)
}

/// One manifest row for inspection: (kind name, tensor name, shape).
pub type ManifestRow = (String, String, Vec<usize>);

/// Step, canonical config text, and the manifest rows of a checkpoint.
pub fn describe(bytes: &[u8]) -> Result<(u64, String, Vec<ManifestRow>), PixproError> {
    let state = deserialize(bytes)?;
    let mut rows = Vec::new();
    for e in collect_entries(&state) {
        let kind = match e.kind {
            KIND_ONLINE => "online",
            KIND_MOMENTUM => "momentum",
            KIND_OPTIMIZER => "optimizer",
            _ => "buffer",
        };
        rows.push((kind.to_string(), e.name, e.shape));
    }
    Ok((state.step, state.config.digest(), rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder;

    fn toy_state() -> TrainState {
        let config = TrainRunConfig {
            dataset: "toy".into(),
            ..TrainRunConfig::default()
        };
        let enc = config.to_encoder_config();
        let (online, buffers) = encoder::init_params(&enc, 7);
        let momentum = encoder::init_momentum(&online);
        let mut opt = OptimizerState::new();
        opt.momentum
            .insert("backbone.stage0.conv.w".into(), vec![0.25; 16 * 3 * 9]);
        TrainState {
            config,
            step: 42,
            online,
            momentum,
            buffers,
            opt,
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let state = toy_state();
        let bytes = serialize(&state);
        let loaded = deserialize(&bytes).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(serialize(&loaded), bytes);
    }

    #[test]
    fn roundtrip_preserves_every_value_bitwise() {
        let state = toy_state();
        let loaded = deserialize(&serialize(&state)).unwrap();
        for (a, b) in state.online.iter().zip(loaded.online.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.decay_exempt, b.decay_exempt);
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(
            state.opt.momentum["backbone.stage0.conv.w"],
            loaded.opt.momentum["backbone.stage0.conv.w"]
        );
        assert_eq!(state.buffers.len(), loaded.buffers.len());
    }

    #[test]
    fn corrupted_magic_rejected() {
        let mut bytes = serialize(&toy_state());
        bytes[0] = b'Q';
        let err = deserialize(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn version_mismatch_reports_both_versions() {
        let mut bytes = serialize(&toy_state());
        bytes[6..10].copy_from_slice(&99u32.to_le_bytes());
        match deserialize(&bytes).unwrap_err() {
            PixproError::CheckpointVersion { expected, found } => {
                assert_eq!(expected, FORMAT_VERSION);
                assert_eq!(found, 99);
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn truncated_file_rejected() {
        let bytes = serialize(&toy_state());
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(deserialize(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn tampered_config_text_fails_digest_check() {
        let state = toy_state();
        let text = state.config.to_text();
        let bytes = serialize(&state);
        let pos = bytes
            .windows(text.len())
            .position(|w| w == text.as_bytes())
            .unwrap();
        let mut tampered = bytes.clone();
        tampered[pos] = tampered[pos].wrapping_add(1);
        assert!(deserialize(&tampered).is_err());
    }
}

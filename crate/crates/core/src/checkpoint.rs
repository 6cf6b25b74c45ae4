//! Flat named-tensor checkpoint archive: a JSON header (config, step, RNG
//! state, tensor directory) followed by little-endian f32 payload, tensors
//! concatenated in name order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, StyleDiffusion};

const MAGIC: &[u8; 8] = b"STDFCKP1";

/// Serializable ChaCha stream position, enough to resume draws exactly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RngState {
    pub seed_hex: String,
    pub word_pos: String,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed();
        let mut seed_hex = String::with_capacity(64);
        for b in seed {
            seed_hex.push_str(&format!("{b:02x}"));
        }
        Self {
            seed_hex,
            word_pos: rng.get_word_pos().to_string(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        if self.seed_hex.len() != 64 {
            return Err(Error::Checkpoint("rng seed must be 32 bytes hex".into()));
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in self.seed_hex.as_bytes().chunks(2).enumerate() {
            let s = std::str::from_utf8(chunk)
                .map_err(|_| Error::Checkpoint("bad rng seed encoding".into()))?;
            seed[i] = u8::from_str_radix(s, 16)
                .map_err(|_| Error::Checkpoint("bad rng seed hex".into()))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint("bad rng word position".into()))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    pub step: u64,
    pub model: ModelConfig,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
}

/// Write the model parameters plus metadata to `path`.
pub fn save(
    path: &Path,
    model: &StyleDiffusion,
    step: u64,
    rng_state: &RngState,
) -> Result<()> {
    let entries = model.store().sorted_entries();
    let mut directory = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    let mut payload: Vec<f32> = Vec::new();
    for (name, var) in entries {
        let t = var.as_tensor();
        let shape = t.dims().to_vec();
        let flat = t.flatten_all()?.to_vec1::<f32>()?;
        directory.push(TensorEntry {
            name: name.to_string(),
            shape,
            offset,
            len: flat.len() as u64,
        });
        offset += flat.len() as u64;
        payload.extend(flat);
    }
    let header = CheckpointHeader {
        format: 1,
        step,
        model: model.config().clone(),
        rng: rng_state.clone(),
        tensors: directory,
    };
    let header_json = serde_json::to_vec(&header)?;

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    for v in payload {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read header and raw tensor data from `path`.
pub fn load_raw(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Vec<f32>)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)?;
    if header.format != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported format {}",
            header.format
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let total: u64 = header.tensors.iter().map(|t| t.len).sum();
    if payload.len() != (total as usize) * 4 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, directory expects {}",
            payload.len(),
            total * 4
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let start = (entry.offset as usize) * 4;
        let end = start + (entry.len as usize) * 4;
        let mut data = Vec::with_capacity(entry.len as usize);
        for chunk in payload[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let expect: usize = entry.shape.iter().product();
        if expect != data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {}: shape {:?} vs {} values",
                entry.name,
                entry.shape,
                data.len()
            )));
        }
        tensors.push((entry.name.clone(), data));
    }
    Ok((header, tensors))
}

/// Rebuild a model from a checkpoint archive.
pub fn load_model(path: &Path) -> Result<(StyleDiffusion, CheckpointHeader)> {
    let (header, tensors) = load_raw(path)?;
    // Architecture from the stored config; values overwritten below, so the
    // init seed is irrelevant.
    let model = StyleDiffusion::init(header.model.clone(), 0)?;
    for (name, data) in tensors {
        model.store().set(&name, data)?;
    }
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::model::ScheduleConfig;
    use rand::RngCore;

    fn tiny_model(seed: u64) -> StyleDiffusion {
        let cfg = ModelConfig {
            denoiser: DenoiserConfig {
                channels: vec![8],
                d_cond: 4,
                d_style: 3,
                time_dim: 8,
                resolution: 8,
                prompt_len: 2,
                ..Default::default()
            },
            schedule: ScheduleConfig {
                timesteps: 10,
                ..Default::default()
            },
            prompt_ids: vec!["class0".into()],
        };
        StyleDiffusion::init(cfg, seed).unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model(7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.next_u64();
        rng.next_u64();
        save(&path, &model, 42, &RngState::capture(&rng)).unwrap();

        let (loaded, header) = load_model(&path).unwrap();
        assert_eq!(header.step, 42);
        assert_eq!(header.model, *model.config());
        assert_eq!(
            loaded.store().snapshot().unwrap(),
            model.store().snapshot().unwrap()
        );

        // RNG state resumes exactly: restored rng continues the sequence.
        let mut restored = header.rng.restore().unwrap();
        let mut original = rng.clone();
        assert_eq!(restored.next_u64(), original.next_u64());
    }

    #[test]
    fn tensors_are_name_sorted_and_contiguous() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model(9);
        let rng = ChaCha8Rng::seed_from_u64(1);
        save(&path, &model, 0, &RngState::capture(&rng)).unwrap();
        let (header, _) = load_raw(&path).unwrap();
        let names: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        let mut expect = 0u64;
        for t in &header.tensors {
            assert_eq!(t.offset, expect);
            expect += t.len;
        }
    }

    #[test]
    fn corrupt_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC000000000").unwrap();
        assert!(matches!(load_raw(&path), Err(Error::Checkpoint(_))));
    }
}

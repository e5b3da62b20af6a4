//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `KCPT`, version u16, header length u32, a
//! JSON header (config, vocabularies, epoch, RNG state), parameter count
//! u32, then per parameter: name length u16, name UTF-8, rank u32, extents
//! u32 each, and the values as f32.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{KecmrnModel, ModelConfig, Vocabularies};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"KCPT";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Seed plus stream position; enough to rebuild the training RNG exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocabularies,
    epoch: usize,
    rng_seed: u64,
    rng_word_pos_hi: u64,
    rng_word_pos_lo: u64,
}

pub fn save_checkpoint(
    model: &KecmrnModel<f32>,
    epoch: usize,
    rng: &RngState,
    mut w: impl Write,
) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        epoch,
        rng_seed: rng.seed,
        rng_word_pos_hi: (rng.word_pos >> 64) as u64,
        rng_word_pos_lo: rng.word_pos as u64,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, tensor) in model.params.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &e in tensor.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint_path(
    model: &KecmrnModel<f32>,
    epoch: usize,
    rng: &RngState,
    path: &Path,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    save_checkpoint(model, epoch, rng, std::io::BufWriter::new(file))
}

pub fn load_checkpoint(mut r: impl Read) -> Result<(KecmrnModel<f32>, usize, RngState)> {
    fn read_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
        r.read_exact(buf)
            .map_err(|_| Error::format(format!("checkpoint truncated reading {what}")))
    }

    let mut magic = [0u8; 4];
    read_or(&mut r, &mut magic, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut u16b = [0u8; 2];
    read_or(&mut r, &mut u16b, "version")?;
    let version = u16::from_le_bytes(u16b);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let mut u32b = [0u8; 4];
    read_or(&mut r, &mut u32b, "header length")?;
    let header_len = u32::from_le_bytes(u32b) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_or(&mut r, &mut header_bytes, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let mut model = KecmrnModel::<f32>::new(header.config, header.vocab)?;

    read_or(&mut r, &mut u32b, "parameter count")?;
    let count = u32::from_le_bytes(u32b) as usize;
    if count != model.params.len() {
        return Err(Error::format(format!(
            "checkpoint has {count} parameters, architecture expects {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        read_or(&mut r, &mut u16b, "parameter name length")?;
        let name_len = u16::from_le_bytes(u16b) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_or(&mut r, &mut name_bytes, "parameter name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format("parameter name is not UTF-8".to_string()))?;
        read_or(&mut r, &mut u32b, "rank")?;
        let rank = u32::from_le_bytes(u32b) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            read_or(&mut r, &mut u32b, "extent")?;
            shape.push(u32::from_le_bytes(u32b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0f32; numel];
        for v in data.iter_mut() {
            read_or(&mut r, &mut u32b, "parameter values")?;
            *v = f32::from_le_bytes(u32b);
        }
        let id = model
            .params
            .by_name(&name)
            .ok_or_else(|| Error::format(format!("unknown parameter `{name}` in checkpoint")))?;
        if model.params.get(id).shape() != shape.as_slice() {
            return Err(Error::format(format!(
                "parameter `{name}`: checkpoint shape {:?} vs architecture {:?}",
                shape,
                model.params.get(id).shape()
            )));
        }
        let mut tensor = Tensor::new(shape, data)?;
        tensor.requires_grad = true;
        *model.params.get_mut(id) = tensor;
    }

    let rng = RngState {
        seed: header.rng_seed,
        word_pos: ((header.rng_word_pos_hi as u128) << 64) | header.rng_word_pos_lo as u128,
    };
    Ok((model, header.epoch, rng))
}

pub fn load_checkpoint_path(path: &Path) -> Result<(KecmrnModel<f32>, usize, RngState)> {
    let file = std::fs::File::open(path)?;
    load_checkpoint(std::io::BufReader::new(file))
}

//! Binary checkpoints of a [`ModelState`].
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        b"HQGA"
//! version      u32
//! config       u32 byte length, then UTF-8 JSON of ModelConfig
//! feature_dim  u64
//! params       u32 count, then per block: rows u32, cols u32, rows*cols f64
//! adam.m       same block list
//! adam.v       same block list
//! adam.step    u64
//! anneal       temperature f64, initial f64, decay f64, floor f64, step u64, mode u8 (0 sample, 1 argmax)
//! epoch        u64
//! rng          seed [u8; 32], word_pos u128, stream u64
//! ```
//!
//! Parameter blocks are stored in construction order; loading rebuilds the
//! model structure from the config and checks every block shape.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{ModelConfig, ModelError, ModelState};
use crate::tensor::Matrix;
use crate::vq::{AnnealState, SelectMode};

const MAGIC: &[u8; 4] = b"HQGA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint config: {0}")]
    Config(#[from] serde_json::Error),
    #[error("checkpoint does not match its config: {0}")]
    Layout(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_blocks(w: &mut impl Write, blocks: &[Matrix]) -> std::io::Result<()> {
    put_u32(w, blocks.len() as u32)?;
    for m in blocks {
        put_u32(w, m.rows() as u32)?;
        put_u32(w, m.cols() as u32)?;
        for &v in m.as_slice() {
            put_f64(w, v)?;
        }
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn get_u32(r: &mut impl Read) -> std::io::Result<u32> {
    take::<4>(r).map(u32::from_le_bytes)
}

fn get_u64(r: &mut impl Read) -> std::io::Result<u64> {
    take::<8>(r).map(u64::from_le_bytes)
}

fn get_f64(r: &mut impl Read) -> std::io::Result<f64> {
    take::<8>(r).map(f64::from_le_bytes)
}

fn get_blocks(r: &mut impl Read, expected: &[Matrix], what: &str) -> Result<Vec<Matrix>> {
    let count = get_u32(r)? as usize;
    if count != expected.len() {
        return Err(CheckpointError::Layout(format!("{what}: {count} blocks, expected {}", expected.len())));
    }
    expected
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let rows = get_u32(r)? as usize;
            let cols = get_u32(r)? as usize;
            if (rows, cols) != e.shape() {
                return Err(CheckpointError::Layout(format!("{what} block {i}: shape {rows}x{cols}, expected {:?}", e.shape())));
            }
            let data = (0..rows * cols).map(|_| get_f64(r)).collect::<std::io::Result<Vec<_>>>()?;
            Ok(Matrix::from_vec(rows, cols, data))
        })
        .collect()
}

pub fn write_state(state: &ModelState, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, FORMAT_VERSION)?;
    let config = serde_json::to_vec(&state.config)?;
    put_u32(w, config.len() as u32)?;
    w.write_all(&config)?;
    put_u64(w, state.feature_dim as u64)?;
    put_blocks(w, state.params.values())?;
    put_blocks(w, &state.adam.m)?;
    put_blocks(w, &state.adam.v)?;
    put_u64(w, state.adam.step)?;
    let a = &state.anneal;
    for v in [a.temperature, a.initial, a.decay, a.floor] {
        put_f64(w, v)?;
    }
    put_u64(w, a.step)?;
    w.write_all(&[match a.mode {
        SelectMode::Sample => 0,
        SelectMode::Argmax => 1,
    }])?;
    put_u64(w, state.epoch)?;
    w.write_all(&state.rng.get_seed())?;
    w.write_all(&state.rng.get_word_pos().to_le_bytes())?;
    put_u64(w, state.rng.get_stream())?;
    Ok(())
}

pub fn read_state(r: &mut impl Read) -> Result<ModelState> {
    if &take::<4>(r)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = get_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = get_u32(r)? as usize;
    let mut config = vec![0u8; len];
    r.read_exact(&mut config)?;
    let config: ModelConfig = serde_json::from_slice(&config)?;
    let feature_dim = get_u64(r)? as usize;
    let mut state = ModelState::new(config, feature_dim)?;

    let values = get_blocks(r, state.params.values(), "params")?;
    for (id, v) in state.params.ids().collect::<Vec<_>>().into_iter().zip(values) {
        *state.params.get_mut(id) = v;
    }
    state.adam.m = get_blocks(r, &state.adam.m, "adam.m")?;
    state.adam.v = get_blocks(r, &state.adam.v, "adam.v")?;
    state.adam.step = get_u64(r)?;
    let temperature = get_f64(r)?;
    let initial = get_f64(r)?;
    let decay = get_f64(r)?;
    let floor = get_f64(r)?;
    let step = get_u64(r)?;
    let mode = match take::<1>(r)?[0] {
        0 => SelectMode::Sample,
        1 => SelectMode::Argmax,
        m => return Err(CheckpointError::Layout(format!("unknown selection mode {m}"))),
    };
    state.anneal = AnnealState {
        temperature,
        initial,
        decay,
        floor,
        step,
        mode,
    };
    state.epoch = get_u64(r)?;
    let seed = take::<32>(r)?;
    let word_pos = u128::from_le_bytes(take::<16>(r)?);
    let stream = get_u64(r)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Layout("trailing bytes".into()));
    }
    Ok(state)
}

pub fn save(state: &ModelState, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_state(state, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelState> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_state(&mut r)
}

//! Checkpoint file format.
//!
//! Layout: magic `VLTC`, format version u32, length-prefixed resolved
//! configuration text, tensor count u32, then per tensor: name length u16 +
//! name bytes, rank u8, one u32 per dimension, and the values as 64-bit
//! little-endian floats. An optional trailing optimizer block carries the
//! AdamW step counter, hyperparameters, and first/second moments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, VoltError};
use crate::optim::{AdamWConfig, AdamWState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VLTC";
pub const FORMAT_VERSION: u32 = 1;

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(VoltError::shape("tensor rank too large for checkpoint"));
    }
    w.write_all(&[t.rank() as u8])?;
    for &dim in t.shape() {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut dim = [0u8; 4];
        r.read_exact(&mut dim)?;
        shape.push(u32::from_le_bytes(dim) as usize);
    }
    let len: usize = shape.iter().product();
    let mut buf = vec![0u8; len * 8];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

fn write_name(w: &mut impl Write, name: &str) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(VoltError::config("parameter name too long for checkpoint"));
    }
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_name(r: &mut impl Read) -> Result<String> {
    let mut len = [0u8; 2];
    r.read_exact(&mut len)?;
    let mut bytes = vec![0u8; u16::from_le_bytes(len) as usize];
    r.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|_| VoltError::data("parameter name is not utf-8"))
}

pub fn save_checkpoint(
    path: &Path,
    config_text: &str,
    params: &ParamStore,
    optimizer: Option<&AdamWState>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let cfg = config_text.as_bytes();
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, entry) in params.iter() {
        write_name(&mut w, name)?;
        write_tensor(&mut w, &entry.tensor)?;
    }
    match optimizer {
        Some(state) => {
            w.write_all(&[1u8])?;
            w.write_all(&state.step.to_le_bytes())?;
            for v in [
                state.config.lr,
                state.config.beta1,
                state.config.beta2,
                state.config.eps,
                state.config.weight_decay,
            ] {
                w.write_all(&v.to_le_bytes())?;
            }
            let entries: Vec<_> = state.moment_entries().collect();
            w.write_all(&(entries.len() as u32).to_le_bytes())?;
            for (name, m, v) in entries {
                write_name(&mut w, name)?;
                write_tensor(&mut w, m)?;
                write_tensor(&mut w, v)?;
            }
        }
        None => w.write_all(&[0u8])?,
    }
    w.flush()?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub format: u32,
    pub config_text: String,
    /// (name, tensor) in file order; trainability is reassigned by the
    /// model's parameter manifest on reconstruction.
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamWState>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(VoltError::data("not a checkpoint file (bad magic)"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let format = u32::from_le_bytes(word);
    if format != FORMAT_VERSION {
        return Err(VoltError::data(format!(
            "unsupported checkpoint format {format}"
        )));
    }
    r.read_exact(&mut word)?;
    let cfg_len = u32::from_le_bytes(word) as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let config_text =
        String::from_utf8(cfg_bytes).map_err(|_| VoltError::data("config block is not utf-8"))?;

    r.read_exact(&mut word)?;
    let count = u32::from_le_bytes(word) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_name(&mut r)?;
        let tensor = read_tensor(&mut r)?;
        tensors.push((name, tensor));
    }

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let optimizer = if flag[0] == 1 {
        let mut step_bytes = [0u8; 8];
        r.read_exact(&mut step_bytes)?;
        let step = u64::from_le_bytes(step_bytes);
        let mut hyper = [0f64; 5];
        for h in &mut hyper {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            *h = f64::from_le_bytes(buf);
        }
        let mut state = AdamWState::new(AdamWConfig {
            lr: hyper[0],
            beta1: hyper[1],
            beta2: hyper[2],
            eps: hyper[3],
            weight_decay: hyper[4],
        });
        state.step = step;
        r.read_exact(&mut word)?;
        let n = u32::from_le_bytes(word) as usize;
        for _ in 0..n {
            let name = read_name(&mut r)?;
            let m = read_tensor(&mut r)?;
            let v = read_tensor(&mut r)?;
            state.restore_moments(&name, m, v);
        }
        Some(state)
    } else {
        None
    };

    Ok(LoadedCheckpoint {
        format,
        config_text,
        tensors,
        optimizer,
    })
}

//! Versioned binary checkpoints with a JSON sidecar.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, Normalization};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PIAUGNN\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
    pub epoch: usize,
    pub mode: String,
    pub lambda_pi: f64,
    pub num_params: usize,
    pub tool_version: String,
    pub checkpoint_version: u32,
}

/// Adaptive-moment optimizer state, stored so training can resume.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Architecture {
    config: ModelConfig,
    norm: Normalization,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 8 * n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated weight block".into()))?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn write_checkpoint<W: Write>(
    w: &mut W,
    params: &ModelParams,
    opt: Option<&OptimizerState>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    let arch = serde_json::to_vec(&Architecture { config: params.config, norm: params.norm })?;
    put_u32(w, arch.len() as u32)?;
    w.write_all(&arch)?;
    put_u32(w, params.layers.len() as u32)?;
    for l in &params.layers {
        put_u32(w, l.out as u32)?;
        put_u32(w, l.inp as u32)?;
    }
    put_f64s(w, &params.flat())?;
    match opt {
        Some(o) => {
            w.write_all(&[1])?;
            w.write_all(&o.step.to_le_bytes())?;
            put_f64s(w, &o.m)?;
            put_f64s(w, &o.v)?;
        }
        None => w.write_all(&[0])?,
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(ModelParams, Option<OptimizerState>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint".into()));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unknown checkpoint version {version}")));
    }
    let n = get_u32(r)? as usize;
    let mut arch = vec![0u8; n];
    r.read_exact(&mut arch)?;
    let arch: Architecture =
        serde_json::from_slice(&arch).map_err(|e| Error::Checkpoint(format!("bad architecture: {e}")))?;
    arch.config.validate()?;
    let mut params = ModelParams::zeros(arch.config);
    params.norm = arch.norm;
    let n_layers = get_u32(r)? as usize;
    if n_layers != params.layers.len() {
        return Err(Error::Checkpoint(format!("{n_layers} layers, expected {}", params.layers.len())));
    }
    for l in &params.layers {
        let (out, inp) = (get_u32(r)? as usize, get_u32(r)? as usize);
        if (out, inp) != (l.out, l.inp) {
            return Err(Error::Checkpoint(format!(
                "layer shape {out}x{inp} does not match {}x{}",
                l.out, l.inp
            )));
        }
    }
    let flat = get_f64s(r, params.num_params())?;
    params.set_flat(&flat)?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let opt = if flag[0] == 1 {
        let mut step = [0u8; 8];
        r.read_exact(&mut step)?;
        let np = params.num_params();
        Some(OptimizerState { step: u64::from_le_bytes(step), m: get_f64s(r, np)?, v: get_f64s(r, np)? })
    } else {
        None
    };
    Ok((params, opt))
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    opt: Option<&OptimizerState>,
    meta: &CheckpointMeta,
) -> Result<()> {
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_checkpoint(&mut w, params, opt)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<OptimizerState>, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path)?);
    let (params, opt) = read_checkpoint(&mut r)?;
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    if meta.checkpoint_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unknown checkpoint version {}", meta.checkpoint_version)));
    }
    Ok((params, opt, meta))
}

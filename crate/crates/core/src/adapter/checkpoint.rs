//! Checkpoint persistence: a JSON manifest describing tensor names, shapes
//! and offsets next to a little-endian `f64` blob, with a SHA-256 digest of
//! the blob for integrity. Optimizer moments can be included so training
//! resumes bit for bit.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::diffusion::NoiseSchedule;
use crate::{Error, Result};

use super::layers::ParamTensors;
use super::network::{BaseDenoiser, ControlModule, DenoiserConfig};
use super::train::Adam;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob in f64 units.
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
struct SectionEntry {
    name: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
struct OptimizerEntry {
    section: String,
    t: usize,
    /// Offset of the first moment; the second moment follows immediately.
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
struct Manifest {
    version: u32,
    stage: String,
    completed_steps: usize,
    cfg: DenoiserConfig,
    schedule: String,
    sections: Vec<SectionEntry>,
    optimizers: Vec<OptimizerEntry>,
    blob_len: usize,
    blob_sha256: String,
}

/// Everything written into one checkpoint.
pub struct CheckpointData<'a> {
    pub base: &'a BaseDenoiser,
    pub control: Option<&'a ControlModule>,
    pub schedule: &'a NoiseSchedule,
    pub stage: &'a str,
    pub completed_steps: usize,
    pub base_opt: Option<&'a Adam>,
    pub control_opt: Option<&'a Adam>,
}

/// A checkpoint read back from disk.
pub struct LoadedCheckpoint {
    pub base: BaseDenoiser,
    pub control: Option<ControlModule>,
    pub schedule: NoiseSchedule,
    pub stage: String,
    pub completed_steps: usize,
    /// `(t, m, v)` per restored optimizer.
    pub base_opt_state: Option<(usize, Vec<f64>, Vec<f64>)>,
    pub control_opt_state: Option<(usize, Vec<f64>, Vec<f64>)>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

fn push_section(
    blob: &mut Vec<f64>,
    sections: &mut Vec<SectionEntry>,
    name: &str,
    params: &dyn ParamTensors,
) {
    let mut tensors = Vec::new();
    let mut offset = blob.len();
    for (tname, shape) in params.named_shapes() {
        let len: usize = shape.iter().product();
        tensors.push(TensorEntry {
            name: tname,
            shape,
            offset,
            len,
        });
        offset += len;
    }
    blob.extend(params.flatten());
    sections.push(SectionEntry {
        name: name.into(),
        tensors,
    });
}

fn push_optimizer(
    blob: &mut Vec<f64>,
    optimizers: &mut Vec<OptimizerEntry>,
    section: &str,
    opt: &Adam,
) {
    let (t, m, v) = opt.state();
    optimizers.push(OptimizerEntry {
        section: section.into(),
        t,
        offset: blob.len(),
        len: m.len(),
    });
    blob.extend_from_slice(m);
    blob.extend_from_slice(v);
}

fn blob_bytes(blob: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(blob.len() * 8);
    for v in blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn save_checkpoint(stem: &Path, data: &CheckpointData) -> Result<()> {
    let (json_path, bin_path) = paths(stem);
    let mut blob: Vec<f64> = Vec::new();
    let mut sections = Vec::new();
    let mut optimizers = Vec::new();
    push_section(&mut blob, &mut sections, "base", data.base);
    if let Some(control) = data.control {
        push_section(&mut blob, &mut sections, "control", control);
    }
    if let Some(opt) = data.base_opt {
        push_optimizer(&mut blob, &mut optimizers, "base", opt);
    }
    if let Some(opt) = data.control_opt {
        if data.control.is_none() {
            return Err(Error::Checkpoint(
                "control optimizer given without a control section".into(),
            ));
        }
        push_optimizer(&mut blob, &mut optimizers, "control", opt);
    }
    let bytes = blob_bytes(&blob);
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        stage: data.stage.into(),
        completed_steps: data.completed_steps,
        cfg: data.base.cfg,
        schedule: data.schedule.to_json(),
        sections,
        optimizers,
        blob_len: blob.len(),
        blob_sha256: format!("{:x}", Sha256::digest(&bytes)),
    };
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = std::fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&bin_path, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

fn read_blob(path: &Path, expected_len: usize, expected_sha: &str) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len * 8 {
        return Err(Error::Checkpoint(format!(
            "blob holds {} bytes, manifest expects {}",
            bytes.len(),
            expected_len * 8
        )));
    }
    let sha = format!("{:x}", Sha256::digest(&bytes));
    if sha != expected_sha {
        return Err(Error::Checkpoint("blob digest does not match manifest".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn section_slice<'a>(
    blob: &'a [f64],
    section: &SectionEntry,
    expected: &[(String, Vec<usize>)],
) -> Result<Vec<f64>> {
    if section.tensors.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "section {} lists {} tensors, architecture has {}",
            section.name,
            section.tensors.len(),
            expected.len()
        )));
    }
    let mut out = Vec::new();
    for (entry, (name, shape)) in section.tensors.iter().zip(expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match architecture tensor {} {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
        let end = entry.offset + entry.len;
        if entry.len != shape.iter().product::<usize>() || end > blob.len() {
            return Err(Error::Checkpoint(format!("tensor {} extent invalid", entry.name)));
        }
        out.extend_from_slice(&blob[entry.offset..end]);
    }
    Ok(out)
}

fn optimizer_state(
    blob: &[f64],
    optimizers: &[OptimizerEntry],
    section: &str,
    n_params: usize,
) -> Result<Option<(usize, Vec<f64>, Vec<f64>)>> {
    let Some(entry) = optimizers.iter().find(|o| o.section == section) else {
        return Ok(None);
    };
    if entry.len != n_params || entry.offset + 2 * entry.len > blob.len() {
        return Err(Error::Checkpoint(format!(
            "optimizer state for {section} has wrong extent"
        )));
    }
    let m = blob[entry.offset..entry.offset + entry.len].to_vec();
    let v = blob[entry.offset + entry.len..entry.offset + 2 * entry.len].to_vec();
    Ok(Some((entry.t, m, v)))
}

pub fn load_checkpoint(stem: &Path) -> Result<LoadedCheckpoint> {
    use rand::SeedableRng;
    let (json_path, bin_path) = paths(stem);
    let json = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Manifest = serde_json::from_str(&json)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let blob = read_blob(&bin_path, manifest.blob_len, &manifest.blob_sha256)?;
    let schedule = NoiseSchedule::from_json(&manifest.schedule)?;
    // construction seeds do not matter: every parameter is overwritten
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut base = BaseDenoiser::new(&manifest.cfg, &mut rng)?;
    let base_section = manifest
        .sections
        .iter()
        .find(|s| s.name == "base")
        .ok_or_else(|| Error::Checkpoint("missing base section".into()))?;
    base.load_flat(&section_slice(&blob, base_section, &base.named_shapes())?)?;
    let control = match manifest.sections.iter().find(|s| s.name == "control") {
        None => None,
        Some(section) => {
            let mut module = ControlModule::from_base(&base, &mut rng)?;
            module.load_flat(&section_slice(&blob, section, &module.named_shapes())?)?;
            Some(module)
        }
    };
    let base_opt_state = optimizer_state(&blob, &manifest.optimizers, "base", base.n_params())?;
    let control_opt_state = match &control {
        Some(c) => optimizer_state(&blob, &manifest.optimizers, "control", c.n_params())?,
        None => None,
    };
    Ok(LoadedCheckpoint {
        base,
        control,
        schedule,
        stage: manifest.stage,
        completed_steps: manifest.completed_steps,
        base_opt_state,
        control_opt_state,
    })
}

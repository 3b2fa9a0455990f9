//! On-disk containers: model checkpoints (`pasta-ckpt-v1`), trigger files
//! (`pasta-trig-v1`), and the CSV loss log.
//!
//! Both binary containers share one layout: a UTF-8 JSON header, a single
//! NUL separator byte, then the concatenated tensor data as row-major
//! little-endian 32-bit floats in header order. The header names every
//! tensor with its shape, so files are self-describing and the payload
//! length is checkable before any value is read.

use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::Scalar;
use crate::trainer::LossLogRow;
use crate::trigger::{MISConfig, Trigger};
use crate::vit::{tensor_names, tensor_shapes, ModelConfig, ViTParams};

pub const CHECKPOINT_VERSION: &str = "pasta-ckpt-v1";
pub const TRIGGER_VERSION: &str = "pasta-trig-v1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: String,
    config: ModelConfig,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TriggerHeader {
    version: String,
    shape: Vec<usize>,
    low: f64,
    upp: f64,
    seed: u64,
    mis: Option<MISConfig>,
}

fn write_container(header_json: String, blob: &[u8], path: &Path) -> Result<()> {
    let mut bytes = header_json.into_bytes();
    bytes.push(0);
    bytes.extend_from_slice(blob);
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Splits a container into its JSON header and payload bytes.
fn read_container(path: &Path) -> Result<(String, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let nul = bytes
        .iter()
        .position(|&b| b == 0)
        .ok_or_else(|| CoreError::Format(format!("{}: missing header separator", path.display())))?;
    let header = std::str::from_utf8(&bytes[..nul])
        .map_err(|e| CoreError::Format(format!("{}: header not UTF-8: {e}", path.display())))?
        .to_string();
    Ok((header, bytes[nul + 1..].to_vec()))
}

fn floats_to_bytes<F: Scalar>(values: impl Iterator<Item = F>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.extend_from_slice(&(v.to_f64().unwrap() as f32).to_le_bytes());
    }
    out
}

fn bytes_to_floats(bytes: &[u8], path: &Path) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(CoreError::Format(format!(
            "{}: payload length {} not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes the model as a `pasta-ckpt-v1` container, recording the seed the
/// parameters were created from.
pub fn save_checkpoint<F: Scalar>(
    params: &ViTParams<F>,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let config = *params.config();
    let tensors: Vec<TensorEntry> = tensor_names(&config)
        .into_iter()
        .zip(params.tensors())
        .map(|(name, t)| TensorEntry {
            name,
            shape: t.shape().to_vec(),
        })
        .collect();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION.to_string(),
        config,
        seed,
        tensors,
    };
    let blob = floats_to_bytes(
        params
            .tensors()
            .iter()
            .flat_map(|t| t.iter().copied()),
    );
    let json = serde_json::to_string(&header)
        .map_err(|e| CoreError::Format(format!("checkpoint header: {e}")))?;
    write_container(json, &blob, path)
}

/// Reads a `pasta-ckpt-v1` container back into parameters and the recorded
/// seed, validating version, schema, payload length, and finiteness.
pub fn load_checkpoint(path: &Path) -> Result<(ViTParams<f32>, u64)> {
    let (header_json, payload) = read_container(path)?;
    let header: CheckpointHeader = serde_json::from_str(&header_json)
        .map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(CoreError::Format(format!(
            "{}: version {:?}, expected {CHECKPOINT_VERSION:?}",
            path.display(),
            header.version
        )));
    }
    let names = tensor_names(&header.config);
    let shapes = tensor_shapes(&header.config);
    if header.tensors.len() != names.len() {
        return Err(CoreError::Format(format!(
            "{}: {} tensors, schema has {}",
            path.display(),
            header.tensors.len(),
            names.len()
        )));
    }
    for ((entry, name), shape) in header.tensors.iter().zip(&names).zip(&shapes) {
        if entry.name != *name || entry.shape != *shape {
            return Err(CoreError::Format(format!(
                "{}: tensor {:?} {:?} does not match schema {:?} {:?}",
                path.display(),
                entry.name,
                entry.shape,
                name,
                shape
            )));
        }
    }
    let values = bytes_to_floats(&payload, path)?;
    let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if values.len() != expected {
        return Err(CoreError::Format(format!(
            "{}: payload holds {} values, schema needs {expected}",
            path.display(),
            values.len()
        )));
    }
    let mut tensors = Vec::with_capacity(shapes.len());
    let mut offset = 0usize;
    for shape in &shapes {
        let len: usize = shape.iter().product();
        let tensor =
            ArrayD::from_shape_vec(IxDyn(shape), values[offset..offset + len].to_vec())
                .expect("length checked above");
        tensors.push(tensor);
        offset += len;
    }
    let params = ViTParams::from_tensors(header.config, tensors)?;
    params.assert_finite()?;
    Ok((params, header.seed))
}

/// Writes the trigger as a `pasta-trig-v1` container, including the
/// location sampler configuration it was trained with.
pub fn save_trigger<F: Scalar>(
    trigger: &Trigger<F>,
    mis: Option<&MISConfig>,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let header = TriggerHeader {
        version: TRIGGER_VERSION.to_string(),
        shape: trigger.values.shape().to_vec(),
        low: trigger.low.to_f64().unwrap(),
        upp: trigger.upp.to_f64().unwrap(),
        seed,
        mis: mis.cloned(),
    };
    let blob = floats_to_bytes(trigger.values.iter().copied());
    let json = serde_json::to_string(&header)
        .map_err(|e| CoreError::Format(format!("trigger header: {e}")))?;
    write_container(json, &blob, path)
}

/// Reads a `pasta-trig-v1` container back, validating version, shape,
/// payload length, and the trigger's own bound invariants.
pub fn load_trigger(path: &Path) -> Result<(Trigger<f32>, Option<MISConfig>, u64)> {
    let (header_json, payload) = read_container(path)?;
    let header: TriggerHeader = serde_json::from_str(&header_json)
        .map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?;
    if header.version != TRIGGER_VERSION {
        return Err(CoreError::Format(format!(
            "{}: version {:?}, expected {TRIGGER_VERSION:?}",
            path.display(),
            header.version
        )));
    }
    if header.shape.len() != 3 || header.shape[1] != header.shape[2] {
        return Err(CoreError::Format(format!(
            "{}: trigger shape {:?} is not C×p×p",
            path.display(),
            header.shape
        )));
    }
    let values = bytes_to_floats(&payload, path)?;
    let expected: usize = header.shape.iter().product();
    if values.len() != expected {
        return Err(CoreError::Format(format!(
            "{}: payload holds {} values, shape needs {expected}",
            path.display(),
            values.len()
        )));
    }
    let array = Array3::from_shape_vec(
        (header.shape[0], header.shape[1], header.shape[2]),
        values,
    )
    .expect("length checked above");
    let trigger = Trigger::new(array, header.low as f32, header.upp as f32)?;
    Ok((trigger, header.mis, header.seed))
}

/// Writes the training loss log as CSV, one row per optimization pass.
pub fn write_loss_log_csv(rows: &[LossLogRow], path: &Path) -> Result<()> {
    let mut text =
        String::from("epoch,phase,pass,seed,clean,backdoor,visual,attention,aggregate\n");
    for row in rows {
        text.push_str(&format!(
            "{},{},{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
            row.epoch,
            row.phase,
            row.pass,
            row.seed,
            row.report.clean,
            row.report.backdoor,
            row.report.visual,
            row.report.attention,
            row.report.aggregate
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

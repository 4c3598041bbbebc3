//! Model checkpoints: one file holding a single-line JSON manifest (names,
//! shapes, trainable flags, EMA presence, and the configs needed to rebuild
//! the model) followed by the raw little-endian f64 parameter blob in
//! manifest order. EMA shadows, when present, follow the parameters in the
//! same trainable order. The attention mask is regenerated from the config,
//! never stored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::AslConfig;
use crate::labelgraph::Partition;
use crate::model::{MlVptModel, Model, Partitions, VanillaVptModel};
use crate::trainer::{EmaState, TrainMode};

const FORMAT: &str = "mlvpt-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    kind: TrainMode,
    encoder: EncoderConfig,
    asl: AslConfig,
    expert_hidden: usize,
    n_classes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    partitions: Option<(Partition, Partition)>,
    params: Vec<ParamEntry>,
    ema: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    ema_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ema_steps: Option<usize>,
}

/// Serializes the model (and optionally its EMA shadows) to `path`.
pub fn save_model(path: &Path, model: &Model, ema: Option<&EmaState>) -> Result<()> {
    let (kind, encoder, asl, expert_hidden, n_classes, partitions) = match model {
        Model::MlVpt(m) => (
            TrainMode::MlVpt,
            m.cfg.clone(),
            m.asl,
            m.expert_hidden,
            m.n_classes(),
            Some((m.partitions.co.clone(), m.partitions.dc.clone())),
        ),
        Model::Vanilla(m) => (
            TrainMode::VanillaVpt,
            m.cfg.clone(),
            m.asl,
            0,
            m.head.n_classes(),
            None,
        ),
    };
    let params = model.params();
    let manifest = Manifest {
        format: FORMAT.to_string(),
        dtype: "f64-le".to_string(),
        kind,
        encoder,
        asl,
        expert_hidden,
        n_classes,
        partitions,
        params: params
            .iter()
            .map(|p| ParamEntry {
                name: p.name().to_string(),
                shape: p.shape().to_vec(),
                trainable: p.trainable(),
            })
            .collect(),
        ema: ema.is_some(),
        ema_decay: ema.map(|e| e.decay),
        ema_steps: ema.map(|e| e.steps()),
    };

    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    for p in &params {
        for &v in p.value().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    if let Some(e) = ema {
        for (_, shadow) in e.shadows() {
            for &v in shadow.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for init in e.init_values() {
            for &v in init.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array(r: &mut impl Read, shape: &[usize], path: &Path, offset: &mut u64) -> Result<ArrayD<f64>> {
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|_| Error::TruncatedBlob {
        path: path.display().to_string(),
        offset: *offset,
    })?;
    *offset += buf.len() as u64;
    let data: Vec<f64> = buf
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(shape), data).unwrap())
}

/// Rebuilds a model (and its EMA state, when stored) from a checkpoint.
pub fn load_model(path: &Path) -> Result<(Model, Option<EmaState>)> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);

    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        reader.read_exact(&mut byte).map_err(|_| Error::Checkpoint(format!(
            "{}: no manifest line",
            path.display()
        )))?;
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
    }
    let manifest: Manifest = serde_json::from_slice(&header)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format '{}'",
            manifest.format
        )));
    }

    let mut model = match manifest.kind {
        TrainMode::MlVpt => {
            let (co, dc) = manifest.partitions.clone().ok_or_else(|| {
                Error::Checkpoint("ml_vpt checkpoint without partitions".into())
            })?;
            Model::MlVpt(MlVptModel::new(
                &manifest.encoder,
                Partitions { co, dc },
                manifest.asl,
                manifest.expert_hidden,
                0,
            )?)
        }
        TrainMode::VanillaVpt => Model::Vanilla(VanillaVptModel::new(
            &manifest.encoder,
            manifest.n_classes,
            manifest.asl,
            0,
        )?),
    };

    let mut offset = header.len() as u64 + 1;
    {
        let mut params = model.params_mut();
        if params.len() != manifest.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint lists {} parameters, model has {}",
                manifest.params.len(),
                params.len()
            )));
        }
        for (param, entry) in params.iter_mut().zip(&manifest.params) {
            if param.name() != entry.name || param.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: model {} {:?} vs checkpoint {} {:?}",
                    param.name(),
                    param.shape(),
                    entry.name,
                    entry.shape
                )));
            }
            let arr = read_array(&mut reader, &entry.shape, path, &mut offset)?;
            param.value_mut().assign(&arr);
            param.set_trainable(entry.trainable);
        }
    }

    let ema = if manifest.ema {
        let decay = manifest.ema_decay.unwrap_or(0.0);
        let mut state = EmaState::new(&model.params(), decay);
        let mut shadows = Vec::new();
        for entry in manifest.params.iter().filter(|e| e.trainable) {
            shadows.push((entry.name.clone(), read_array(&mut reader, &entry.shape, path, &mut offset)?));
        }
        let mut inits = Vec::new();
        for entry in manifest.params.iter().filter(|e| e.trainable) {
            inits.push(read_array(&mut reader, &entry.shape, path, &mut offset)?);
        }
        state.replace_state(shadows, inits, manifest.ema_steps.unwrap_or(0))?;
        Some(state)
    } else {
        None
    };

    let mut trailing = Vec::new();
    reader.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after blob",
            trailing.len()
        )));
    }

    Ok((model, ema))
}

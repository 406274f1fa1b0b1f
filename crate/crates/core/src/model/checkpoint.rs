//! Checkpoint directories.
//!
//! ```text
//! <dir>/model.txt      arch, classes, width, seed as `key = value`
//! <dir>/manifest.txt   one `name shape offset` line per parameter, e.g.
//!                      `trunk.s2.weight 8x3x3x3 0`
//! <dir>/params.tnsr    every parameter concatenated as a 1-D f32 TNSR blob
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{Arch, FactorizedModel, ModelError, ModelSpec};
use crate::tensor::io::{Payload, Tnsr, TnsrError};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Tnsr { path: PathBuf, source: TnsrError },
    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("checkpoint does not match architecture: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint<T: Scalar>(
    dir: impl AsRef<Path>,
    model: &FactorizedModel<T>,
) -> Result<(), CheckpointError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let spec = model.spec();
    let model_txt = format!(
        "arch = {}\nclasses = {}\nwidth = {}\nseed = {}\n",
        spec.arch, spec.num_classes, spec.width, spec.seed
    );
    let path = dir.join("model.txt");
    fs::write(&path, model_txt).map_err(io_err(&path))?;

    let mut manifest = String::new();
    let mut blob: Vec<f32> = Vec::with_capacity(model.params.count());
    for p in model.params.iter() {
        let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{} {} {}\n", p.name, shape.join("x"), blob.len()));
        blob.extend(p.value.data().iter().map(|v| v.as_f64() as f32));
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(io_err(&path))?;
    let path = dir.join("params.tnsr");
    Tnsr::f32([blob.len()], blob).save(&path).map_err(io_err(&path))
}

fn read_model_spec(dir: &Path) -> Result<ModelSpec, CheckpointError> {
    let path = dir.join("model.txt");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let bad = |line: usize, msg: String| CheckpointError::Manifest {
        path: path.clone(),
        line,
        msg,
    };
    let (mut arch, mut classes, mut width, mut seed) = (None, None, None, None);
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(i + 1, format!("expected key = value, got {line:?}")))?;
        let v = v.trim();
        let num = |v: &str| v.parse::<u64>().map_err(|e| bad(i + 1, e.to_string()));
        match k.trim() {
            "arch" => arch = Some(v.parse::<Arch>()?),
            "classes" => classes = Some(num(v)? as usize),
            "width" => width = Some(num(v)? as usize),
            "seed" => seed = Some(num(v)?),
            other => return Err(bad(i + 1, format!("unknown key {other:?}"))),
        }
    }
    match (arch, classes, width, seed) {
        (Some(arch), Some(num_classes), Some(width), Some(seed)) => Ok(ModelSpec {
            arch,
            num_classes,
            width,
            seed,
        }),
        _ => Err(bad(0, "missing arch/classes/width/seed".into())),
    }
}

/// Loads parameters into an already-constructed model, validating every
/// name and shape against it.
pub fn load_params_into<T: Scalar>(
    dir: impl AsRef<Path>,
    model: &mut FactorizedModel<T>,
) -> Result<(), CheckpointError> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&path).map_err(io_err(&path))?;
    let blob_path = dir.join("params.tnsr");
    let blob = Tnsr::load(&blob_path).map_err(|source| CheckpointError::Tnsr {
        path: blob_path.clone(),
        source,
    })?;
    let Payload::F32(blob) = blob.payload else {
        return Err(CheckpointError::Mismatch("params.tnsr is not f32".into()));
    };

    let entries: Vec<&str> = manifest.lines().filter(|l| !l.trim().is_empty()).collect();
    if entries.len() != model.params.len() {
        return Err(CheckpointError::Mismatch(format!(
            "manifest has {} parameters, architecture has {}",
            entries.len(),
            model.params.len()
        )));
    }
    let mut values = Vec::with_capacity(entries.len());
    for (i, (line, p)) in entries.iter().zip(model.params.iter()).enumerate() {
        let bad = |msg: String| CheckpointError::Manifest {
            path: path.clone(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, offset] = fields[..] else {
            return Err(bad(format!("expected `name shape offset`, got {line:?}")));
        };
        let shape: Vec<usize> = shape
            .split('x')
            .map(|d| d.parse().map_err(|_| bad(format!("bad shape {shape:?}"))))
            .collect::<Result<_, _>>()?;
        let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset {offset:?}")))?;
        if name != p.name || shape != p.value.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "entry {name} {shape:?} does not match {} {:?}",
                p.name,
                p.value.shape()
            )));
        }
        let len: usize = shape.iter().product();
        let slice = blob.get(offset..offset + len).ok_or_else(|| {
            CheckpointError::Mismatch(format!("{name}: offset {offset}+{len} beyond blob"))
        })?;
        values.push(
            Tensor::from_vec(
                shape,
                slice.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
            )
            .map_err(ModelError::from)?,
        );
    }
    model.params.set_tensors(values)?;
    Ok(())
}

/// Reconstructs a model from `model.txt` and loads its parameters.
pub fn load_checkpoint<T: Scalar>(
    dir: impl AsRef<Path>,
) -> Result<FactorizedModel<T>, CheckpointError> {
    let dir = dir.as_ref();
    let spec = read_model_spec(dir)?;
    let mut model = FactorizedModel::new(spec)?;
    load_params_into(dir, &mut model)?;
    Ok(model)
}

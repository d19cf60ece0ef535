//! Model persistence: a directory holding `manifest.json` (configuration,
//! architecture, head order and tensor table) and `params.bin` (every tensor
//! in table order, each with a little-endian shape header).

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{build_model_with_arch, Model, RmglConfig};
use crate::receptive::ArchSpec;
use crate::rng::stream;
use crate::tensor::{Shape, Tensor};
use crate::{Error, Result};

pub const FORMAT: &str = "rmgl-checkpoint-1";
pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: RmglConfig,
    /// Backbone in the `.arch` text format.
    pub arch: String,
    /// Feature order of the concatenated embedding.
    pub heads: Vec<String>,
    pub feature_len: usize,
    pub tensors: Vec<TensorEntry>,
}

fn buffer_names(model: &Model) -> Vec<String> {
    (0..model.buffers().len()).map(|i| format!("buffer.{i}")).collect()
}

pub fn save(model: &Model, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors: Vec<&Tensor> = model.params().into_iter().chain(model.buffers()).collect();
    let names = model.param_names().into_iter().chain(buffer_names(model));
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        config: model.config().clone(),
        arch: model.arch().to_text(),
        heads: model.head_keys().iter().map(ToString::to_string).collect(),
        feature_len: model.feature_len(),
        tensors: names
            .zip(&tensors)
            .map(|(name, t)| TensorEntry { name, shape: t.shape() })
            .collect(),
    };
    let mpath = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let ppath = dir.join(PARAMS);
    let file = std::fs::File::create(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let mut w = BufWriter::new(file);
    for t in tensors {
        t.write_to(&mut w).map_err(|e| Error::io(&ppath, e))?;
    }
    w.flush().map_err(|e| Error::io(&ppath, e))
}

pub fn load_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if m.format != FORMAT {
        return Err(Error::Format(format!("unsupported checkpoint format {:?}", m.format)));
    }
    Ok(m)
}

pub fn load(dir: &Path) -> Result<Model> {
    let m = load_manifest(dir)?;
    let arch = ArchSpec::parse(&m.arch, &dir.join(MANIFEST).display().to_string())?;
    let mut model = build_model_with_arch(&m.config, arch, &mut stream(0, 0))?;
    let ppath = dir.join(PARAMS);
    let file = std::fs::File::open(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let mut r = BufReader::new(file);
    let names: Vec<String> = model.param_names().into_iter().chain(buffer_names(&model)).collect();
    if names.len() != m.tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} tensors, model has {}",
            m.tensors.len(),
            names.len()
        )));
    }
    let mut loaded = Vec::with_capacity(m.tensors.len());
    for entry in &m.tensors {
        let t = Tensor::read_from(&mut r).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {}: {msg}", ppath.display(), entry.name)),
            e => e,
        })?;
        loaded.push(t);
    }
    let shapes: Vec<Shape> = model
        .params()
        .into_iter()
        .chain(model.buffers())
        .map(Tensor::shape)
        .collect();
    for (((t, entry), name), shape) in loaded.iter().zip(&m.tensors).zip(&names).zip(&shapes) {
        if entry.name != *name || t.shape() != *shape || entry.shape != *shape {
            return Err(Error::Format(format!(
                "tensor {} ({}) does not match model tensor {name} ({shape})",
                entry.name,
                t.shape()
            )));
        }
    }
    let mut loaded = loaded.into_iter();
    for slot in model.params_mut() {
        *slot = loaded.next().expect("counted");
    }
    for slot in model.buffers_mut() {
        *slot = loaded.next().expect("counted");
    }
    Ok(model)
}

//! Model directories: `model.json` holds the architecture, `params/` one
//! AFTN file per parameter tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::conditional::{ConditionalArch, ConditionalFlowModel};
use super::model::{FlowArch, FlowModel};
use crate::diff::{aftn, ParameterStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelArch {
    Flow { arch: FlowArch },
    Conditional { arch: ConditionalArch },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescriptor {
    pub name: String,
    pub seed: u64,
    pub model: ModelArch,
}

const DESCRIPTOR: &str = "model.json";

/// Writes every tensor of `store` to `dir/<name>.aftn`.
pub fn save_params<S: Scalar>(dir: &Path, store: &ParameterStore<S>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, t) in store.iter() {
        aftn::write(&dir.join(format!("{name}.aftn")), t)?;
    }
    Ok(())
}

/// Overwrites every tensor of `store` from `dir`; shapes must match.
pub fn load_params<S: Scalar>(dir: &Path, store: &mut ParameterStore<S>) -> Result<()> {
    for name in store.names() {
        let path = dir.join(format!("{name}.aftn"));
        let t = aftn::read::<S>(&path)?;
        let want = store.get(&name).expect("listed").shape().to_vec();
        if t.shape() != want.as_slice() {
            return Err(Error::Ingest {
                file: path,
                detail: format!("shape {:?}, expected {want:?}", t.shape()),
            });
        }
        store.set(&name, t.data())?;
    }
    Ok(())
}

fn write_descriptor(dir: &Path, d: &ModelDescriptor) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(DESCRIPTOR), serde_json::to_string_pretty(d)?)?;
    Ok(())
}

pub fn read_descriptor(dir: &Path) -> Result<ModelDescriptor> {
    let path = dir.join(DESCRIPTOR);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Ingest {
        file: path.clone(),
        detail: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Ingest {
        file: path,
        detail: e.to_string(),
    })
}

pub fn save_flow<S: Scalar>(dir: &Path, model: &FlowModel<S>) -> Result<()> {
    write_descriptor(
        dir,
        &ModelDescriptor {
            name: model.name().to_string(),
            seed: model.params().seed(),
            model: ModelArch::Flow {
                arch: model.arch().clone(),
            },
        },
    )?;
    save_params(&dir.join("params"), model.params())
}

pub fn load_flow<S: Scalar>(dir: &Path) -> Result<FlowModel<S>> {
    let d = read_descriptor(dir)?;
    let ModelArch::Flow { arch } = d.model else {
        return Err(Error::config(format!("{} holds a conditional model", dir.display())));
    };
    let mut m = FlowModel::new(arch, &d.name, d.seed)?;
    load_params(&dir.join("params"), m.params_mut())?;
    Ok(m)
}

pub fn save_conditional<S: Scalar>(dir: &Path, model: &ConditionalFlowModel<S>) -> Result<()> {
    write_descriptor(
        dir,
        &ModelDescriptor {
            name: model.name().to_string(),
            seed: model.params().seed(),
            model: ModelArch::Conditional { arch: model.arch() },
        },
    )?;
    save_params(&dir.join("params"), model.params())
}

pub fn load_conditional<S: Scalar>(dir: &Path) -> Result<ConditionalFlowModel<S>> {
    let d = read_descriptor(dir)?;
    let ModelArch::Conditional { arch } = d.model else {
        return Err(Error::config(format!("{} holds an unconditional model", dir.display())));
    };
    let mut m = ConditionalFlowModel::new(arch, &d.name, d.seed)?;
    load_params(&dir.join("params"), m.params_mut())?;
    Ok(m)
}

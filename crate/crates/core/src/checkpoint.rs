//! Model checkpoints in the container format.

use std::path::Path;

use serde_json::json;

use crate::container::{ArrayData, Container, NamedArray};
use crate::error::{Error, Result};
use crate::nn::{Architecture, Model, ModelState, NamedTensor, OptimizerState};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MODEL_KIND: &str = "model";

fn push<T: Real>(arrays: &mut Vec<NamedArray>, name: String, shape: Vec<usize>, data: &[T]) {
    arrays.push(NamedArray {
        name,
        shape,
        data: ArrayData::from_real(data.to_vec()),
    });
}

pub fn model_to_container<T: Real>(model: &Model<T>, seed: u64) -> Result<Container> {
    let mut arrays = Vec::new();
    for p in &model.state.params {
        push(&mut arrays, format!("param/{}", p.name), p.tensor.shape().to_vec(), p.tensor.data());
    }
    let (opt_kind, step) = match &model.state.optimizer {
        None => ("none", 0),
        Some(OptimizerState::SgdMomentum { buffers }) => {
            for (p, b) in model.state.params.iter().zip(buffers) {
                push(&mut arrays, format!("opt/buf/{}", p.name), p.tensor.shape().to_vec(), b);
            }
            ("sgd_momentum", 0)
        }
        Some(OptimizerState::Adam { m, v, step }) => {
            for ((p, mi), vi) in model.state.params.iter().zip(m).zip(v) {
                push(&mut arrays, format!("opt/m/{}", p.name), p.tensor.shape().to_vec(), mi);
                push(&mut arrays, format!("opt/v/{}", p.name), p.tensor.shape().to_vec(), vi);
            }
            ("adam", *step)
        }
    };
    Ok(Container {
        kind: MODEL_KIND.into(),
        meta: json!({
            "architecture": model.arch,
            "seed": seed,
            "dtype": T::DTYPE,
            "optimizer": opt_kind,
            "optimizer_step": step,
        }),
        arrays,
    })
}

fn tensor_of<T: Real>(c: &Container, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
    let a = c.array(name)?;
    if a.shape != shape {
        return Err(Error::shape("checkpoint entry", shape, &a.shape));
    }
    Tensor::new(a.shape.clone(), a.data.to_real()?)
}

/// Rebuilds a model, checking every entry against the stored architecture.
pub fn model_from_container<T: Real>(c: &Container) -> Result<(Model<T>, u64)> {
    if c.kind != MODEL_KIND {
        return Err(Error::Data(format!("expected a model container, found kind {:?}", c.kind)));
    }
    let field = |k: &str| c.meta.get(k).ok_or_else(|| Error::Data(format!("checkpoint manifest lacks {k:?}")));
    let arch: Architecture =
        serde_json::from_value(field("architecture")?.clone()).map_err(|e| Error::Data(e.to_string()))?;
    arch.validate()?;
    let seed = field("seed")?.as_u64().ok_or_else(|| Error::Data("checkpoint seed is not an integer".into()))?;
    let specs = arch.param_specs();
    let mut params = Vec::with_capacity(specs.len());
    for s in &specs {
        params.push(NamedTensor {
            name: s.name.clone(),
            tensor: tensor_of(c, &format!("param/{}", s.name), &s.shape)?,
        });
    }
    let slots = |prefix: &str| -> Result<Vec<Vec<T>>> {
        specs
            .iter()
            .map(|s| Ok(tensor_of::<T>(c, &format!("opt/{prefix}/{}", s.name), &s.shape)?.into_data()))
            .collect()
    };
    let optimizer = match field("optimizer")?.as_str() {
        Some("none") => None,
        Some("sgd_momentum") => Some(OptimizerState::SgdMomentum { buffers: slots("buf")? }),
        Some("adam") => Some(OptimizerState::Adam {
            m: slots("m")?,
            v: slots("v")?,
            step: field("optimizer_step")?
                .as_u64()
                .ok_or_else(|| Error::Data("adam step is not an integer".into()))?,
        }),
        other => return Err(Error::Data(format!("unknown optimizer kind {other:?}"))),
    };
    Ok((
        Model {
            arch,
            state: ModelState { params, optimizer },
        },
        seed,
    ))
}

pub fn save_model<T: Real>(model: &Model<T>, seed: u64, dir: &Path, stem: &str) -> Result<String> {
    model_to_container(model, seed)?.write(dir, stem)
}

pub fn load_model<T: Real>(dir: &Path, stem: &str) -> Result<(Model<T>, u64)> {
    model_from_container(&Container::read(dir, stem)?)
}

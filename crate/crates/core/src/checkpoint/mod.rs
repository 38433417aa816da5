//! Checkpoint configuration, the on-disk tensor container and toy teacher
//! generation.

mod config;
mod container;

use std::path::Path;

use serde_json::json;

pub use config::TransformerConfig;
pub use container::{TensorContainer, TensorEntry};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::teacher::TeacherCheckpoint;

pub const TEACHER_KIND: &str = "teacher";

/// Deterministic random teacher. Weights are drawn from ChaCha8 seeded with
/// `seed` in parameter-name order: projections `U(±1/sqrt(fan_in))`,
/// embeddings `U(±1)`, norm gains 1.
pub fn gen_toy_teacher<T: Scalar>(config: &TransformerConfig, seed: u64) -> Result<TeacherCheckpoint<T>> {
    let mut ckpt = TeacherCheckpoint::<T>::zeros(config)?;
    let mut rng = SeededRng::new(seed);
    for (name, t) in ckpt.tensors_mut() {
        if name.ends_with("norm") {
            continue;
        }
        let scale = if name == "embed" {
            1.0
        } else {
            1.0 / (t.cols() as f64).sqrt()
        };
        *t = rng.uniform_tensor(t.shape(), scale);
    }
    Ok(ckpt)
}

pub fn save_teacher<T: Scalar>(ckpt: &TeacherCheckpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    ckpt.validate()?;
    let meta = json!({ "kind": TEACHER_KIND, "config": ckpt.config });
    TensorContainer::from_params(meta, ckpt).write(path)
}

/// Loads a teacher, returning warnings about tensors that were ignored.
pub fn load_teacher<T: Scalar>(path: impl AsRef<Path>) -> Result<(TeacherCheckpoint<T>, Vec<String>)> {
    let c = TensorContainer::read(path)?;
    teacher_from_container(&c)
}

pub fn teacher_from_container<T: Scalar>(c: &TensorContainer) -> Result<(TeacherCheckpoint<T>, Vec<String>)> {
    let kind = c.metadata.get("kind").and_then(|k| k.as_str());
    if kind != Some(TEACHER_KIND) {
        return Err(Error::Format(format!("expected a teacher checkpoint, found kind {kind:?}")));
    }
    let config: TransformerConfig = serde_json::from_value(
        c.metadata
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Format("teacher metadata lacks config".into()))?,
    )?;
    let mut ckpt = TeacherCheckpoint::zeros(&config)?;
    let warnings = c.load_into(&mut ckpt)?;
    Ok((ckpt, warnings))
}

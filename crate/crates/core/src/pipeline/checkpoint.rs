use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mvt;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::RunConfig;
use super::model::{MvadModel, Teacher};

pub const CHECKPOINT_FORMAT: &str = "mvad-checkpoint-1";
pub const CHECKPOINT_MANIFEST: &str = "manifest.txt";

fn shape_str(s: &[usize]) -> String {
    s.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Writes every teacher and student tensor as `{name}.mvt` plus a key=value manifest.
pub fn save_checkpoint<T: Scalar>(dir: &Path, model: &MvadModel<T>, run: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = vec![
        format!("format={CHECKPOINT_FORMAT}"),
        format!("seed={}", run.seed),
        format!("config_hash={}", run.hash()),
        format!("config={}", run.to_json()),
    ];
    let mut tensors: Vec<(String, Tensor<T>)> =
        model.teacher.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    model.student.visit_named(&mut |n, p, _| tensors.push((format!("student.{n}"), p.tensor.clone())));
    for (name, t) in &tensors {
        mvt::save(&dir.join(format!("{name}.mvt")), t)?;
        lines.push(format!("tensor.{name}={}", shape_str(t.shape())));
    }
    let path = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&path, lines.join("\n") + "\n").map_err(|e| Error::io(&path, e))
}

fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let map: BTreeMap<String, String> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("{}: malformed line {l:?}", path.display())))
        })
        .collect::<Result<_>>()?;
    if map.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(Error::Compatibility(format!("{} is not a {CHECKPOINT_FORMAT} checkpoint", dir.display())));
    }
    Ok(map)
}

fn load_into<T: Scalar>(dir: &Path, name: &str, target: &mut Tensor<T>, manifest: &BTreeMap<String, String>) -> Result<()> {
    let expected = shape_str(target.shape());
    match manifest.get(&format!("tensor.{name}")) {
        Some(s) if *s == expected => {}
        Some(s) => {
            return Err(Error::Compatibility(format!("{name}: checkpoint shape [{s}], model expects [{expected}]")))
        }
        None => return Err(Error::Compatibility(format!("checkpoint lacks tensor {name}"))),
    }
    let t: Tensor<T> = mvt::load(&dir.join(format!("{name}.mvt")))?;
    if t.shape() != target.shape() {
        return Err(Error::Compatibility(format!("{name}: file shape {:?} disagrees with manifest", t.shape())));
    }
    *target = t;
    Ok(())
}

/// Rebuilds the model described by the manifest and fills in its tensors.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(MvadModel<T>, RunConfig)> {
    let manifest = read_manifest(dir)?;
    let config_json = manifest
        .get("config")
        .ok_or_else(|| Error::Format("checkpoint manifest lacks config".into()))?;
    let run: RunConfig = serde_json::from_str(config_json).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    if manifest.get("config_hash") != Some(&run.hash()) {
        return Err(Error::Compatibility("checkpoint config hash does not match its config".into()));
    }
    let mut model = MvadModel::<T>::new(run.model.clone(), run.seed)?;
    load_teacher_into(dir, &mut model.teacher, &manifest)?;
    let mut names = Vec::new();
    model.student.visit_named(&mut |n, _, _| names.push(format!("student.{n}")));
    let mut i = 0;
    let mut result = Ok(());
    model.student.visit_mut(&mut |p, _| {
        if result.is_ok() {
            result = load_into(dir, &names[i], &mut p.tensor, &manifest);
        }
        i += 1;
    });
    result?;
    Ok((model, run))
}

fn load_teacher_into<T: Scalar>(dir: &Path, teacher: &mut Teacher<T>, manifest: &BTreeMap<String, String>) -> Result<()> {
    for (name, t) in teacher.named_mut() {
        load_into(dir, &name, t, manifest)?;
    }
    Ok(())
}

/// Replaces teacher weights with externally supplied MVT1 tensors.
///
/// `dir` holds one `{name}.mvt` per entry of [`Teacher::named`]; shapes must match.
pub fn load_teacher_weights<T: Scalar>(dir: &Path, teacher: &mut Teacher<T>) -> Result<()> {
    for (name, t) in teacher.named_mut() {
        let loaded: Tensor<T> = mvt::load(&dir.join(format!("{name}.mvt")))?;
        if loaded.shape() != t.shape() {
            return Err(Error::Compatibility(format!(
                "{name}: supplied shape {:?}, teacher expects {:?}",
                loaded.shape(),
                t.shape()
            )));
        }
        *t = loaded;
    }
    Ok(())
}

//! Model checkpoints: a directory holding `manifest.txt` (schema, layer shapes,
//! tensor listing, payload digest) and `tensors.bin`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::residual::ResidualUnit;
use super::tensorfile::{self, embedder_from_tensors, embedder_tensors, Tensor};
use super::{DeepCrossingModel, NnError};
use crate::data::parse_schema;

const FORMAT: &str = "def-checkpoint 1";

pub fn save_checkpoint(model: &DeepCrossingModel, dir: &Path) -> Result<(), NnError> {
    fs::create_dir_all(dir)?;
    let mut tensors = embedder_tensors(&model.embedder);
    for (k, u) in model.residuals.iter().enumerate() {
        tensors.push(Tensor::new(format!("res.{k}.w1"), u.h, u.d, u.w1.clone()));
        tensors.push(Tensor::new(format!("res.{k}.b1"), 1, u.h, u.b1.clone()));
        tensors.push(Tensor::new(format!("res.{k}.w2"), u.d, u.h, u.w2.clone()));
        tensors.push(Tensor::new(format!("res.{k}.b2"), 1, u.d, u.b2.clone()));
    }
    tensors.push(Tensor::new("score.w", 1, model.score_w.len(), model.score_w.clone()));
    tensors.push(Tensor::new("score.b", 1, 1, vec![model.score_b]));
    let payload = tensorfile::encode(&tensors);

    let mut manifest = format!("{FORMAT}\n");
    for line in model.embedder.schema().to_text().lines() {
        manifest.push_str(&format!("group {line}\n"));
    }
    for u in &model.residuals {
        manifest.push_str(&format!("residual {} {}\n", u.d, u.h));
    }
    for t in &tensors {
        manifest.push_str(&format!("tensor {} {} {}\n", t.name, t.rows, t.cols));
    }
    manifest.push_str(&format!("payload-sha256 {}\n", hex::encode(Sha256::digest(&payload))));
    fs::write(dir.join("tensors.bin"), &payload)?;
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<DeepCrossingModel, NnError> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let payload = fs::read(dir.join("tensors.bin"))?;
    let mut lines = manifest.lines();
    if lines.next() != Some(FORMAT) {
        return Err(NnError::Checkpoint(format!("not a {FORMAT} manifest")));
    }
    let mut schema_text = String::new();
    let mut listed = Vec::new();
    let mut n_residual = 0;
    let mut digest = None;
    for line in lines {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "group" => {
                schema_text.push_str(rest);
                schema_text.push('\n');
            }
            "residual" => n_residual += 1,
            "tensor" => listed.push(rest.to_string()),
            "payload-sha256" => digest = Some(rest.to_string()),
            "" => {}
            other => return Err(NnError::Checkpoint(format!("unknown manifest key {other}"))),
        }
    }
    let want = digest.ok_or_else(|| NnError::Checkpoint("manifest lacks payload digest".into()))?;
    if hex::encode(Sha256::digest(&payload)) != want {
        return Err(NnError::Checkpoint("tensors.bin does not match manifest digest".into()));
    }
    let schema = parse_schema(&schema_text).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let tensors = tensorfile::decode(&payload)?;
    let actual: Vec<String> = tensors.iter().map(|t| format!("{} {} {}", t.name, t.rows, t.cols)).collect();
    if actual != listed {
        return Err(NnError::Checkpoint("tensor listing differs from payload".into()));
    }
    let embedder = embedder_from_tensors(schema, &tensors)?;
    let get = |name: String| -> Result<Vec<f64>, NnError> {
        tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.data.clone())
            .ok_or_else(|| NnError::Checkpoint(format!("missing tensor {name}")))
    };
    let mut residuals = Vec::with_capacity(n_residual);
    for k in 0..n_residual {
        residuals.push(ResidualUnit::from_parts(
            get(format!("res.{k}.w1"))?,
            get(format!("res.{k}.b1"))?,
            get(format!("res.{k}.w2"))?,
            get(format!("res.{k}.b2"))?,
        )?);
    }
    let score_w = get("score.w".into())?;
    let score_b = get("score.b".into())?;
    DeepCrossingModel::new(embedder, residuals, score_w, score_b[0])
}

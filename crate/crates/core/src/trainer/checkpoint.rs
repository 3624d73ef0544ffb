//! Projection checkpoints and the loss-history CSV.
//!
//! A checkpoint reuses the embedding matrix layout with magic `RSCP`:
//! the weight matrix rows (ids `w0`..) followed by the bias row (id
//! `bias`), all stored as f32. A JSON sidecar at `<path>.json` carries the
//! step count, current learning rate, and a hash of the trainer config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embeddings::{read_matrix_file, write_matrix_file, CHECKPOINT_MAGIC};
use crate::trainer::{QueryProjection, TrainError, TrainerConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub lr: f64,
    pub config_hash: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

/// Stable hash of the trainer config, for sidecar provenance. The step
/// budget is run control, not a hyperparameter, so it is excluded: a
/// resumed run may extend it.
pub fn config_hash(cfg: &TrainerConfig) -> String {
    let mut cfg = cfg.clone();
    cfg.max_steps = None;
    let json = serde_json::to_string(&cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    projection: &QueryProjection,
    meta: &CheckpointMeta,
) -> Result<(), TrainError> {
    let path = path.as_ref();
    let dim = projection.dim();
    let mut ids: Vec<String> = (0..dim).map(|r| format!("w{r}")).collect();
    ids.push("bias".to_string());
    let mut matrix: Vec<f32> = Vec::with_capacity((dim + 1) * dim);
    matrix.extend(projection.weight().iter().map(|v| *v as f32));
    matrix.extend(projection.bias().iter().map(|v| *v as f32));
    write_matrix_file(path, CHECKPOINT_MAGIC, dim, &ids, &matrix)?;
    let sidecar = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(&sidecar, json).map_err(|source| crate::StoreError::Io {
        path: sidecar.display().to_string(),
        source,
    })?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(QueryProjection, CheckpointMeta), TrainError> {
    let path = path.as_ref();
    let (dim, ids, matrix) = read_matrix_file(path, CHECKPOINT_MAGIC)?;
    if ids.len() != dim + 1 || ids.last().map(String::as_str) != Some("bias") {
        return Err(TrainError::Shape(format!(
            "checkpoint should have {} weight rows plus a bias row",
            dim
        )));
    }
    let weight: Vec<f64> = matrix[..dim * dim].iter().map(|v| f64::from(*v)).collect();
    let bias: Vec<f64> = matrix[dim * dim..].iter().map(|v| f64::from(*v)).collect();
    let projection = QueryProjection::from_parts(dim, weight, bias)?;
    let sidecar = sidecar_path(path);
    let raw = std::fs::read_to_string(&sidecar).map_err(|source| crate::StoreError::Io {
        path: sidecar.display().to_string(),
        source,
    })?;
    let meta: CheckpointMeta =
        serde_json::from_str(&raw).map_err(|e| TrainError::Shape(format!("bad sidecar: {e}")))?;
    Ok((projection, meta))
}

/// One loss-history row.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub split: String,
    pub mode: String,
    pub loss: f64,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,split,mode,loss,lr";

impl LossRow {
    pub fn to_csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.split, self.mode, self.loss, self.lr)
    }
}

/// Append rows, writing the header only when the file is new or empty.
pub fn append_loss_rows(path: impl AsRef<Path>, rows: &[LossRow]) -> Result<(), TrainError> {
    use std::io::Write;
    let path = path.as_ref();
    let exists = path.exists() && std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| crate::StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let mut buf = String::new();
    if !exists {
        buf.push_str(LOSS_CSV_HEADER);
        buf.push('\n');
    }
    for row in rows {
        buf.push_str(&row.to_csv_line());
        buf.push('\n');
    }
    file.write_all(buf.as_bytes()).map_err(|source| crate::StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// Read back the step column, e.g. to check resume continuity.
pub fn read_loss_steps(path: impl AsRef<Path>) -> Result<Vec<u64>, TrainError> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|source| crate::StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut steps = Vec::new();
    for line in raw.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let first = line.split(',').next().unwrap_or_default();
        let step = first
            .parse::<u64>()
            .map_err(|_| TrainError::Shape(format!("bad step field {first:?} in loss csv")))?;
        steps.push(step);
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trips_projection_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proj.rscp");
        let mut projection = QueryProjection::identity(3);
        projection.params_mut().0[1] = 0.25;
        projection.params_mut().1[2] = -0.5;
        let meta = CheckpointMeta {
            step: 42,
            lr: 9e-7,
            config_hash: "abc".into(),
        };
        save_checkpoint(&path, &projection, &meta).unwrap();
        let (back, back_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(back_meta, meta);
        assert_eq!(back.dim(), 3);
        assert_eq!(back.weight()[1], 0.25);
        assert_eq!(back.bias()[2], -0.5);
        assert_eq!(back.weight()[0], 1.0);
    }

    #[test]
    fn loss_csv_appends_with_single_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let row = |step| LossRow {
            step,
            split: "train".into(),
            mode: "kl".into(),
            loss: 0.5,
            lr: 1e-6,
        };
        append_loss_rows(&path, &[row(1), row(2)]).unwrap();
        append_loss_rows(&path, &[row(3)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("step")).count(), 1);
        assert_eq!(read_loss_steps(&path).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = TrainerConfig::default();
        let mut b = TrainerConfig::default();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.top_m = 64;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}

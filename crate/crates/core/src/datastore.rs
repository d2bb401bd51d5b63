//! Dataset, checkpoint and report files.
//!
//! Datasets are a single JSON document (`*.rmbil-data.json`). Checkpoints
//! (`*.rmbil-ckpt`) are an 8-byte magic, a little-endian `u64` header length,
//! a JSON header and a blob of little-endian `f64` parameters. Reports
//! (`*.rmbil-report.json`) are plain JSON. All writes go through a temporary
//! file in the target directory followed by a rename.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::plants::ExpertConfig;

pub const DATASET_EXT: &str = "rmbil-data.json";
pub const CHECKPOINT_EXT: &str = "rmbil-ckpt";
pub const REPORT_EXT: &str = "rmbil-report.json";

pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"RMBILCK1";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("truncated payload: header declares {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("checkpoint holds a {found:?} model, expected {expected:?}")]
    KindMismatch { expected: ModelKind, found: ModelKind },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Writes `bytes` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| DataError::Format(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, DataError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| DataError::Format(format!("{}: {e}", path.display())))
}

/// Per-dimension mean and standard deviation of states and actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

impl NormStats {
    /// Statistics over every state/action row; standard deviations are
    /// floored at `1e-6`.
    pub fn from_trajectories(trajs: &[Trajectory], n: usize, m: usize) -> Self {
        let (state_mean, state_std) = mean_std(trajs.iter().map(|t| t.states.as_slice()), n);
        let (action_mean, action_std) = mean_std(trajs.iter().map(|t| t.actions.as_slice()), m);
        Self {
            state_mean,
            state_std,
            action_mean,
            action_std,
        }
    }
}

fn mean_std<'a>(blocks: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; dim];
    let mut count = 0usize;
    for b in blocks.clone() {
        for row in b.chunks_exact(dim) {
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
            count += 1;
        }
    }
    let denom = count.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / denom).collect();
    let mut var = vec![0.0; dim];
    for b in blocks {
        for row in b.chunks_exact(dim) {
            for ((v, x), mu) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - mu) * (x - mu);
            }
        }
    }
    let std = var.iter().map(|v| (v / denom).sqrt().max(1e-6)).collect();
    (mean, std)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub plant: String,
    pub dt: f64,
    pub n: usize,
    pub m: usize,
    #[serde(rename = "N")]
    pub count: usize,
    #[serde(rename = "T")]
    pub steps: usize,
    pub seed: u64,
    pub expert: ExpertConfig,
    pub norm: NormStats,
    /// Root-mean-square expert tracking error over the whole dataset.
    pub expert_rms: f64,
    pub rms_bound: f64,
    /// Trajectories discarded and redrawn because the expert diverged or
    /// exceeded the RMS bound.
    pub regenerated: usize,
    #[serde(default)]
    pub config: serde_json::Value,
}

/// One demonstration: `steps` states and actions, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub id: usize,
    /// Context: the initial state.
    pub s: Vec<f64>,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub manifest: Manifest,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.manifest.n
    }

    pub fn m(&self) -> usize {
        self.manifest.m
    }

    pub fn steps(&self) -> usize {
        self.manifest.steps
    }

    pub fn state(&self, traj: usize, i: usize) -> &[f64] {
        let n = self.n();
        &self.trajectories[traj].states[i * n..(i + 1) * n]
    }

    pub fn action(&self, traj: usize, i: usize) -> &[f64] {
        let m = self.m();
        &self.trajectories[traj].actions[i * m..(i + 1) * m]
    }

    /// Checks every array against the manifest.
    pub fn validate(&self) -> Result<(), DataError> {
        let mf = &self.manifest;
        if mf.format_version != DATASET_VERSION {
            return Err(DataError::Version {
                found: mf.format_version,
                expected: DATASET_VERSION,
            });
        }
        if !(mf.dt > 0.0) || mf.n == 0 || mf.m == 0 || mf.steps < 2 {
            return Err(DataError::Dimension("manifest needs dt > 0, n, m >= 1, T >= 2".into()));
        }
        if self.trajectories.len() != mf.count {
            return Err(DataError::Dimension(format!(
                "manifest N = {}, found {} trajectories",
                mf.count,
                self.trajectories.len()
            )));
        }
        let stats = [&mf.norm.state_mean, &mf.norm.state_std];
        if stats.iter().any(|v| v.len() != mf.n)
            || mf.norm.action_mean.len() != mf.m
            || mf.norm.action_std.len() != mf.m
        {
            return Err(DataError::Dimension("normalization stats".into()));
        }
        for t in &self.trajectories {
            if t.s.len() != mf.n || t.states.len() != mf.steps * mf.n || t.actions.len() != mf.steps * mf.m {
                return Err(DataError::Dimension(format!("trajectory {}", t.id)));
            }
        }
        Ok(())
    }

    /// The first `k` trajectories with the manifest adjusted; normalization
    /// statistics are recomputed on the subset.
    pub fn subset(&self, k: usize) -> Result<Dataset, DataError> {
        if k == 0 || k > self.trajectories.len() {
            return Err(DataError::Dimension(format!(
                "subset {k} of {} trajectories",
                self.trajectories.len()
            )));
        }
        let trajectories = self.trajectories[..k].to_vec();
        let mut manifest = self.manifest.clone();
        manifest.count = k;
        manifest.norm = NormStats::from_trajectories(&trajectories, manifest.n, manifest.m);
        Ok(Dataset {
            manifest,
            trajectories,
        })
    }
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<(), DataError> {
    data.validate()?;
    save_json(path, data)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| DataError::Format(format!("{}: {e}", path.display())))?;
    let version = value
        .pointer("/manifest/format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| DataError::Format("missing manifest.format_version".into()))?;
    if version != DATASET_VERSION as u64 {
        return Err(DataError::Version {
            found: version as u32,
            expected: DATASET_VERSION,
        });
    }
    let data: Dataset = serde_json::from_value(value).map_err(|e| DataError::Format(e.to_string()))?;
    data.validate()?;
    Ok(data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dyn,
    Ctrl,
    Cvae,
    Bc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    /// Model structure flag, e.g. `affine` or `generic` for dynamics.
    pub structure: String,
    pub tensors: Vec<TensorEntry>,
    pub blob_len: u64,
    /// Last training phase completed (`none` for an untrained model).
    pub phase: String,
    pub final_loss: Option<f64>,
    pub seed: u64,
    /// Normalization statistics and other non-trainable model state.
    #[serde(default)]
    pub extra: serde_json::Value,
    /// Effective configuration that produced the checkpoint.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    /// Builds the header tensor table from named tensors.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: ModelKind,
        structure: &str,
        named: Vec<(String, Tensor)>,
        phase: &str,
        final_loss: Option<f64>,
        seed: u64,
        extra: serde_json::Value,
        config: serde_json::Value,
    ) -> Self {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for (name, t) in named {
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.len() as u64;
            tensors.push(t);
        }
        Self {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                kind,
                structure: structure.to_string(),
                tensors: entries,
                blob_len: offset,
                phase: phase.to_string(),
                final_loss,
                seed,
                extra,
                config,
            },
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.header
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DataError> {
        let header = serde_json::to_vec(&self.header).map_err(|e| DataError::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + header.len() + self.header.blob_len as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(DataError::Format("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let body = &bytes[16..];
        if (body.len() as u64) < hlen {
            return Err(DataError::Truncated {
                expected: hlen,
                found: body.len() as u64,
            });
        }
        let (hbytes, blob) = body.split_at(hlen as usize);
        let value: serde_json::Value = serde_json::from_slice(hbytes).map_err(|e| DataError::Format(e.to_string()))?;
        let version = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0);
        if version != CHECKPOINT_VERSION as u64 {
            return Err(DataError::Version {
                found: version as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: CheckpointHeader = serde_json::from_value(value).map_err(|e| DataError::Format(e.to_string()))?;
        if blob.len() as u64 != header.blob_len {
            return Err(DataError::Truncated {
                expected: header.blob_len,
                found: blob.len() as u64,
            });
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0u64;
        for e in &header.tensors {
            let len: usize = e.shape.iter().product();
            let end = e.offset + 8 * len as u64;
            if e.offset != expected_offset || end > header.blob_len {
                return Err(DataError::Format(format!("tensor {} has inconsistent offset", e.name)));
            }
            expected_offset = end;
            let data = blob[e.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| DataError::Format(err.to_string()))?;
            tensors.push(t);
        }
        if expected_offset != header.blob_len {
            return Err(DataError::Format("blob length does not match tensor table".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<(), DataError> {
        if self.header.kind != kind {
            return Err(DataError::KindMismatch {
                expected: kind,
                found: self.header.kind,
            });
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), DataError> {
    write_atomic(path, &ckpt.to_bytes()?)
}

/// Loads a checkpoint, checking its kind when `expected` is given.
pub fn load_checkpoint(path: &Path, expected: Option<ModelKind>) -> Result<Checkpoint, DataError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    if let Some(kind) = expected {
        ckpt.expect_kind(kind)?;
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plants::ExpertConfig;

    fn tiny_dataset() -> Dataset {
        let trajectories = vec![
            Trajectory {
                id: 0,
                s: vec![0.1],
                states: vec![0.1, 0.2, 1.0 / 3.0],
                actions: vec![1e-300, -2.5, std::f64::consts::PI],
            },
            Trajectory {
                id: 1,
                s: vec![-0.4],
                states: vec![-0.4, -0.1, 0.7],
                actions: vec![0.0, 5e-324, -0.0],
            },
        ];
        let norm = NormStats::from_trajectories(&trajectories, 1, 1);
        Dataset {
            manifest: Manifest {
                format_version: DATASET_VERSION,
                plant: "p1".into(),
                dt: 0.05,
                n: 1,
                m: 1,
                count: 2,
                steps: 3,
                seed: 7,
                expert: ExpertConfig::default(),
                norm,
                expert_rms: 0.01,
                rms_bound: 0.05,
                regenerated: 0,
                config: serde_json::json!({"k": 1}),
            },
            trajectories,
        }
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.rmbil-data.json");
        let b = dir.path().join("b.rmbil-data.json");
        let data = tiny_dataset();
        save_dataset(&a, &data).unwrap();
        let back = load_dataset(&a).unwrap();
        for (x, y) in data.trajectories.iter().zip(&back.trajectories) {
            let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.states), bits(&y.states));
            assert_eq!(bits(&x.actions), bits(&y.actions));
        }
        save_dataset(&b, &back).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn dataset_dimension_mismatch_rejected() {
        let mut data = tiny_dataset();
        data.trajectories[1].states.pop();
        assert!(matches!(data.validate(), Err(DataError::Dimension(_))));
        let mut data = tiny_dataset();
        data.manifest.count = 3;
        assert!(data.validate().is_err());
    }

    #[test]
    fn dataset_version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.rmbil-data.json");
        let mut data = tiny_dataset();
        data.manifest.format_version = 99;
        save_json(&p, &data).unwrap();
        assert!(matches!(load_dataset(&p), Err(DataError::Version { found: 99, .. })));
    }

    fn tiny_ckpt(kind: ModelKind) -> Checkpoint {
        Checkpoint::new(
            kind,
            "affine",
            vec![
                ("w".into(), Tensor::from_rows(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e308])),
                ("b".into(), Tensor::row(&[0.1, 0.2])),
            ],
            "dynamics",
            Some(0.004),
            3,
            serde_json::json!({"mean": [0.0]}),
            serde_json::json!({}),
        )
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.rmbil-ckpt");
        let q = dir.path().join("n.rmbil-ckpt");
        let c = tiny_ckpt(ModelKind::Dyn);
        save_checkpoint(&p, &c).unwrap();
        let back = load_checkpoint(&p, Some(ModelKind::Dyn)).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensors[0].data()[1].to_bits(), (-0.0f64).to_bits());
        save_checkpoint(&q, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
        assert_eq!(back.tensor("b").unwrap().data(), &[0.1, 0.2]);
    }

    #[test]
    fn checkpoint_kind_guard() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.rmbil-ckpt");
        save_checkpoint(&p, &tiny_ckpt(ModelKind::Ctrl)).unwrap();
        let err = load_checkpoint(&p, Some(ModelKind::Dyn)).unwrap_err();
        assert!(matches!(
            err,
            DataError::KindMismatch {
                expected: ModelKind::Dyn,
                found: ModelKind::Ctrl
            }
        ));
    }

    #[test]
    fn truncated_checkpoint_detected() {
        let bytes = tiny_ckpt(ModelKind::Dyn).to_bytes().unwrap();
        for cut in [bytes.len() - 1, bytes.len() - 8, 20, 10] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&longer),
            Err(DataError::Truncated { .. })
        ));
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(DataError::Format(_))));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.rmbil-report.json");
        save_json(&p, &serde_json::json!({"a": 1})).unwrap();
        save_json(&p, &serde_json::json!({"a": 2})).unwrap();
        let v: serde_json::Value = load_json(&p).unwrap();
        assert_eq!(v["a"], 2);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn subset_recomputes_stats() {
        let data = tiny_dataset();
        let sub = data.subset(1).unwrap();
        assert_eq!(sub.manifest.count, 1);
        sub.validate().unwrap();
        assert!((sub.manifest.norm.state_mean[0] - (0.1 + 0.2 + 1.0 / 3.0) / 3.0).abs() < 1e-15);
        assert!(data.subset(3).is_err());
    }
}

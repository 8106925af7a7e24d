//! On-disk checkpoints.
//!
//! A checkpoint is two files. The manifest at `path` is UTF-8 text:
//!
//! ```text
//! barmorph-checkpoint 1
//! step 1200
//! meta model.d_model 64
//! tensor dec.layer0.wq 0 64 64
//! ...
//! ```
//!
//! `meta` lines carry free-form key/value configuration. Each `tensor` line
//! names a tensor, its byte offset into the blob and its dimensions. The
//! blob at `<path>.bin` is the concatenation of all tensors as row-major
//! little-endian IEEE-754 32-bit floats. Optimizer moments are stored as
//! tensors named `adam.m/<param>` and `adam.v/<param>`, with the optimizer
//! step in `meta adam.step`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::{AdamState, ParamStore, Tensor};

const MAGIC: &str = "barmorph-checkpoint 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("checkpoint blob: {0}")]
    Blob(String),
    #[error("checkpoint is missing {0}")]
    Missing(String),
}

/// Parameters, optimizer state and configuration at one training step.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
}

pub fn blob_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn new(step: u64, meta: BTreeMap<String, String>, params: ParamStore, adam: Option<AdamState>) -> Self {
        Checkpoint {
            step,
            meta,
            params,
            adam,
        }
    }

    pub fn meta_value(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::Missing(format!("meta {key}")))
    }

    /// Writes the manifest and blob. Both are written to temporary names
    /// first and renamed into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut manifest = format!("{MAGIC}\nstep {}\n", self.step);
        let mut meta = self.meta.clone();
        if let Some(adam) = &self.adam {
            meta.insert("adam.step".into(), adam.step.to_string());
        }
        for (k, v) in &meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(CheckpointError::Manifest {
                    line: 0,
                    msg: format!("unwritable meta entry {k:?}"),
                });
            }
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut blob: Vec<u8> = Vec::new();
        let mut push = |name: &str, shape: &[usize], data: &[f64], manifest: &mut String| {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("tensor {name} {} {}\n", blob.len(), dims.join(" ")));
            for &v in data {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        };
        for id in self.params.ids() {
            let t = self.params.get(id);
            push(self.params.name(id), t.shape(), t.data(), &mut manifest);
        }
        if let Some(adam) = &self.adam {
            for id in self.params.ids() {
                let name = self.params.name(id);
                let shape = self.params.get(id).shape();
                push(&format!("adam.m/{name}"), shape, &adam.m[id.0], &mut manifest);
                push(&format!("adam.v/{name}"), shape, &adam.v[id.0], &mut manifest);
            }
        }
        let bin = blob_path(path);
        let tmp_manifest = path.with_extension("tmp-manifest");
        let tmp_bin = path.with_extension("tmp-bin");
        fs::write(&tmp_bin, &blob)?;
        fs::write(&tmp_manifest, manifest)?;
        fs::rename(&tmp_bin, &bin)?;
        fs::rename(&tmp_manifest, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path)?;
        let blob = fs::read(blob_path(path))?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => {
                return Err(CheckpointError::Manifest {
                    line: 1,
                    msg: "not a checkpoint manifest".into(),
                })
            }
        }
        let mut step = None;
        let mut meta = BTreeMap::new();
        let mut params = ParamStore::new();
        let mut moments: BTreeMap<String, Tensor> = BTreeMap::new();
        for (i, line) in lines {
            let bad = |msg: String| CheckpointError::Manifest { line: i + 1, msg };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("step") => {
                    step = Some(
                        parts
                            .next()
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| bad("bad step".into()))?,
                    );
                }
                Some("meta") => {
                    let rest = line["meta".len()..].trim_start();
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.insert(k.to_string(), v.to_string());
                }
                Some("tensor") => {
                    let name = parts.next().ok_or_else(|| bad("missing tensor name".into()))?;
                    let offset: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad("bad offset".into()))?;
                    let shape: Vec<usize> = parts
                        .map(|s| s.parse().map_err(|_| bad(format!("bad dimension {s:?}"))))
                        .collect::<Result<_, _>>()?;
                    let n: usize = shape.iter().product();
                    let end = offset + 4 * n;
                    if end > blob.len() {
                        return Err(CheckpointError::Blob(format!(
                            "{name} needs bytes {offset}..{end}, blob has {}",
                            blob.len()
                        )));
                    }
                    let data: Vec<f64> = blob[offset..end]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                        .collect();
                    let tensor = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
                    if name.starts_with("adam.") {
                        moments.insert(name.to_string(), tensor);
                    } else {
                        if params.id(name).is_some() {
                            return Err(bad(format!("duplicate tensor {name}")));
                        }
                        params.add(name, tensor);
                    }
                }
                Some(other) => return Err(bad(format!("unknown record {other:?}"))),
                None => {}
            }
        }
        let step = step.ok_or_else(|| CheckpointError::Missing("step".into()))?;
        let adam = match meta.remove("adam.step") {
            Some(s) => {
                let mut state = AdamState::new(&params);
                state.step = s
                    .parse()
                    .map_err(|_| CheckpointError::Missing("valid adam.step".into()))?;
                for id in params.ids() {
                    let name = params.name(id);
                    let m = moments
                        .remove(&format!("adam.m/{name}"))
                        .ok_or_else(|| CheckpointError::Missing(format!("adam.m/{name}")))?;
                    let v = moments
                        .remove(&format!("adam.v/{name}"))
                        .ok_or_else(|| CheckpointError::Missing(format!("adam.v/{name}")))?;
                    state.m[id.0] = m.into_data();
                    state.v[id.0] = v.into_data();
                }
                Some(state)
            }
            None => None,
        };
        Ok(Checkpoint {
            step,
            meta,
            params,
            adam,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_at_single_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::randn(&[3, 4], 1.0, &mut rng));
        store.add("b", Tensor::randn(&[1, 5], 1.0, &mut rng));
        let mut adam = AdamState::new(&store);
        adam.step = 17;
        adam.m[0][2] = 0.5;
        adam.v[1][4] = 0.25;
        let mut meta = BTreeMap::new();
        meta.insert("model.mode".to_string(), "in_attention".to_string());
        meta.insert("note".to_string(), "two words".to_string());
        let ck = Checkpoint::new(42, meta.clone(), store.clone(), Some(adam.clone()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        assert!(blob_path(&path).exists());
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.meta, meta);
        for id in store.ids() {
            let a = store.get(id);
            let b = back.params.get(back.params.id(store.name(id)).unwrap());
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        let ba = back.adam.unwrap();
        assert_eq!(ba.step, 17);
        assert_eq!(ba.m[0][2], 0.5);
        assert_eq!(ba.v[1][4], 0.25);
    }

    #[test]
    fn blob_layout_is_little_endian_f32() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::matrix(1, 2, vec![1.0, -2.0]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        Checkpoint::new(0, BTreeMap::new(), store, None).save(&path).unwrap();
        let blob = fs::read(blob_path(&path)).unwrap();
        assert_eq!(blob, [1.0f32.to_le_bytes(), (-2.0f32).to_le_bytes()].concat());
        let manifest = fs::read_to_string(&path).unwrap();
        assert!(manifest.contains("tensor x 0 1 2"));
    }

    #[test]
    fn truncated_blob_is_an_error() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::matrix(2, 2, vec![1.0; 4]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        Checkpoint::new(0, BTreeMap::new(), store, None).save(&path).unwrap();
        fs::write(blob_path(&path), [0u8; 8]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Blob(_))));
    }
}

//! Named parameter storage, seeded initialization, and the checkpoint
//! container.
//!
//! Parameters live in a `BTreeMap` keyed by dotted path strings (e.g.
//! `seasonal.level.2.enc.block.0.attn.wq`), which keeps every iteration
//! order deterministic. Checkpoints are a flat binary container mapping
//! those paths to shape-prefixed little-endian f64 arrays behind a text
//! header; round trips are bit-exact.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} is not a checkpoint (bad magic)")]
    BadMagic(String),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated or corrupt: {0}")]
    Corrupt(String),
}

/// Ordered map from parameter path to tensor.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) {
        let path = path.into();
        let prev = self.entries.insert(path.clone(), value);
        assert!(prev.is_none(), "duplicate parameter path {path}");
    }

    pub fn get(&self, path: &str) -> &Tensor {
        self.entries
            .get(path)
            .unwrap_or_else(|| panic!("unknown parameter path {path}"))
    }

    pub fn try_get(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> &mut Tensor {
        self.entries
            .get_mut(path)
            .unwrap_or_else(|| panic!("unknown parameter path {path}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }
}

/// Parameters of one forward pass, bound onto a tape as leaves.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Bind every store entry as a tape leaf. `trainable` controls whether
    /// gradients are tracked.
    pub fn bind(store: &ParamStore, tape: &mut Tape, trainable: bool) -> Self {
        let mut vars = BTreeMap::new();
        for (path, value) in store.iter() {
            vars.insert(path.clone(), tape.leaf(value.clone(), trainable));
        }
        BoundParams { vars }
    }

    pub fn var(&self, path: &str) -> Var {
        *self
            .vars
            .get(path)
            .unwrap_or_else(|| panic!("parameter {path} not bound"))
    }

    /// Pull accumulated gradients for every bound parameter (zeros where a
    /// parameter did not participate).
    pub fn collect_grads(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(path, &var)| {
                let g = tape
                    .grad(var)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(var).numel()]);
                (path.clone(), g)
            })
            .collect()
    }
}

// ── Initialization ──────────────────────────────────────────────────

/// Uniform on ±1/sqrt(fan_in), the default for linear and conv weights.
pub fn init_fan_in(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    init_uniform(rng, shape, bound)
}

/// Uniform on ±half_width (position embeddings use 0.02).
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], half_width: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| rng.gen::<f64>() * 2.0 * half_width - half_width)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

// ── Checkpoint container ────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"MTPC";
const VERSION: u32 = 1;

/// Write `header` (flat key=value config text) and every parameter to a
/// binary checkpoint.
pub fn save_checkpoint(
    path: &Path,
    header: &str,
    store: &ParamStore,
) -> Result<(), CheckpointError> {
    let display = path.display().to_string();
    let wrap = |source: std::io::Error| CheckpointError::Io {
        path: display.clone(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(wrap)?);
    let mut w = |bytes: &[u8]| f.write_all(bytes).map_err(wrap);
    w(MAGIC)?;
    w(&VERSION.to_le_bytes())?;
    w(&(header.len() as u32).to_le_bytes())?;
    w(header.as_bytes())?;
    w(&(store.len() as u32).to_le_bytes())?;
    for (p, t) in store.iter() {
        w(&(p.len() as u32).to_le_bytes())?;
        w(p.as_bytes())?;
        w(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w(&v.to_le_bytes())?;
        }
    }
    f.flush().map_err(wrap)
}

/// Read a checkpoint back; returns the header text and the parameters.
pub fn load_checkpoint(path: &Path) -> Result<(String, ParamStore), CheckpointError> {
    let display = path.display().to_string();
    let wrap = |source: std::io::Error| CheckpointError::Io {
        path: display.clone(),
        source,
    };
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(wrap)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(wrap)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(display));
    }
    let version = read_u32(&mut f, &display)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let header_len = read_u32(&mut f, &display)? as usize;
    let mut header = vec![0u8; header_len];
    f.read_exact(&mut header).map_err(wrap)?;
    let header = String::from_utf8(header)
        .map_err(|_| CheckpointError::Corrupt("header not utf-8".into()))?;
    let count = read_u32(&mut f, &display)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let plen = read_u32(&mut f, &display)? as usize;
        let mut pbytes = vec![0u8; plen];
        f.read_exact(&mut pbytes).map_err(wrap)?;
        let p = String::from_utf8(pbytes)
            .map_err(|_| CheckpointError::Corrupt("path not utf-8".into()))?;
        let ndim = read_u32(&mut f, &display)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut f, &display)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            f.read_exact(&mut buf).map_err(wrap)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        store.insert(p, tensor);
    }
    Ok((header, store))
}

fn read_u32<R: Read>(f: &mut R, path: &str) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    f.read_exact(&mut buf).map_err(|source| CheckpointError::Io {
        path: path.to_string(),
        source,
    })?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn store_is_ordered_and_counts_elements() {
        let mut s = ParamStore::new();
        s.insert("b.w", Tensor::zeros(&[2, 3]));
        s.insert("a.w", Tensor::zeros(&[4]));
        let paths: Vec<&String> = s.paths().collect();
        assert_eq!(paths, ["a.w", "b.w"]);
        assert_eq!(s.numel(), 10);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut s = ParamStore::new();
        s.insert("level.0.enc.attn.wq", init_fan_in(&mut rng, &[4, 4], 4));
        s.insert("level.0.pos", init_uniform(&mut rng, &[2, 3, 4], 0.02));
        s.insert("odd", Tensor::new(vec![3], vec![f64::MIN_POSITIVE, -0.0, 1e300]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, "lookback_I = 16\nhorizon_H = 8\n", &s).unwrap();
        let (header, back) = load_checkpoint(&path).unwrap();
        assert!(header.contains("lookback_I = 16"));
        assert_eq!(back.len(), s.len());
        for (p, t) in s.iter() {
            let b = back.get(p);
            assert_eq!(b.shape(), t.shape());
            for (x, y) in b.data().iter().zip(t.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {p}");
            }
        }
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic(_))
        ));
    }

    #[test]
    fn bind_and_collect_grads() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
        s.insert("unused", Tensor::zeros(&[2]));
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&s, &mut tape, true);
        let w = bound.var("w");
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let grads = bound.collect_grads(&tape);
        assert_eq!(grads["w"], vec![6.0, -2.0]);
        assert_eq!(grads["unused"], vec![0.0, 0.0]);
    }
}

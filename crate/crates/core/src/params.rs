//! Named parameter storage, the Adam optimizer, and the on-disk
//! checkpoint format (meta.json + manifest.json + one little-endian f32
//! tensor file per parameter).

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::graph::Gradients;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Insertion-ordered map of named dense tensors. Iteration order is the
/// insertion order, which keeps checkpoints and snapshots deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        self.entries.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All parameters are finite (no NaN/Inf).
    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Byte-exact snapshot of parameters whose names start with any prefix.
    pub fn snapshot(&self, prefixes: &[&str]) -> Vec<(String, Array2<f64>)> {
        self.entries
            .iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    /// Names whose current values differ from the snapshot.
    pub fn diff(&self, snapshot: &[(String, Array2<f64>)]) -> Vec<String> {
        snapshot
            .iter()
            .filter(|(n, v)| self.get(n) != v)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn save(&self, dir: &Path, meta: &CheckpointMeta) -> Result<(), CoreError> {
        fs::create_dir_all(dir)?;
        let mut manifest = ManifestFile {
            tensors: Vec::new(),
        };
        for (name, value) in &self.entries {
            let file = format!("{}.bin", name.replace('/', "_"));
            let mut buf = Vec::with_capacity(value.len() * 4);
            for &x in value.iter() {
                buf.write_f32::<LittleEndian>(x as f32)?;
            }
            fs::write(dir.join(&file), buf)?;
            manifest.tensors.push(TensorEntry {
                name: name.clone(),
                shape: vec![value.nrows(), value.ncols()],
                file,
            });
        }
        write_json_sorted(&dir.join("manifest.json"), &manifest)?;
        write_json_sorted(&dir.join("meta.json"), meta)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointMeta), CoreError> {
        let meta: CheckpointMeta =
            serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(CoreError::Data(format!(
                "unsupported checkpoint format version {}",
                meta.format_version
            )));
        }
        let manifest: ManifestFile =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut store = ParamStore::new();
        for entry in &manifest.tensors {
            let (n, m) = (entry.shape[0], entry.shape[1]);
            let mut file = fs::File::open(dir.join(&entry.file))?;
            let mut data = Vec::with_capacity(n * m);
            for _ in 0..n * m {
                data.push(file.read_f32::<LittleEndian>()? as f64);
            }
            let mut tail = [0u8; 1];
            if file.read(&mut tail)? != 0 {
                return Err(CoreError::Data(format!(
                    "tensor {}: file larger than declared shape {:?}",
                    entry.name, entry.shape
                )));
            }
            let arr = Array2::from_shape_vec((n, m), data)
                .map_err(|e| CoreError::Data(format!("tensor {}: {e}", entry.name)))?;
            meta.validate_shape(&entry.name, (n, m))?;
            store.insert(&entry.name, arr);
        }
        Ok((store, meta))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub d: usize,
    pub k_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub l_max: usize,
    pub vocab_size: usize,
    pub format_version: u32,
}

impl CheckpointMeta {
    fn validate_shape(&self, name: &str, shape: (usize, usize)) -> Result<(), CoreError> {
        let ok = if name.ends_with("emb") || name.ends_with("emb2") {
            shape == (self.vocab_size, self.d)
        } else if name.ends_with(".pos") {
            shape == (self.l_max, self.d)
        } else if name.ends_with("mlm_bias") {
            shape == (1, self.vocab_size)
        } else {
            // remaining tensors must at least be dimension-consistent
            shape.0 > 0 && shape.1 > 0
        };
        if ok {
            Ok(())
        } else {
            Err(CoreError::Data(format!(
                "tensor {name} has shape {shape:?} inconsistent with meta"
            )))
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

/// Serialize with sorted keys and a trailing newline so re-runs diff cleanly.
pub fn write_json_sorted<T: Serialize>(path: &Path, value: &T) -> Result<(), CoreError> {
    let v = serde_json::to_value(value)?;
    let mut text = serde_json::to_string_pretty(&sort_json(v))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn sort_json(v: serde_json::Value) -> serde_json::Value {
    match v {
        serde_json::Value::Object(map) => {
            let mut sorted: std::collections::BTreeMap<String, serde_json::Value> =
                Default::default();
            for (k, val) in map {
                sorted.insert(k, sort_json(val));
            }
            serde_json::to_value(sorted).unwrap()
        }
        serde_json::Value::Array(items) => {
            serde_json::Value::Array(items.into_iter().map(sort_json).collect())
        }
        other => other,
    }
}

/// First-order adaptive-moment optimizer with per-parameter state.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: HashMap<String, Array2<f64>>,
    v: HashMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Apply one update, restricted to parameters whose name starts with one
    /// of `include_prefixes`. Gradients for other parameters are ignored.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        include_prefixes: &[&str],
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut names: Vec<&String> = grads
            .keys()
            .filter(|n| include_prefixes.iter().any(|p| n.starts_with(p)))
            .collect();
        names.sort();
        for name in names {
            let g = &grads[name.as_str()];
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            *m *= self.beta1;
            m.scaled_add(1.0 - self.beta1, g);
            *v *= self.beta2;
            v.scaled_add(1.0 - self.beta2, &g.mapv(|x| x * x));
            let p = store.get_mut(name);
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    *p -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                });
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment tensors as a store, for exact-resume checkpoints.
    pub fn state_store(&self) -> ParamStore {
        let mut out = ParamStore::new();
        let mut names: Vec<&String> = self.m.keys().collect();
        names.sort();
        for name in names {
            out.insert(&format!("m.{name}"), self.m[name.as_str()].clone());
            out.insert(&format!("v.{name}"), self.v[name.as_str()].clone());
        }
        out
    }

    pub fn restore_state(&mut self, state: &ParamStore, step: u64) {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for name in state.names() {
            let tensor = state.get(name).clone();
            if let Some(rest) = name.strip_prefix("m.") {
                self.m.insert(rest.to_string(), tensor);
            } else if let Some(rest) = name.strip_prefix("v.") {
                self.v.insert(rest.to_string(), tensor);
            }
        }
    }
}

/// Sum gradient maps; used when averaging per-example gradients.
pub fn accumulate(total: &mut Gradients, part: Gradients) {
    for (name, g) in part {
        match total.get_mut(&name) {
            Some(t) => *t += &g,
            None => {
                total.insert(name, g);
            }
        }
    }
}

pub fn scale_gradients(grads: &mut Gradients, factor: f64) {
    for g in grads.values_mut() {
        *g *= factor;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use tempfile::tempdir;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.insert("w", array![[5.0, -3.0]]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = store.get("w").mapv(|x| 2.0 * x);
            let mut grads = Gradients::new();
            grads.insert("w".into(), g);
            opt.step(&mut store, &grads, &["w"]);
        }
        assert!(store.get("w").iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn adam_prefix_filter_leaves_others_untouched() {
        let mut store = ParamStore::new();
        store.insert("a.w", array![[1.0]]);
        store.insert("b.w", array![[1.0]]);
        let mut grads = Gradients::new();
        grads.insert("a.w".into(), array![[1.0]]);
        grads.insert("b.w".into(), array![[1.0]]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut store, &grads, &["a."]);
        assert_ne!(store.get("a.w")[[0, 0]], 1.0);
        assert_eq!(store.get("b.w")[[0, 0]], 1.0);
    }

    #[test]
    fn checkpoint_round_trip_quantizes_to_f32() {
        let dir = tempdir().unwrap();
        let mut store = ParamStore::new();
        store.insert("emb", Array2::from_shape_fn((20, 8), |(i, j)| (i * 31 + j) as f64 * 0.01));
        store.insert("spe.pos", Array2::from_elem((6, 8), 0.25));
        store.insert("spe.mlm_bias", Array2::zeros((1, 20)));
        let meta = CheckpointMeta {
            d: 8,
            k_layers: 1,
            heads: 2,
            d_ff: 32,
            l_max: 6,
            vocab_size: 20,
            format_version: CHECKPOINT_FORMAT_VERSION,
        };
        store.save(dir.path(), &meta).unwrap();
        let (loaded, meta2) = ParamStore::load(dir.path()).unwrap();
        assert_eq!(meta, meta2);
        for name in store.names() {
            let a = store.get(name);
            let b = loaded.get(name);
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn checkpoint_shape_mismatch_rejected() {
        let dir = tempdir().unwrap();
        let mut store = ParamStore::new();
        store.insert("emb", Array2::zeros((10, 4)));
        let meta = CheckpointMeta {
            d: 8, // wrong: emb is (10, 4)
            k_layers: 1,
            heads: 2,
            d_ff: 32,
            l_max: 6,
            vocab_size: 10,
            format_version: CHECKPOINT_FORMAT_VERSION,
        };
        store.save(dir.path(), &meta).unwrap();
        assert!(ParamStore::load(dir.path()).is_err());
    }
}

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Matrix,
    first_moment: Matrix,
    second_moment: Matrix,
}

/// Named trainable parameters with Adam moment accumulators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

/// On-disk checkpoint: parameters in registration order, row-major values.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    params: Vec<CheckpointEntry>,
}

const CHECKPOINT_FORMAT: &str = "ugn-params/1";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        let dim = value.dim();
        self.entries.push(Entry {
            name,
            value,
            first_moment: Array2::zeros(dim),
            second_moment: Array2::zeros(dim),
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Glorot-uniform `fan_in × fan_out` matrix, bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..=bound));
        self.insert(name, value)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<ParamId> {
        self.insert(name, Array2::zeros((rows, cols)))
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    /// `(value, first moment, second moment)` of a parameter.
    pub fn state_mut(&mut self, id: ParamId) -> (&mut Matrix, &mut Matrix, &mut Matrix) {
        let e = &mut self.entries[id.0];
        (&mut e.value, &mut e.first_moment, &mut e.second_moment)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Order-sensitive FNV-1a hash over names and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for e in &self.entries {
            eat(e.name.as_bytes());
            for v in e.value.iter() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Copies parameter values (not moments) from `other`, which must have
    /// the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        assert_eq!(self.entries.len(), other.entries.len(), "parameter layout mismatch");
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.value.assign(&b.value);
        }
    }

    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            params: self
                .entries
                .iter()
                .map(|e| CheckpointEntry {
                    name: e.name.clone(),
                    shape: [e.value.nrows(), e.value.ncols()],
                    values: e.value.iter().copied().collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&ck).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(format!("unsupported checkpoint format {:?}", ck.format));
        }
        let mut store = ParamStore::new();
        for p in ck.params {
            let value = Array2::from_shape_vec((p.shape[0], p.shape[1]), p.values)
                .map_err(|_| format!("parameter {:?}: value count does not match shape", p.name))?;
            store.insert(p.name, value).map_err(|e| e.to_string())?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::trainer::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ParamStore::from_json(&text).map_err(|msg| Error::config(format!("{}: {msg}", path.display())))
    }

    /// Overwrites values with those of a loaded checkpoint, matching by name
    /// and checking shapes.
    pub fn load_values(&mut self, loaded: &ParamStore) -> Result<()> {
        if loaded.len() != self.len() {
            return Err(Error::config(format!(
                "checkpoint has {} parameters, model expects {}",
                loaded.len(),
                self.len()
            )));
        }
        for e in &mut self.entries {
            let src = loaded
                .get(&e.name)
                .ok_or_else(|| Error::config(format!("checkpoint lacks parameter {:?}", e.name)))?;
            let v = loaded.value(src);
            if v.dim() != e.value.dim() {
                return Err(Error::config(format!(
                    "parameter {:?}: checkpoint shape {:?}, model shape {:?}",
                    e.name,
                    v.dim(),
                    e.value.dim()
                )));
            }
            e.value.assign(v);
        }
        Ok(())
    }
}

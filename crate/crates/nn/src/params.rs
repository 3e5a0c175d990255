use std::collections::HashMap;
use std::io::{Read, Write};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::{Mat, NnError};

/// Handle to one matrix in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Mat,
    trainable: bool,
}

/// Named, ordered collection of parameter matrices.
///
/// Non-trainable entries ("buffers") are persisted with the parameters but
/// never receive optimizer updates; spectral-norm power-iteration vectors
/// live there.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, ParamId>,
}

const MAGIC: &[u8; 8] = b"LRTTSPRM";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Mat, trainable: bool) -> ParamId {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |id| self.name(*id).starts_with(prefix))
    }

    /// Number of scalar trainable parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn checksum(&self) -> String {
        self.checksum_of(self.ids())
    }

    pub fn checksum_of(&self, ids: impl IntoIterator<Item = ParamId>) -> String {
        let mut h = Sha256::new();
        for id in ids {
            let e = &self.entries[id.0];
            h.update(e.name.as_bytes());
            h.update((e.value.nrows() as u64).to_le_bytes());
            h.update((e.value.ncols() as u64).to_le_bytes());
            for x in e.value.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Binary layout: magic, entry count, then per entry
    /// `name_len u32 | name | trainable u8 | rows u64 | cols u64 | f64 LE row-major`.
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), NnError> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[e.trainable as u8])?;
            w.write_all(&(e.value.nrows() as u64).to_le_bytes())?;
            w.write_all(&(e.value.ncols() as u64).to_le_bytes())?;
            for x in e.value.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, NnError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Format("bad parameter file magic".into()));
        }
        let count = read_u64(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| NnError::Format("parameter name is not utf-8".into()))?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let rows = read_u64(r)? as usize;
            let cols = read_u64(r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let value = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| NnError::Format(e.to_string()))?;
            store.insert(name, value, flag[0] != 0);
        }
        Ok(store)
    }

    /// Copies values from `other` by name; every name must exist with the same shape.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<(), NnError> {
        if other.len() != self.len() {
            return Err(NnError::Format(format!(
                "parameter count mismatch: expected {}, found {}",
                self.len(),
                other.len()
            )));
        }
        for e in &mut self.entries {
            let id = other
                .id_of(&e.name)
                .ok_or_else(|| NnError::Format(format!("missing parameter {}", e.name)))?;
            let src = other.get(id);
            if src.dim() != e.value.dim() {
                return Err(NnError::Format(format!(
                    "shape mismatch for {}: expected {:?}, found {:?}",
                    e.name,
                    e.value.dim(),
                    src.dim()
                )));
            }
            e.value.assign(src);
        }
        Ok(())
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64, NnError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Per-parameter gradients, indexed like the owning store.
#[derive(Clone, Debug)]
pub struct Grads {
    slots: Vec<Option<Mat>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub(crate) fn from_slots(slots: Vec<Option<Mat>>) -> Self {
        Self { slots }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn set(&mut self, id: ParamId, g: Mat) {
        self.slots[id.0] = Some(g);
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Mat> {
        self.slots[id.0].take()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Mat)> {
        self.slots
            .iter_mut()
            .enumerate()
            .filter_map(|(i, s)| s.as_mut().map(|g| (ParamId(i), g)))
    }

    /// Adds `other` into `self`, slot by slot.
    pub fn accumulate(&mut self, other: &Grads) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(src) = src {
                match dst {
                    Some(d) => *d += src,
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, g) in self.iter_mut() {
            g.mapv_inplace(|x| x * k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

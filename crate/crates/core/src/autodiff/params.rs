use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors. Insertion order defines [`ParamId`]s.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Rc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Rc::new(value));
        ParamId(self.values.len() - 1)
    }

    /// Normal(0, std) weights.
    pub fn insert_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub(crate) fn shared(&self, id: ParamId) -> Rc<Tensor> {
        self.values[id.0].clone()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().map(|v| (**v).clone()))
            .collect()
    }
}

const MAGIC: &[u8; 8] = b"MRCADAPT";
const VERSION: u32 = 1;

/// Writes a checkpoint: magic, version, a length-prefixed UTF-8 header
/// (caller-defined, typically JSON geometry), then every parameter sorted by
/// name as `name_len:u32 name ndim:u32 dims:u64* values:f64*`, little-endian.
pub fn write_checkpoint<W: Write>(mut w: W, header: &str, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_bytes(&mut w, header.as_bytes())?;
    let snap = store.snapshot();
    w.write_all(&(snap.len() as u32).to_le_bytes())?;
    for (name, t) in &snap {
        write_bytes(&mut w, name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`], returning the header
/// and parameters keyed by name.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(String, BTreeMap<String, Tensor>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let header = String::from_utf8(read_bytes(&mut r)?)
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let count = read_u32(&mut r)? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok((header, out))
}

impl ParamStore {
    /// Overwrites values from a checkpoint map. Names and shapes must match exactly.
    pub fn load_from(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                values.len(),
                self.len()
            )));
        }
        for i in 0..self.len() {
            let name = &self.names[i];
            let t = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = Rc::new(t.clone());
        }
        Ok(())
    }
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut v = vec![0u8; n];
    r.read_exact(&mut v)?;
    Ok(v)
}

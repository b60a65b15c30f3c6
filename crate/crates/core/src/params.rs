//! Trainable parameter storage.
//!
//! A [`ParamStore`] owns the values and accumulated gradients of one model.
//! Parameters are tagged with a [`ParamGroup`] so the network weights and
//! the architecture weights can be stepped by separate optimizers.

use std::cell::Cell;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

const PARAM_FILE_MAGIC: &[u8; 8] = b"MNASPRM1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    store: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Network,
    Architecture,
}

#[derive(Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub group: ParamGroup,
}

#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    params: Vec<Param>,
    reads: Cell<u64>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            reads: Cell::new(0),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let grad = vec![0.0; value.len()];
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            group,
        });
        ParamId {
            store: self.id,
            index: self.params.len() - 1,
        }
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape), ParamGroup::Network)
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, 1.0), ParamGroup::Network)
    }

    pub fn normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut RngStream,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal(0.0, std)).collect();
        let value = Tensor::new(shape, data).expect("shape product matches");
        self.add(name, value, ParamGroup::Network)
    }

    fn check(&self, id: ParamId) -> usize {
        assert_eq!(
            id.store, self.id,
            "parameter belongs to store {} but was looked up in store {}",
            id.store, self.id
        );
        id.index
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.id && id.index < self.params.len()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[self.check(id)]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        let i = self.check(id);
        &mut self.params[i]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.get(id).value
    }

    /// Value read for a forward pass; counted so tests can prove a store was
    /// never consulted.
    pub(crate) fn read_for_forward(&self, id: ParamId) -> &Tensor {
        self.reads.set(self.reads.get() + 1);
        &self.get(id).value
    }

    /// Number of forward-pass reads served by this store.
    pub fn forward_reads(&self) -> u64 {
        self.reads.get()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(move |index| ParamId {
            store: self.id,
            index,
        })
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.get(id).group == group).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count of a group.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Flat copy of every value in a group, in registration order.
    pub fn snapshot(&self, group: ParamGroup) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(PARAM_FILE_MAGIC);
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(match p.group {
                ParamGroup::Network => 0,
                ParamGroup::Architecture => 1,
            });
            buf.extend_from_slice(&(p.value.rank() as u64).to_le_bytes());
            for &d in p.value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::io::write_atomic(path, &buf)
    }

    /// Overwrites values from a file written by [`ParamStore::save`]. Names,
    /// order and shapes must match this store exactly.
    pub fn load_values(&mut self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(8)? != PARAM_FILE_MAGIC {
            return Err(Error::format("parameter file", "bad magic"));
        }
        let count = r.u64()? as usize;
        if count != self.params.len() {
            return Err(Error::format(
                "parameter file",
                format!("{count} parameters, model has {}", self.params.len()),
            ));
        }
        for p in &mut self.params {
            let name_len = r.u64()? as usize;
            let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
            if name != p.name {
                return Err(Error::format(
                    "parameter file",
                    format!("expected `{}`, found `{name}`", p.name),
                ));
            }
            let _group = r.take(1)?;
            let rank = r.u64()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            if shape != p.value.shape() {
                return Err(Error::format(
                    "parameter file",
                    format!("`{name}` has shape {shape:?}, expected {:?}", p.value.shape()),
                ));
            }
            for v in p.value.data_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
        }
        Ok(())
    }

    /// Human-readable parameter listing.
    pub fn describe(&self, mut out: impl Write) -> std::io::Result<()> {
        for p in &self.params {
            writeln!(out, "{:<40} {:?} {:?}", p.name, p.value.shape(), p.group)?;
        }
        Ok(())
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("parameter file", "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

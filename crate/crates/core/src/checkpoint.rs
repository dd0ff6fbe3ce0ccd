//! Named parameter snapshots, independent of any live model.
//!
//! Values are held in f64. Files store f32, so a checkpoint read from disk
//! holds f32-representable values and writing it again is lossless.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::numerics::{ParameterStore, Tensor};
use crate::rng::fnv1a64;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub config_hash: u64,
    pub step: u64,
}

/// Adam moments aligned with the records that are trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
    pub meta: CheckpointMeta,
    pub optimizer: Option<OptimizerState>,
}

/// Rounds every value through f32, as a save/load cycle would.
pub fn quantize(store: &mut ParameterStore) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.data_mut(id) {
            *v = f64::from(*v as f32);
        }
    }
}

impl Checkpoint {
    pub fn from_store(store: &ParameterStore, meta: CheckpointMeta) -> Self {
        let records = store
            .iter()
            .map(|(_, p)| Record {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().to_vec(),
            })
            .collect();
        Checkpoint {
            records,
            meta,
            optimizer: None,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.name.as_str())
    }

    /// Copies every record into `store`. Both sides must have exactly the
    /// same names and shapes.
    pub fn load_into(&self, store: &mut ParameterStore) -> Result<()> {
        if self.records.len() != store.len() {
            return Err(Error::UnknownParameter(format!(
                "checkpoint has {} tensors, model has {}",
                self.records.len(),
                store.len()
            )));
        }
        for r in &self.records {
            if store.id(&r.name).is_none() {
                return Err(Error::UnknownParameter(r.name.clone()));
            }
            store.assign(&r.name, Tensor::new(r.shape.clone(), r.data.clone())?)?;
        }
        Ok(())
    }

    /// A standalone store with every record trainable.
    pub fn to_store(&self) -> Result<ParameterStore> {
        let mut s = ParameterStore::new();
        for r in &self.records {
            s.add(&r.name, Tensor::new(r.shape.clone(), r.data.clone())?, true)?;
        }
        Ok(s)
    }

    /// FNV-1a over names, shapes and the f32 bit patterns of the values.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for r in &self.records {
            bytes.extend_from_slice(r.name.as_bytes());
            for d in &r.shape {
                bytes.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &r.data {
                bytes.extend_from_slice(&(*v as f32).to_bits().to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }

    pub fn num_scalars(&self) -> usize {
        self.records.iter().map(|r| r.data.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.add("a", Tensor::from_fn(alloc::vec![2, 2], |i| 0.1 * i as f64), true).unwrap();
        s.add("b", Tensor::scalar(1.0 / 3.0), false).unwrap();
        s
    }

    #[test]
    fn store_round_trip() {
        let s = store();
        let c = Checkpoint::from_store(&s, CheckpointMeta::default());
        let mut t = store();
        t.data_mut(t.id("a").unwrap()).fill(0.0);
        c.load_into(&mut t).unwrap();
        assert_eq!(t.checksum(), s.checksum());
        assert_eq!(c.to_store().unwrap().get("b").unwrap(), s.get("b").unwrap());
    }

    #[test]
    fn load_rejects_mismatches() {
        let mut c = Checkpoint::from_store(&store(), CheckpointMeta::default());
        c.records[0].shape = alloc::vec![4];
        assert!(matches!(c.load_into(&mut store()), Err(Error::Shape(_))));
        c.records[0].shape = alloc::vec![2, 2];
        c.records[1].name = "c".into();
        assert!(matches!(c.load_into(&mut store()), Err(Error::UnknownParameter(_))));
        c.records.pop();
        assert!(c.load_into(&mut store()).is_err());
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut s = store();
        quantize(&mut s);
        let once = s.checksum();
        quantize(&mut s);
        assert_eq!(s.checksum(), once);
        assert_eq!(s.get("b").unwrap().data()[0], f64::from((1.0f64 / 3.0) as f32));
    }
}

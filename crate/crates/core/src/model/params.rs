use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// Parameter families used to decide what trains at each fine-tuning level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Conv,
    Projection,
    Fusion,
    PosEnc,
    Norm,
    AttnBase,
    MlpBase,
    LoraAdapter,
    Decoder,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub value: Rc<DenseArray>,
    pub trainable: bool,
    pub group: ParamGroup,
}

/// Named model parameters in sorted name order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: DenseArray, group: ParamGroup) {
        self.entries.insert(name.to_string(), ParamEntry { value: Rc::new(value), trainable: true, group });
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamEntry> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.entries.get(name).ok_or_else(|| Error::invalid(format!("no parameter named '{name}'")))
    }

    pub fn get(&self, name: &str) -> Result<&Rc<DenseArray>> {
        Ok(&self.entry(name)?.value)
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, name: &str, value: DenseArray) -> Result<()> {
        let e = self.entries.get_mut(name).ok_or_else(|| Error::invalid(format!("no parameter named '{name}'")))?;
        if e.value.shape() != value.shape() {
            return Err(Error::shape(format!("parameter {name}: {:?} cannot take {:?}", e.value.shape(), value.shape())));
        }
        e.value = Rc::new(value);
        Ok(())
    }

    /// Mutable access to the values, copying if a graph still holds them.
    pub fn value_mut(&mut self, name: &str) -> Result<&mut DenseArray> {
        let e = self.entries.get_mut(name).ok_or_else(|| Error::invalid(format!("no parameter named '{name}'")))?;
        Ok(Rc::make_mut(&mut e.value))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries.get_mut(name).ok_or_else(|| Error::invalid(format!("no parameter named '{name}'")))?.trainable = trainable;
        Ok(())
    }

    /// Marks each parameter trainable iff `pred` holds for it.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str, &ParamEntry) -> bool) {
        for (name, e) in self.entries.iter_mut() {
            e.trainable = pred(name, e);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scalar parameter count.
    pub fn total_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries.iter().filter(|(_, e)| e.trainable).map(|(n, _)| n.clone()).collect()
    }

    pub fn count_in(&self, group: ParamGroup) -> usize {
        self.entries.values().filter(|e| e.group == group).map(|e| e.value.len()).sum()
    }
}

/// `U(-bound, bound)` entries.
pub(crate) fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> DenseArray {
    DenseArray::from_fn(shape, |_| if bound == 0.0 { 0.0 } else { rng.random_range(-bound..bound) })
}

/// Fan-in scaled uniform initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> DenseArray {
    uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

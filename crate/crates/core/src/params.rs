//! Named parameter tensors partitioned by name prefix, each carrying a
//! gradient accumulator and a frozen flag.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::{NodeId, Tape};
use crate::scalar::Scalar;
use crate::tensor::{NumericError, TensorBase};

#[derive(Debug, Clone)]
struct Entry<S> {
    value: TensorBase<S>,
    grad: TensorBase<S>,
    frozen: bool,
}

/// Map from name to (value, gradient, frozen). Gradient shape always equals
/// value shape; frozen entries receive zero update from any optimizer step.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<S> {
    entries: BTreeMap<String, Entry<S>>,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: TensorBase<S>) {
        let grad = TensorBase::zeros(value.shape());
        self.entries.insert(name.into(), Entry { value, grad, frozen: false });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Result<&TensorBase<S>, NumericError> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| NumericError::UnknownParameter(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&TensorBase<S>, NumericError> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| NumericError::UnknownParameter(name.to_string()))
    }

    pub fn set_value(&mut self, name: &str, value: TensorBase<S>) -> Result<(), NumericError> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NumericError::UnknownParameter(name.to_string()))?;
        e.grad = TensorBase::zeros(value.shape());
        e.value = value;
        Ok(())
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<(), NumericError> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NumericError::UnknownParameter(name.to_string()))?;
        e.frozen = frozen;
        Ok(())
    }

    /// Freeze every entry whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.frozen = true;
            }
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.frozen).unwrap_or(false)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = TensorBase::zeros(e.value.shape());
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &TensorBase<S>) -> Result<(), NumericError> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NumericError::UnknownParameter(name.to_string()))?;
        if e.frozen {
            return Ok(());
        }
        if g.shape() != e.grad.shape() {
            return Err(NumericError::ShapeMismatch {
                op: "accumulate_grad".to_string(),
                details: format!("{:?} vs {:?}", g.shape(), e.grad.shape()),
            });
        }
        e.grad.add_assign(g);
        Ok(())
    }

    /// Sum of squared entries over names with the given prefix.
    pub fn l2_norm_sq(&self, prefix: &str) -> S {
        let mut acc = S::zero();
        for (name, e) in &self.entries {
            if name.starts_with(prefix) {
                for &v in e.value.data() {
                    acc += v * v;
                }
            }
        }
        acc
    }

    /// Record every parameter on `tape`: non-frozen as differentiable leaves,
    /// frozen as constants.
    pub fn bind(&self, tape: &mut Tape<S>) -> Binding {
        let mut ids = BTreeMap::new();
        for (name, e) in &self.entries {
            let id = if e.frozen {
                tape.constant(e.value.clone())
            } else {
                tape.leaf(e.value.clone())
            };
            ids.insert(name.clone(), id);
        }
        Binding { ids }
    }

    /// Pull gradients off a completed backward pass into the accumulators.
    pub fn accumulate_from(
        &mut self,
        tape: &Tape<S>,
        binding: &Binding,
        grads: &[Option<TensorBase<S>>],
    ) -> Result<(), NumericError> {
        let names: Vec<String> = self.entries.keys().cloned().collect();
        for name in names {
            if self.is_frozen(&name) {
                continue;
            }
            let id = binding.id(&name)?;
            let g = tape.grad_of(grads, id);
            self.accumulate_grad(&name, &g)?;
        }
        Ok(())
    }
}

/// Name -> tape node mapping produced by [`ParameterStore::bind`].
#[derive(Debug, Clone)]
pub struct Binding {
    ids: BTreeMap<String, NodeId>,
}

impl Binding {
    pub fn id(&self, name: &str) -> Result<NodeId, NumericError> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| NumericError::UnknownParameter(name.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    shape: Vec<usize>,
    data: Vec<f64>,
    frozen: bool,
}

impl<S: Scalar> ParameterStore<S> {
    /// JSON checkpoint: name -> shape -> float list. Round-trips bit-exactly
    /// for finite values.
    pub fn save_json<W: Write>(&self, w: W) -> Result<(), std::io::Error> {
        let map: BTreeMap<&str, CheckpointEntry> = self
            .entries
            .iter()
            .map(|(name, e)| {
                (
                    name.as_str(),
                    CheckpointEntry {
                        shape: e.value.shape().to_vec(),
                        data: e.value.data().iter().map(|v| v.to_f64_lossy()).collect(),
                        frozen: e.frozen,
                    },
                )
            })
            .collect();
        serde_json::to_writer(w, &map).map_err(std::io::Error::other)
    }

    pub fn load_json<R: Read>(r: R) -> Result<Self, std::io::Error> {
        let map: BTreeMap<String, CheckpointEntry> =
            serde_json::from_reader(r).map_err(std::io::Error::other)?;
        let mut store = Self::new();
        for (name, e) in map {
            let data = e.data.into_iter().map(S::from_f64_lit).collect();
            let value = TensorBase::new(e.shape, data).map_err(std::io::Error::other)?;
            store.insert(name.clone(), value);
            store.set_frozen(&name, e.frozen).unwrap();
        }
        Ok(store)
    }

    pub fn save_file(&self, path: &Path) -> Result<(), std::io::Error> {
        let f = std::fs::File::create(path)?;
        self.save_json(std::io::BufWriter::new(f))
    }

    pub fn load_file(path: &Path) -> Result<Self, std::io::Error> {
        let f = std::fs::File::open(path)?;
        Self::load_json(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type Store = ParameterStore<f64>;
    type T = TensorBase<f64>;

    #[test]
    fn grad_shape_tracks_value() {
        let mut s = Store::new();
        s.insert("w", T::matrix(2, 3, vec![0.5; 6]).unwrap());
        assert_eq!(s.grad("w").unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn frozen_entries_ignore_gradients() {
        let mut s = Store::new();
        s.insert("w", T::vector(vec![1.0, 2.0]));
        s.set_frozen("w", true).unwrap();
        s.accumulate_grad("w", &T::vector(vec![5.0, 5.0])).unwrap();
        assert_eq!(s.grad("w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn accumulation_doubles() {
        let mut s = Store::new();
        s.insert("w", T::vector(vec![1.0]));
        let g = T::vector(vec![0.3]);
        s.accumulate_grad("w", &g).unwrap();
        s.accumulate_grad("w", &g).unwrap();
        assert_eq!(s.grad("w").unwrap().data(), &[0.6]);
    }

    #[test]
    fn json_round_trip_bit_exact() {
        let mut s = Store::new();
        s.insert("a.w", T::vector(vec![0.1, -2.5e-17, 3.0f64.sqrt(), 1.0 / 3.0]));
        s.insert("b.w", T::matrix(1, 2, vec![f64::MIN_POSITIVE, f64::MAX]).unwrap());
        s.set_frozen("b.w", true).unwrap();
        let mut buf = Vec::new();
        s.save_json(&mut buf).unwrap();
        let loaded = Store::load_json(&buf[..]).unwrap();
        for name in ["a.w", "b.w"] {
            assert_eq!(s.value(name).unwrap(), loaded.value(name).unwrap());
            assert_eq!(s.is_frozen(name), loaded.is_frozen(name));
        }
    }

    #[test]
    fn unknown_name_errors() {
        let s = Store::new();
        assert!(matches!(s.value("nope"), Err(NumericError::UnknownParameter(_))));
    }
}

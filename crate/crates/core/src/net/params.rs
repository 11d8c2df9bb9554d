use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{structural_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Whether the optimizer updates an entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Batch-norm running statistics and folded constants.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Named tensors in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces an entry; replacing keeps the original position.
    pub fn insert(&mut self, name: &str, kind: ParamKind, value: Tensor) {
        match self.index.get(name) {
            Some(&i) => {
                self.entries[i].kind = kind;
                self.entries[i].value = value;
            }
            None => {
                self.index.insert(name.to_string(), self.entries.len());
                self.entries.push(ParamEntry {
                    name: name.to_string(),
                    kind,
                    value,
                });
            }
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamEntry> {
        let i = self.index.remove(name)?;
        let e = self.entries.remove(i);
        for v in self.index.values_mut() {
            if *v > i {
                *v -= 1;
            }
        }
        Some(e)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.position(name)
            .map(|i| &self.entries[i].value)
            .ok_or_else(|| structural_err!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.position(name) {
            Some(i) => Ok(&mut self.entries[i].value),
            None => Err(structural_err!("missing parameter {name}")),
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

/// Lazily places store entries on a tape, once each.
pub struct Binder<'a> {
    store: &'a mut ParamStore,
    vars: Vec<Option<Var>>,
    /// Record trainable entries as leaves (otherwise as constants).
    grads: bool,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a mut ParamStore, grads: bool) -> Self {
        let n = store.len();
        Self {
            store,
            vars: alloc::vec![None; n],
            grads,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| structural_err!("missing parameter {name}"))?;
        if i >= self.vars.len() {
            self.vars.resize(i + 1, None);
        }
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let e = &self.store.entries[i];
        let v = if self.grads && e.kind == ParamKind::Trainable {
            tape.leaf(e.value.clone())
        } else {
            tape.constant(e.value.clone())
        };
        self.vars[i] = Some(v);
        Ok(v)
    }

    /// Uses `v` in place of entry `name` (e.g. to differentiate with
    /// respect to a single parameter tensor).
    pub fn substitute(&mut self, name: &str, v: Var) -> Result<()> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| structural_err!("missing parameter {name}"))?;
        if i >= self.vars.len() {
            self.vars.resize(i + 1, None);
        }
        self.vars[i] = Some(v);
        Ok(())
    }

    /// Tape variable of every entry that was used, by store position.
    pub fn into_vars(self) -> Vec<Option<Var>> {
        self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_and_replacement() {
        let mut s = ParamStore::new();
        s.insert("b", ParamKind::Trainable, Tensor::scalar(1.0));
        s.insert("a", ParamKind::Buffer, Tensor::scalar(2.0));
        s.insert("b", ParamKind::Trainable, Tensor::scalar(3.0));
        let names: Vec<&str> = s.entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(s.get("b").unwrap().item().unwrap(), 3.0);
        assert_eq!(s.trainable_count(), 1);
        assert!(s.remove("b").is_some());
        assert_eq!(s.position("a"), Some(0));
        assert!(matches!(s.get("b"), Err(crate::Error::Structural(_))));
    }

    #[test]
    fn binder_reuses_vars() {
        let mut s = ParamStore::new();
        s.insert("w", ParamKind::Trainable, Tensor::scalar(1.0));
        s.insert("m", ParamKind::Buffer, Tensor::scalar(0.0));
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut s, true);
        let w1 = b.var(&mut tape, "w").unwrap();
        let w2 = b.var(&mut tape, "w").unwrap();
        let m = b.var(&mut tape, "m").unwrap();
        assert_eq!(w1, w2);
        assert!(tape.requires_grad(w1).unwrap());
        assert!(!tape.requires_grad(m).unwrap());
        assert_eq!(tape.len(), 2);
    }
}

use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State carried between steps but not differentiated (running stats).
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Named, ordered collection of model tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            kind,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Scalar count of trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn map_values(&mut self, mut f: impl FnMut(&ParamEntry<T>) -> Tensor<T>) {
        for e in &mut self.entries {
            e.value = f(e);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                })
                .collect(),
        }
    }

    /// Registers every entry on `g`; trainable entries require gradients.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| g.leaf(e.value.clone(), e.kind == ParamKind::Trainable))
            .collect()
    }

    /// Overwrites values by name from `other`; names and shapes must agree.
    pub fn load_from(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::invalid(
                "load parameters",
                format!("expected {} tensors, found {}", self.entries.len(), named.len()),
            ));
        }
        for e in &mut self.entries {
            let (_, t) = named
                .iter()
                .find(|(n, _)| *n == e.name)
                .ok_or_else(|| Error::invalid("load parameters", format!("missing tensor {:?}", e.name)))?;
            if t.shape() != e.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load parameters",
                    lhs: e.value.shape(),
                    rhs: t.shape(),
                });
            }
            e.value = t.clone();
        }
        Ok(())
    }
}

use indexmap::IndexMap;

use crate::{Error, Float, Result, Tensor};

/// Named learnable tensors, iterated in insertion order.
///
/// Shapes are fixed once a parameter is inserted; only the values may change.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Float> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Invalid {
                op: "ParamSet::insert",
                detail: format!("duplicate parameter name `{name}`"),
            });
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn get_index(&self, index: usize) -> Option<(&str, &Tensor<T>)> {
        self.entries.get_index(index).map(|(k, v)| (k.as_str(), v))
    }

    /// Mutable access to the values of a parameter.
    pub fn values_mut(&mut self, name: &str) -> Result<&mut [T]> {
        self.entries
            .get_mut(name)
            .map(|t| t.data_mut())
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn values_mut_at(&mut self, index: usize) -> &mut [T] {
        self.entries[index].data_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalars across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// A set with the same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    /// Sum `other` into `self`. Names and shapes must agree.
    pub fn accumulate(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Invalid {
                op: "ParamSet::accumulate",
                detail: format!("{} vs {} entries", self.entries.len(), other.entries.len()),
            });
        }
        for ((ka, a), (kb, b)) in self.entries.iter_mut().zip(&other.entries) {
            if ka != kb || a.shape() != b.shape() {
                return Err(Error::Shape {
                    op: "ParamSet::accumulate",
                    detail: format!("{ka}{:?} vs {kb}{:?}", a.shape(), b.shape()),
                });
            }
            a.add_assign(b);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.entries.values_mut() {
            for v in t.data_mut() {
                *v = *v * factor;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected_and_order_kept() {
        let mut p = ParamSet::<f32>::new();
        p.insert("b", Tensor::zeros([2])).unwrap();
        p.insert("a", Tensor::zeros([3])).unwrap();
        assert!(p.insert("b", Tensor::zeros([2])).is_err());
        assert_eq!(p.names().collect::<Vec<_>>(), ["b", "a"]);
        assert_eq!(p.numel(), 5);
    }
}

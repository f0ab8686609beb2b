use super::data::{Scalar, TensorData};
use super::tape::TensorError;

/// Ordered, named collection of tensors.
///
/// Insertion order is the canonical order: `flatten`/`unflatten` and the
/// optimizer steps all walk parameters in this order, so two sets built the
/// same way are element-for-element aligned.
#[derive(Debug, Clone)]
pub struct ParamSet<S: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<TensorData<S>>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    /// Insert a named tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: TensorData<S>) -> Result<(), TensorError> {
        let name = name.into();
        if self.names.iter().any(|n| *n == name) {
            return Err(TensorError::Invalid {
                op: "param_set_insert",
                detail: format!("duplicate parameter name {name:?}"),
            });
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorData<S>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn set(&mut self, name: &str, tensor: TensorData<S>) -> Result<(), TensorError> {
        match self.names.iter().position(|n| n == name) {
            Some(i) => {
                if self.tensors[i].shape() != tensor.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "param_set_set",
                        detail: format!(
                            "{name:?}: {:?} vs {:?}",
                            self.tensors[i].shape(),
                            tensor.shape()
                        ),
                    });
                }
                self.tensors[i] = tensor;
                Ok(())
            }
            None => Err(TensorError::Invalid {
                op: "param_set_set",
                detail: format!("unknown parameter {name:?}"),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar elements across all tensors.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorData<S>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    /// Concatenate all tensors into one vector in insertion order.
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.num_elements());
        for t in &self.tensors {
            out.extend_from_slice(t.as_slice());
        }
        out
    }

    /// Rebuild a set with this set's names/shapes from a flat vector.
    pub fn unflatten(&self, flat: &[S]) -> Result<ParamSet<S>, TensorError> {
        if flat.len() != self.num_elements() {
            return Err(TensorError::ShapeMismatch {
                op: "param_set_unflatten",
                detail: format!("{} elements vs {} expected", flat.len(), self.num_elements()),
            });
        }
        let mut out = ParamSet::new();
        let mut offset = 0;
        for (name, t) in self.iter() {
            let n = t.len();
            out.insert(
                name,
                TensorData::new(t.shape().to_vec(), flat[offset..offset + n].to_vec()),
            )?;
            offset += n;
        }
        Ok(out)
    }

    /// True when both sets have identical names, shapes, and bit-identical values.
    pub fn bit_eq(&self, other: &ParamSet<S>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bit_eq(b))
    }

    /// `self + coeff * other`, matched by order. Shapes must agree.
    pub fn add_scaled(&self, other: &ParamSet<S>, coeff: S) -> Result<ParamSet<S>, TensorError> {
        if self.names != other.names {
            return Err(TensorError::Invalid {
                op: "param_set_add_scaled",
                detail: "parameter name lists differ".into(),
            });
        }
        let mut out = ParamSet::new();
        for ((name, a), (_, b)) in self.iter().zip(other.iter()) {
            out.insert(name, a.add_scaled(b, coeff))?;
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(&TensorData<S>) -> TensorData<S>) -> ParamSet<S> {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            out.insert(name, f(t)).expect("names already unique");
        }
        out
    }
}

impl ParamSet<f32> {
    /// Lossless widening to f64 for verification paths.
    pub fn to_f64(&self) -> ParamSet<f64> {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            let data: Vec<f64> = t.as_slice().iter().map(|&v| v as f64).collect();
            out.insert(name, TensorData::new(t.shape().to_vec(), data)).expect("names unique");
        }
        out
    }
}

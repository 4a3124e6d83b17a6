use std::collections::BTreeMap;

use rand::Rng;

use super::{io, Result, Tensor, TensorError};

/// Named model parameters with a deterministic (lexicographic) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        for (name, t) in &self.tensors {
            let o = other
                .get(name)
                .ok_or_else(|| TensorError::MissingParam(name.clone()))?;
            if o.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "param layout",
                    lhs: t.shape().to_vec(),
                    rhs: o.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = other.names().find(|n| self.get(n).is_none()) {
            return Err(TensorError::UnexpectedParam(extra.to_string()));
        }
        Ok(())
    }

    /// `p ← p − lr·g` for every parameter.
    pub fn sgd_step(&self, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(TensorError::InvalidLearningRate(lr));
        }
        self.check_layout(grads)?;
        let mut out = self.clone();
        for (name, t) in out.tensors.iter_mut() {
            let g = &grads.tensors[name];
            for (v, gv) in t.data_mut().iter_mut().zip(g.data()) {
                *v -= lr * gv;
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        io::write_tensors(&mut buf, self.iter()).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, t) in io::read_tensors(bytes)? {
            out.insert(name, t);
        }
        Ok(out)
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Uniform fan-in initialisation: `U(−√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

//! MLP classifier with a projection head.
//!
//! The trunk is a stack of dense layers. Two linear heads read the last
//! trunk activation: the classifier (`cls.*`) producing logits and the
//! projection (`proj.*`) producing the client-property embedding.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{kaiming_uniform, Graph, ParamSet, Tensor, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    /// Dimension of the projection head; must match the concept dimension.
    pub embed_dim: usize,
    pub activation: Activation,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_dim: 784,
            hidden_dims: vec![64],
            num_classes: 10,
            embed_dim: 10,
            activation: Activation::Relu,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(ModelError::InvalidArch(
                "dimensions must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidArch(
                "num_classes must be at least 2".into(),
            ));
        }
        Ok(())
    }

    pub fn trunk_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    fn layer_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut shapes = Vec::new();
        let mut fan_in = self.input_dim;
        for (i, &h) in self.hidden_dims.iter().enumerate() {
            shapes.push((format!("trunk.{i}"), fan_in, h));
            fan_in = h;
        }
        shapes.push(("cls".into(), fan_in, self.num_classes));
        shapes.push(("proj".into(), fan_in, self.embed_dim));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(_, i, o)| i * o + o).sum()
    }
}

/// Weights drawn with [`kaiming_uniform`]; biases start at zero.
pub fn init_model(arch: &ArchConfig, seed: u64) -> Result<ParamSet, ModelError> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, fan_in, fan_out) in arch.layer_shapes() {
        params.insert(
            format!("{name}.weight"),
            kaiming_uniform(&mut rng, fan_in, &[fan_in, fan_out]),
        );
        params.insert(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]));
    }
    Ok(params)
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    /// Records every parameter on `g`, as trainable leaves or constants.
    pub fn bind(g: &mut Graph, params: &ParamSet, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var, TensorError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collects gradients into a [`ParamSet`] keyed like the bound params.
    pub fn gradients(&self, grads: &crate::tensor::Gradients) -> ParamSet {
        self.vars
            .iter()
            .map(|(name, &v)| (name.clone(), grads.wrt_or_zero(v)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub logits: Var,
    pub embedding: Var,
    /// Last shared hidden representation.
    pub trunk: Var,
}

fn dense(g: &mut Graph, b: &Bindings, name: &str, x: Var) -> Result<Var, TensorError> {
    let w = b.var(&format!("{name}.weight"))?;
    let bias = b.var(&format!("{name}.bias"))?;
    let h = g.matmul(x, w)?;
    g.add_row(h, bias)
}

pub fn forward(
    g: &mut Graph,
    b: &Bindings,
    arch: &ArchConfig,
    x: Var,
) -> Result<ModelOutput, ModelError> {
    let (_, cols) = g.value(x).dims2("forward")?;
    if cols != arch.input_dim {
        return Err(TensorError::ShapeMismatch {
            op: "forward",
            lhs: g.value(x).shape().to_vec(),
            rhs: vec![arch.input_dim],
        }
        .into());
    }
    let mut h = x;
    for i in 0..arch.hidden_dims.len() {
        let pre = dense(g, b, &format!("trunk.{i}"), h)?;
        h = match arch.activation {
            Activation::Relu => g.relu(pre),
            Activation::Tanh => g.tanh(pre),
        };
    }
    let logits = dense(g, b, "cls", h)?;
    let embedding = dense(g, b, "proj", h)?;
    Ok(ModelOutput {
        logits,
        embedding,
        trunk: h,
    })
}

/// Output values of an inference-only forward pass.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Tensor,
    pub embedding: Tensor,
    pub trunk: Tensor,
}

pub fn predict(params: &ParamSet, arch: &ArchConfig, x: &Tensor) -> Result<Prediction, ModelError> {
    let mut g = Graph::new();
    let b = Bindings::bind(&mut g, params, false);
    let xv = g.constant(x.clone());
    let out = forward(&mut g, &b, arch, xv)?;
    Ok(Prediction {
        logits: g.value(out.logits).clone(),
        embedding: g.value(out.embedding).clone(),
        trunk: g.value(out.trunk).clone(),
    })
}

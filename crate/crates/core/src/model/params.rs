use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::attention::{block_layout, BlockRole, ParamSpec};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Prefix of the parameters of stage `s` (0 = encoder).
pub fn stage_prefix(stage: usize) -> String {
    if stage == 0 {
        "enc".to_string()
    } else {
        format!("dec{stage}")
    }
}

/// Every learnable tensor of a model, in canonical order.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (f, c) = (cfg.model_dim, cfg.num_classes);
    let mut out = Vec::new();
    for stage in 0..cfg.stages() {
        let p = stage_prefix(stage);
        let (in_dim, role) = if stage == 0 {
            (cfg.input_dim, BlockRole::Encoder)
        } else {
            (c, BlockRole::Decoder)
        };
        out.push(ParamSpec::weight(format!("{p}.in.w"), vec![f, in_dim, 1]));
        out.push(ParamSpec::bias(format!("{p}.in.b"), f));
        for i in 1..=cfg.blocks_per_stage {
            out.extend(block_layout(
                &format!("{p}.blk{i}"),
                role,
                cfg.cross_qv_mode,
                f,
                cfg.attn_dim,
            ));
        }
        out.push(ParamSpec::weight(format!("{p}.out.w"), vec![c, f, 1]));
        out.push(ParamSpec::bias(format!("{p}.out.b"), c));
    }
    out
}

/// Named parameter tensors in canonical layout order.
#[derive(Clone, PartialEq)]
pub struct ParameterSet<E> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
    index: HashMap<String, usize>,
}

impl<E: Scalar> ParameterSet<E> {
    pub fn from_parts(entries: Vec<(String, Tensor<E>)>) -> Result<Self> {
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        let mut index = HashMap::new();
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate parameter {name}")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            names,
            tensors,
            index,
        })
    }

    /// Weights uniform in `±1/√fan_in`, biases zero, drawn from a ChaCha8
    /// stream seeded with `cfg.seed` in layout order.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let entries = layout(cfg)
            .into_iter()
            .map(|spec| {
                let data = match spec.fan_in {
                    None => vec![E::zero(); spec.numel()],
                    Some(fan_in) => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..spec.numel())
                            .map(|_| E::from_f64(rng.random_range(-bound..bound)))
                            .collect()
                    }
                };
                Ok((spec.name, Tensor::new(spec.shape, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(entries)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<E>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.index.get(name).map(|i| &self.tensors[*i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.index.get(name).map(|i| &mut self.tensors[*i])
    }

    pub fn cast<F: Scalar>(&self) -> ParameterSet<F> {
        ParameterSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Checks names, order and shapes against the layout of `cfg`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = layout(cfg);
        for spec in &expected {
            match self.get(&spec.name) {
                None => return Err(Error::Checkpoint(format!("missing tensor {}", spec.name))),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} has shape {:?}, config expects {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self
            .names
            .iter()
            .find(|n| !expected.iter().any(|s| &s.name == *n))
        {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }

    /// Registers every tensor on `tape`.
    pub fn bind(&self, tape: &mut Tape<E>, requires_grad: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }
}

impl<E: Scalar> std::fmt::Debug for ParameterSet<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(
                self.names
                    .iter()
                    .zip(self.tensors.iter().map(Tensor::shape)),
            )
            .finish()
    }
}

/// Tape handles of a bound [`ParameterSet`], in the same order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    /// Pairs existing tape handles with parameter names, for callers that
    /// register the leaves themselves.
    pub fn from_vars(names: Vec<String>, vars: Vec<Var>) -> Self {
        assert_eq!(names.len(), vars.len(), "one handle per name");
        let index = names.into_iter().enumerate().map(|(i, n)| (n, i)).collect();
        Self { vars, index }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|i| self.vars[*i])
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients of every parameter after a backward pass, zero where none
    /// arrived.
    pub fn take_grads<E: Scalar>(&self, tape: &mut Tape<E>) -> Vec<Tensor<E>> {
        self.vars
            .iter()
            .map(|v| {
                tape.take_grad(*v)
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(*v).to_vec()))
            })
            .collect()
    }
}

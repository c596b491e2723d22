use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LrGroup {
    /// Offline-trained parameters (the text encoder).
    Stage1,
    /// Field embeddings, Base MLP and the optional wide term.
    Base,
    /// RSL module. Pretrained in stage 1, fine-tuned at a reduced rate in stage 2.
    RslFinetune,
    /// Target attention projections and the incentive MLP.
    Prim,
}

impl LrGroup {
    pub const ALL: [LrGroup; 4] = [
        LrGroup::Stage1,
        LrGroup::Base,
        LrGroup::RslFinetune,
        LrGroup::Prim,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LrGroup::Stage1 => "stage1",
            LrGroup::Base => "base",
            LrGroup::RslFinetune => "rsl-finetune",
            LrGroup::Prim => "prim",
        }
    }
}

impl fmt::Display for LrGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LrGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LrGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown learning-rate group `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub group: LrGroup,
}

/// Named parameter collection, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<ParamTensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: LrGroup, value: Tensor) -> Result<ParamId> {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Validation(format!(
                "parameter name `{name}` must be non-empty without whitespace"
            )));
        }
        if self.by_name.contains_key(name) {
            return Err(Error::Validation(format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        let idx = self.params.len();
        self.params.push(ParamTensor {
            name: name.to_string(),
            value,
            grad,
            group,
        });
        self.by_name.insert(name.to_string(), idx);
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Lookup(format!("missing parameter `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamTensor)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Values of every parameter in `group`, for before/after comparisons.
    pub fn snapshot(&self, group: LrGroup) -> Vec<(String, Vec<f64>)> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| (p.name.clone(), p.value.data().to_vec()))
            .collect()
    }
}

/// Deterministic per-parameter initialisation: the stream depends only on
/// `(seed, name)`, so adding or removing other parameters never shifts it.
pub fn uniform_init(seed: u64, name: &str, shape: &[usize], bound: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crate::stable_hash(name));
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("uniform_init: invalid shape")
}

/// Glorot-uniform bound for a `fan_out x fan_in` weight.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

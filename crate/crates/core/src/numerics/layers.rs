use std::fmt;
use std::str::FromStr;

use super::params::{glorot_bound, uniform_init, LrGroup, ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
    Sigmoid,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "linear" => Ok(Activation::Linear),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Validation(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Linear => "linear",
            Activation::Sigmoid => "sigmoid",
        })
    }
}

/// Affine layer `y = act(W x + b)` with `W` stored `out x in`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl Dense {
    /// Registers `<prefix>.w` and `<prefix>.b`: Glorot-uniform weight and zero bias.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        group: LrGroup,
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let wname = format!("{prefix}.w");
        let w = uniform_init(seed, &wname, &[fan_out, fan_in], glorot_bound(fan_in, fan_out));
        let weight = store.add(&wname, group, w)?;
        let bias = store.add(&format!("{prefix}.b"), group, Tensor::zeros(&[fan_out]))?;
        Ok(Dense {
            weight,
            bias,
            activation,
        })
    }

    pub fn from_store(store: &ParamStore, prefix: &str, activation: Activation) -> Result<Self> {
        Ok(Dense {
            weight: store.require(&format!("{prefix}.w"))?,
            bias: store.require(&format!("{prefix}.b"))?,
            activation,
        })
    }

    pub fn fan_in(&self, store: &ParamStore) -> usize {
        store.value(self.weight).cols()
    }

    pub fn fan_out(&self, store: &ParamStore) -> usize {
        store.value(self.weight).rows()
    }

    /// `x W^T + b` without the activation.
    pub fn affine(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        let xw = tape.matmul_nt(x, w)?;
        tape.add_row(xw, b)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let z = self.affine(tape, store, x)?;
        match self.activation {
            Activation::Linear => Ok(z),
            Activation::Relu => tape.relu(z),
            Activation::Sigmoid => tape.sigmoid(z),
        }
    }
}

/// Stack of [`Dense`] layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Layer `i` maps `widths[i] -> widths[i + 1]`. Hidden layers use
    /// `hidden`; the last layer uses `output`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        group: LrGroup,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        seed: u64,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Dimension(format!("invalid MLP widths {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Dense::new(
                    store,
                    &format!("{prefix}.{i}"),
                    group,
                    widths[i],
                    widths[i + 1],
                    act,
                    seed,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn from_store(
        store: &ParamStore,
        prefix: &str,
        depth: usize,
        hidden: Activation,
        output: Activation,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| {
                let act = if i + 1 == depth { output } else { hidden };
                Dense::from_store(store, &format!("{prefix}.{i}"), act)
            })
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        self.layers
            .iter()
            .try_fold(x, |h, layer| layer.forward(tape, store, h))
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }

    /// Zeroes the last layer so the network starts at a constant output.
    pub fn zero_output_layer(&self, store: &mut ParamStore) {
        if let Some(last) = self.layers.last() {
            store.value_mut(last.weight).fill(0.0);
            store.value_mut(last.bias).fill(0.0);
        }
    }
}

//! Parameterized building blocks: linear maps, layer norm and the two-layer MLP.

use super::graph::Var;
use super::params::{ParamBuilder, ParamId};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let mut pb = pb.scoped(name);
        let weight = pb.weight("weight", &[in_dim, out_dim])?;
        let bias = if bias {
            Some(pb.zeros("bias", &[out_dim])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'g>(&self, x: &Var<'g>) -> Result<Var<'g>> {
        let g = x.graph();
        let b = self.bias.map(|b| g.param(b));
        x.linear(&g.param(self.weight), b.as_ref())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::dim("layer_norm over zero channels"));
        }
        let mut pb = pb.scoped(name);
        Ok(Self {
            gamma: pb.ones("gamma", &[dim])?,
            beta: pb.zeros("beta", &[dim])?,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward<'g>(&self, x: &Var<'g>) -> Result<Var<'g>> {
        let g = x.graph();
        x.layer_norm(&g.param(self.gamma), &g.param(self.beta), self.eps)
    }
}

/// `linear → GELU → linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        in_dim: usize,
        hidden_ratio: f64,
        out_dim: usize,
    ) -> Result<Self> {
        if !(hidden_ratio > 0.0) {
            return Err(Error::config(format!("mlp hidden_ratio must be > 0, got {hidden_ratio}")));
        }
        let hidden = ((in_dim as f64 * hidden_ratio).round() as usize).max(1);
        let mut pb = pb.scoped(name);
        Ok(Self {
            fc1: Linear::new(&mut pb, "fc1", in_dim, hidden, true)?,
            fc2: Linear::new(&mut pb, "fc2", hidden, out_dim, true)?,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.fc1.out_dim
    }

    pub fn forward<'g>(&self, x: &Var<'g>) -> Result<Var<'g>> {
        let h = self.fc1.forward(x)?.gelu();
        self.fc2.forward(&h)
    }
}

//! Sparse mixture-of-experts layer: noisy top-k gating, capacity-limited
//! dispatch and the gate-weighted combination of expert outputs.

mod dispatch;
mod gate;
mod layer;

pub use dispatch::{
    dispatch, expert_capacity, write_routing_csv, Capacity, Dispatch, RoutingStats,
};
pub use gate::{
    gate_mixtral, gate_st, router_logits, CapacityFactor, DropPolicy, GateConfig, Gates, RouterType,
};
pub use layer::{dense_ffn, moe_forward, MoeForward};

pub(crate) use layer::{ffn_on_tape, moe_on_tape, FfnVars, MoeVars};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Router weights `W_g` and `W_noise`, both `[hidden x N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub w_g: Tensor,
    pub w_noise: Tensor,
}

impl RouterParams {
    pub fn new(w_g: Tensor, w_noise: Tensor) -> Result<Self> {
        if w_g.shape().len() != 2 || w_g.shape() != w_noise.shape() {
            return Err(Error::shape("router", w_g.shape(), w_noise.shape()));
        }
        if !w_g.is_finite() || !w_noise.is_finite() {
            return Err(Error::Input("router weights must be finite".into()));
        }
        Ok(Self { w_g, w_noise })
    }

    pub fn experts(&self) -> usize {
        self.w_g.cols()
    }
}

/// SwiGLU feed-forward weights: `down(silu(x . w1) * (x . w3))` with
/// `w1`, `w3` of shape `[hidden x ffn]` and `w2` of shape `[ffn x hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
}

impl FfnParams {
    pub fn new(w1: Tensor, w2: Tensor, w3: Tensor) -> Result<Self> {
        let ok = w1.shape().len() == 2
            && w1.shape() == w3.shape()
            && w2.shape() == [w1.cols(), w1.rows()];
        if !ok {
            return Err(Error::shape("ffn", w1.shape(), w2.shape()));
        }
        Ok(Self { w1, w2, w3 })
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn ffn_hidden(&self) -> usize {
        self.w1.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoELayer {
    pub router: RouterParams,
    pub experts: Vec<FfnParams>,
}

impl MoELayer {
    pub fn new(router: RouterParams, experts: Vec<FfnParams>) -> Result<Self> {
        if experts.len() != router.experts() {
            return Err(Error::Config(format!(
                "router has {} outputs but {} experts were given",
                router.experts(),
                experts.len()
            )));
        }
        let first = &experts[0];
        if router.w_g.rows() != first.hidden() {
            return Err(Error::shape(
                "moe layer",
                router.w_g.shape(),
                first.w1.shape(),
            ));
        }
        if let Some(bad) = experts.iter().find(|e| e.w1.shape() != first.w1.shape()) {
            return Err(Error::shape("moe layer", bad.w1.shape(), first.w1.shape()));
        }
        Ok(Self { router, experts })
    }
}

/// Which layers carry experts and how they are gated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeSpec {
    pub gate: GateConfig,
    /// Indices of converted layers, ascending.
    pub layers: Vec<usize>,
}

impl MoeSpec {
    pub fn new(gate: GateConfig, mut layers: Vec<usize>) -> Self {
        layers.sort_unstable();
        layers.dedup();
        Self { gate, layers }
    }

    /// Every one of `n_layers` layers converted.
    pub fn all_layers(gate: GateConfig, n_layers: usize) -> Self {
        Self::new(gate, (0..n_layers).collect())
    }

    pub fn is_moe(&self, layer: usize) -> bool {
        self.layers.binary_search(&layer).is_ok()
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        self.gate.validate()?;
        if let Some(bad) = self.layers.iter().find(|&&l| l >= n_layers) {
            return Err(Error::Config(format!(
                "moe layer index {bad} out of range for {n_layers} layers"
            )));
        }
        Ok(())
    }
}

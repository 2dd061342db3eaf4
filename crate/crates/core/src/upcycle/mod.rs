//! Dense to MoE conversion: experts start as copies of the source FFN and the
//! router starts from seeded random weights.

mod shard;

pub use shard::{
    gather_dense, gather_moe, load_shard, save_shard, shard_dense, upcycle_shard, Shard, ShardSpec,
    Tile,
};

pub use crate::model::MoECheckpoint;

use crate::error::{Error, Result};
use crate::model::{
    expert_name, ffn_name, router_name, schema, DenseCheckpoint, ModelConfig, TensorMap, INIT_STD,
};
use crate::moe::{GateConfig, MoeSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Router weights of `layer`: `W_g ~ Normal(0, 0.02)` drawn row-major from
/// stream `layer` of `router_seed`, and `W_noise = 0`. Every rank that calls
/// this with the same arguments gets the same bits.
pub fn init_router(
    config: &ModelConfig,
    experts: usize,
    layer: usize,
    router_seed: u64,
) -> (Tensor, Tensor) {
    let mut rng = Rng::new(router_seed, layer as u64);
    let shape = vec![config.hidden, experts];
    let w_g = Tensor::from_fn(shape.clone(), |_| rng.normal(0.0, INIT_STD));
    (w_g, Tensor::zeros(shape))
}

pub(crate) fn check_upcycle_args(config: &ModelConfig, spec: &MoeSpec) -> Result<()> {
    if spec.gate.experts < 2 {
        return Err(Error::Config(format!(
            "upcycling needs at least 2 experts, got {}",
            spec.gate.experts
        )));
    }
    spec.validate(config.layers)
}

/// Converts the layers in `layers` (ascending, deduplicated internally) to MoE
/// blocks of `gate.experts` experts, each a bitwise copy of the source FFN.
pub fn upcycle_full(
    dense: &DenseCheckpoint,
    gate: GateConfig,
    layers: &[usize],
    router_seed: u64,
) -> Result<MoECheckpoint> {
    let spec = MoeSpec::new(gate, layers.to_vec());
    check_upcycle_args(&dense.config, &spec)?;
    let n = spec.gate.experts;
    let mut tensors = TensorMap::new();
    for e in schema(&dense.config, Some(&spec)) {
        let t = match (e.layer, e.role) {
            (Some(l), crate::model::TensorRole::Router) => {
                let (w_g, w_noise) = init_router(&dense.config, n, l, router_seed);
                if e.name == router_name(l, "w_g") {
                    w_g
                } else {
                    w_noise
                }
            }
            (Some(l), crate::model::TensorRole::Expert(x)) => {
                let w = e.name.rsplit('.').next().expect("weight suffix");
                debug_assert_eq!(e.name, expert_name(l, x, w));
                dense.tensors[&ffn_name(l, w)].clone()
            }
            _ => dense.tensors[&e.name].clone(),
        };
        tensors.insert(e.name, t);
    }
    MoECheckpoint::new(dense.config.clone(), spec, tensors)
}

/// First difference found by [`verify_equivalence`].
#[derive(Debug, Clone, PartialEq)]
pub struct TensorDiff {
    pub tensor: String,
    pub index: usize,
    pub left: f64,
    pub right: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EquivalenceReport {
    pub tensors_compared: usize,
    /// Names of every tensor that differs, in schema order.
    pub differing: Vec<String>,
    pub first: Option<TensorDiff>,
}

impl EquivalenceReport {
    pub fn is_equal(&self) -> bool {
        self.first.is_none()
    }
}

/// Bitwise comparison of two checkpoints with identical schemas.
pub fn verify_equivalence(a: &MoECheckpoint, b: &MoECheckpoint) -> Result<EquivalenceReport> {
    if a.config != b.config || a.moe != b.moe {
        return Err(Error::Schema("configurations differ".into()));
    }
    if a.tensors.len() != b.tensors.len() {
        return Err(Error::Schema(format!(
            "tensor counts differ: {} vs {}",
            a.tensors.len(),
            b.tensors.len()
        )));
    }
    let mut report = EquivalenceReport::default();
    for (name, ta) in &a.tensors {
        let tb = b
            .tensors
            .get(name)
            .ok_or_else(|| Error::Schema(format!("tensor `{name}` missing on the right")))?;
        if ta.shape() != tb.shape() {
            return Err(Error::Schema(format!(
                "tensor `{name}` shapes differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        report.tensors_compared += 1;
        let diff = ta
            .data()
            .iter()
            .zip(tb.data())
            .position(|(x, y)| x.to_bits() != y.to_bits());
        if let Some(i) = diff {
            report.differing.push(name.clone());
            report.first.get_or_insert(TensorDiff {
                tensor: name.clone(),
                index: i,
                left: ta.data()[i],
                right: tb.data()[i],
            });
        }
    }
    Ok(report)
}

//! Closed-form parameter, FLOP, communication, bubble and memory models.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{build_groups, intra_node_report, validate_plan, Dispatcher, GroupKind, ParallelPlan};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::moe::{GateConfig, MoeSpec};

/// Published reference rows: (name, total params, active params, forward FLOPs).
pub const PUBLISHED_COUNTS: [(&str, f64, f64, f64); 2] = [
    ("Llama 3-8B", 8.0e9, 8.0e9, 4.7e14),
    ("Llama 3-E8T2", 34.4e9, 11.8e9, 7.5e14),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ParamCount {
    pub embedding: u64,
    pub head: u64,
    pub norms: u64,
    pub attention: u64,
    /// FFN weights of layers that stayed dense.
    pub dense_ffn: u64,
    /// `W_g` and `W_noise` of every MoE layer.
    pub router: u64,
    /// All experts of every MoE layer.
    pub experts: u64,
    /// `k` experts per MoE layer.
    pub active_experts: u64,
    pub total: u64,
    pub active: u64,
}

/// Closed-form totals. Active parameters swap each MoE layer's `N` experts for
/// `k` of them and keep the router. A single-expert layer has nothing to route,
/// so it is counted as a dense FFN without a router.
pub fn count_params(model: &ModelConfig, moe: Option<&MoeSpec>) -> ParamCount {
    let (h, f, v) = (
        model.hidden as u64,
        model.ffn_hidden as u64,
        model.vocab as u64,
    );
    let q = (model.heads * model.head_dim()) as u64;
    let kv = model.kv_dim() as u64;
    let ffn = 3 * h * f;
    let mut c = ParamCount {
        embedding: v * h,
        head: h * v,
        norms: h * (2 * model.layers as u64 + 1),
        attention: model.layers as u64 * (2 * h * q + 2 * h * kv),
        ..Default::default()
    };
    for l in 0..model.layers {
        match moe.filter(|m| m.is_moe(l)) {
            Some(m) if m.gate.experts > 1 => {
                let n = m.gate.experts as u64;
                c.router += 2 * h * n;
                c.experts += n * ffn;
                c.active_experts += m.gate.top_k as u64 * ffn;
            }
            _ => c.dense_ffn += ffn,
        }
    }
    let shared = c.embedding + c.head + c.norms + c.attention + c.dense_ffn + c.router;
    c.total = shared + c.experts;
    c.active = shared + c.active_experts;
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FlopConvention {
    /// Forward only: 2 FLOPs per multiply-accumulate.
    #[serde(rename = "2P")]
    TwoP,
    /// Forward plus backward: three times the forward count.
    #[default]
    #[serde(rename = "6P")]
    SixP,
}

impl FlopConvention {
    pub fn multiplier(self) -> f64 {
        match self {
            Self::TwoP => 2.0,
            Self::SixP => 6.0,
        }
    }
}

impl std::str::FromStr for FlopConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "2P" => Ok(Self::TwoP),
            "6P" => Ok(Self::SixP),
            _ => Err(Error::Config(format!(
                "unknown FLOP convention `{s}` (expected 2P | 6P)"
            ))),
        }
    }
}

impl std::fmt::Display for FlopConvention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::TwoP => "2P",
            Self::SixP => "6P",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopReport {
    pub flops: f64,
    /// Active parameters that take part in a matrix product per token.
    pub matmul_params: u64,
    pub attention_flops: f64,
    pub tokens: usize,
    pub convention: FlopConvention,
    pub formula: String,
}

/// `c * (P * T + 2 * L * T^2 * d_q)` where `c` is 2 or 6, `P` the active
/// parameters used in matrix products (everything except the embedding
/// lookup, the norm gains and the noise projection, which is idle outside
/// training), and the second term the full `QK^T` and `PV` products of every
/// layer when `include_attention` is set.
pub fn forward_flops(
    model: &ModelConfig,
    moe: Option<&MoeSpec>,
    tokens: usize,
    convention: FlopConvention,
    include_attention: bool,
) -> Result<FlopReport> {
    if tokens == 0 {
        return Err(Error::Input("FLOP count needs at least one token".into()));
    }
    let c = count_params(model, moe);
    let matmul_params = c.active - c.embedding - c.norms - c.router / 2;
    let mult = convention.multiplier();
    let t = tokens as f64;
    let d_q = (model.heads * model.head_dim()) as f64;
    let attention_flops = if include_attention {
        mult * 2.0 * model.layers as f64 * t * t * d_q
    } else {
        0.0
    };
    let flops = mult * matmul_params as f64 * t + attention_flops;
    let formula = if include_attention {
        format!(
            "{mult} * ({matmul_params} * {tokens} + 2 * {} * {tokens}^2 * {d_q})",
            model.layers
        )
    } else {
        format!("{mult} * {matmul_params} * {tokens}")
    };
    Ok(FlopReport {
        flops,
        matmul_params,
        attention_flops,
        tokens,
        convention,
        formula,
    })
}

/// Bytes moved per layer per rank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CommVolume {
    /// Dispatch plus combine with the plan's dispatcher.
    pub moe_dispatch: f64,
    pub alltoall: f64,
    pub allgather: f64,
    /// Two all-reduces (attention and MLP) in forward.
    pub attention_tp: f64,
    /// Ring exchange of the local K and V chunks.
    pub cp_kv: f64,
}

/// Standard collective cost models with `t` tokens per rank and `b` bytes per
/// element:
/// all-to-all `2 t k h b (ep-1)/ep`, all-gather `2 t (ep-1) h b`,
/// TP all-reduce `2 * 2 t h b (tp-1)/tp`, CP `2 t h (kv_heads/heads) b (cp-1)`.
pub fn comm_volume(
    plan: &ParallelPlan,
    model: &ModelConfig,
    gate: &GateConfig,
    tokens_per_rank: usize,
    bytes_per_elem: f64,
) -> CommVolume {
    let t = tokens_per_rank as f64;
    let h = model.hidden as f64;
    let b = bytes_per_elem;
    let (ep, tp, cp) = (plan.ep as f64, plan.tp as f64, plan.cp as f64);
    let alltoall = 2.0 * t * gate.top_k as f64 * h * b * (ep - 1.0) / ep;
    let allgather = 2.0 * t * (ep - 1.0) * h * b;
    let moe_dispatch = match plan.dispatcher {
        Dispatcher::Alltoall => alltoall,
        Dispatcher::Allgather => allgather,
    };
    CommVolume {
        moe_dispatch,
        alltoall,
        allgather,
        attention_tp: 2.0 * 2.0 * t * h * b * (tp - 1.0) / tp,
        cp_kv: 2.0 * t * h * (model.kv_heads as f64 / model.heads as f64) * b * (cp - 1.0),
    }
}

/// Interleaved 1F1B bubble fraction `(pp-1) / (vp*mb + pp - 1)`.
pub fn pipeline_bubble(pp: usize, vp: usize, microbatches: usize) -> Result<f64> {
    if pp == 0 || vp == 0 || microbatches == 0 {
        return Err(Error::Input(format!(
            "pipeline sizes must be >= 1 (pp {pp}, vp {vp}, microbatches {microbatches})"
        )));
    }
    let p = (pp - 1) as f64;
    Ok(p / ((vp * microbatches) as f64 + p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemoryReport {
    /// Pipeline stage with the largest footprint.
    pub stage: usize,
    /// Expert parameters held per rank on that stage.
    pub expert_params: f64,
    /// All other parameters held per rank on that stage.
    pub other_params: f64,
    pub weights_and_grads: f64,
    pub optimizer: f64,
    pub total: f64,
}

/// Layers of pipeline stage `s`: contiguous, remainder to the early stages.
fn stage_layers(layers: usize, pp: usize, s: usize) -> std::ops::Range<usize> {
    let (base, rem) = (layers / pp, layers % pp);
    let start = s * base + s.min(rem);
    start..start + base + usize::from(s < rem)
}

/// Per-rank bytes under ZeRO-1. Weights and gradients take
/// `2 * bytes_per_param` per held parameter; optimizer state takes
/// `optimizer_multiplier * bytes_per_param` per parameter divided by `edp` for
/// expert weights and `dp` for everything else. Attention, dense FFN,
/// embedding and head are split by `tp`, experts by `etp * ep`; norms and
/// routers are replicated. The embedding lives on the first stage and the
/// final norm and head on the last.
pub fn memory_estimate(
    plan: &ParallelPlan,
    model: &ModelConfig,
    moe: Option<&MoeSpec>,
    bytes_per_param: f64,
    optimizer_multiplier: f64,
) -> MemoryReport {
    let (h, f, v) = (
        model.hidden as f64,
        model.ffn_hidden as f64,
        model.vocab as f64,
    );
    let q = (model.heads * model.head_dim()) as f64;
    let kv = model.kv_dim() as f64;
    let (tp, etp_ep) = (plan.tp as f64, (plan.etp * plan.ep) as f64);
    let pp = plan.pp.max(1);
    let mut worst: Option<MemoryReport> = None;
    for s in 0..pp {
        let mut split_tp = 0.0;
        let mut replicated = 0.0;
        let mut experts = 0.0;
        if s == 0 {
            split_tp += v * h;
        }
        if s == pp - 1 {
            split_tp += h * v;
            replicated += h;
        }
        for l in stage_layers(model.layers, pp, s) {
            split_tp += 2.0 * h * q + 2.0 * h * kv;
            replicated += 2.0 * h;
            match moe.filter(|m| m.is_moe(l) && m.gate.experts > 1) {
                Some(m) => {
                    let n = m.gate.experts as f64;
                    replicated += 2.0 * h * n;
                    experts += n * 3.0 * h * f;
                }
                None => split_tp += 3.0 * h * f,
            }
        }
        let other = split_tp / tp + replicated;
        let expert = experts / etp_ep;
        let weights_and_grads = 2.0 * bytes_per_param * (other + expert);
        let optimizer = optimizer_multiplier
            * bytes_per_param
            * (other / plan.dp as f64 + expert / plan.edp as f64);
        let r = MemoryReport {
            stage: s,
            expert_params: expert,
            other_params: other,
            weights_and_grads,
            optimizer,
            total: weights_and_grads + optimizer,
        };
        if worst.is_none_or(|w| r.total > w.total) {
            worst = Some(r);
        }
    }
    worst.expect("at least one stage")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostOptions {
    pub tokens_per_rank: usize,
    pub flop_tokens: usize,
    pub convention: FlopConvention,
    pub include_attention: bool,
    pub bytes_per_param: f64,
    pub optimizer_multiplier: f64,
}

impl CostOptions {
    pub fn for_model(model: &ModelConfig) -> Self {
        Self {
            tokens_per_rank: model.seq_len,
            flop_tokens: model.seq_len,
            convention: FlopConvention::SixP,
            include_attention: true,
            bytes_per_param: 2.0,
            optimizer_multiplier: 12.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub intra_node: BTreeMap<GroupKind, bool>,
    pub comm: CommVolume,
    pub params: ParamCount,
    pub flops: FlopReport,
    pub bubble: f64,
    pub memory: MemoryReport,
}

impl CostReport {
    /// One `(metric, value)` record per reported quantity.
    pub fn records(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .intra_node
            .iter()
            .map(|(k, v)| (format!("intra_node.{}", k.name()), v.to_string()))
            .collect();
        let nums = [
            ("comm.moe_dispatch_bytes", self.comm.moe_dispatch),
            ("comm.alltoall_bytes", self.comm.alltoall),
            ("comm.allgather_bytes", self.comm.allgather),
            ("comm.attention_tp_bytes", self.comm.attention_tp),
            ("comm.cp_kv_bytes", self.comm.cp_kv),
            ("params.total", self.params.total as f64),
            ("params.active", self.params.active as f64),
            ("flops.forward", self.flops.flops),
            ("pipeline.bubble", self.bubble),
            ("memory.expert_params_per_rank", self.memory.expert_params),
            ("memory.other_params_per_rank", self.memory.other_params),
            (
                "memory.weights_and_grads_bytes",
                self.memory.weights_and_grads,
            ),
            ("memory.optimizer_bytes", self.memory.optimizer),
            ("memory.total_bytes", self.memory.total),
        ];
        out.extend(nums.iter().map(|(k, v)| (k.to_string(), v.to_string())));
        out.push(("flops.formula".into(), self.flops.formula.clone()));
        out
    }
}

/// Validates `plan` and evaluates every calculator on it.
pub fn cost_report(
    plan: &ParallelPlan,
    model: &ModelConfig,
    moe: Option<&MoeSpec>,
    opts: CostOptions,
) -> Result<CostReport> {
    validate_plan(plan, model, moe.map(|m| &m.gate))?;
    let groups = build_groups(plan);
    let gate = moe.map_or_else(|| GateConfig::new(1, 1), |m| m.gate.clone());
    Ok(CostReport {
        intra_node: intra_node_report(&groups, plan.node_size),
        comm: comm_volume(
            plan,
            model,
            &gate,
            opts.tokens_per_rank,
            opts.bytes_per_param,
        ),
        params: count_params(model, moe),
        flops: forward_flops(
            model,
            moe,
            opts.flop_tokens,
            opts.convention,
            opts.include_attention,
        )?,
        bubble: pipeline_bubble(plan.pp, plan.vp, plan.microbatches)?,
        memory: memory_estimate(
            plan,
            model,
            moe,
            opts.bytes_per_param,
            opts.optimizer_multiplier,
        ),
    })
}

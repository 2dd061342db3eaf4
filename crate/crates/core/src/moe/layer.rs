//! Gate-weighted combination of expert outputs, on and off the tape.

use super::dispatch::{dispatch, expert_capacity, Dispatch, RoutingStats};
use super::gate::{gates_on_tape, router_on_tape, GateConfig, Gates};
use super::{FfnParams, MoELayer};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnVars {
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
}

impl FfnVars {
    pub fn constants(tape: &mut Tape, p: &FfnParams) -> Self {
        Self {
            w1: tape.constant(p.w1.clone()),
            w2: tape.constant(p.w2.clone()),
            w3: tape.constant(p.w3.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct MoeVars {
    pub w_g: Var,
    pub w_noise: Var,
    pub experts: Vec<FfnVars>,
}

impl MoeVars {
    pub fn constants(tape: &mut Tape, layer: &MoELayer) -> Self {
        Self {
            w_g: tape.constant(layer.router.w_g.clone()),
            w_noise: tape.constant(layer.router.w_noise.clone()),
            experts: layer
                .experts
                .iter()
                .map(|e| FfnVars::constants(tape, e))
                .collect(),
        }
    }
}

pub(crate) fn ffn_on_tape(tape: &mut Tape, x: Var, w: &FfnVars) -> Result<Var> {
    let gate = tape.matmul(x, w.w1)?;
    let gate = tape.silu(gate);
    let up = tape.matmul(x, w.w3)?;
    let h = tape.mul(gate, up)?;
    tape.matmul(h, w.w2)
}

pub(crate) struct MoeOnTape {
    pub y: Var,
    pub gates: Gates,
    pub dispatch: Dispatch,
    /// Importance penalty `coef * CV^2` of per-expert gate mass, when enabled.
    pub aux: Option<Var>,
}

/// Routes the rows of `x` through the experts. Experts are visited in index
/// order and each token's contributions are summed in that order, so the
/// result does not depend on how expert work is scheduled.
pub(crate) fn moe_on_tape(
    tape: &mut Tape,
    x: Var,
    vars: &MoeVars,
    cfg: &GateConfig,
    noise: Option<&mut Rng>,
) -> Result<MoeOnTape> {
    cfg.validate()?;
    if vars.experts.len() != cfg.experts {
        return Err(Error::Config(format!(
            "gate expects {} experts, layer has {}",
            cfg.experts,
            vars.experts.len()
        )));
    }
    let (tokens, hidden) = (tape.value(x).rows(), tape.value(x).cols());
    let noise = if cfg.noise { noise } else { None };
    let h = router_on_tape(tape, x, vars.w_g, vars.w_noise, noise)?;
    if !tape.value(h).is_finite() {
        return Err(Error::Input("router logits must be finite".into()));
    }
    let (g, selected) = gates_on_tape(tape, h, cfg.top_k, cfg.router_type)?;
    let gates = Gates {
        weights: tape.value(g).clone(),
        selected,
    };
    let capacity = expert_capacity(tokens, cfg.experts, cfg.cf)?;
    let routed = dispatch(&gates, capacity, cfg.drop_policy);

    let n = cfg.experts;
    let mut parts = Vec::new();
    for (e, tokens_e) in routed.assignments.iter().enumerate() {
        if tokens_e.is_empty() {
            continue;
        }
        let xe = tape.gather_rows(x, tokens_e)?;
        let ye = ffn_on_tape(tape, xe, &vars.experts[e])?;
        let flat: Vec<usize> = tokens_e.iter().map(|t| t * n + e).collect();
        let ge = tape.gather_elems(g, &flat)?;
        parts.push((tape.scale_rows(ye, ge)?, tokens_e.clone()));
    }
    let y = tape.scatter_add(tokens, hidden, parts)?;

    let aux = if cfg.importance_loss > 0.0 {
        Some(importance_penalty(tape, g, tokens, n, cfg.importance_loss)?)
    } else {
        None
    };
    Ok(MoeOnTape {
        y,
        gates,
        dispatch: routed,
        aux,
    })
}

/// `coef * CV^2` of the per-expert importance `I_e = sum_t g[t, e]`, written as
/// `coef * (N * sum(I^2) / sum(I)^2 - 1)`.
fn importance_penalty(tape: &mut Tape, g: Var, tokens: usize, n: usize, coef: f64) -> Result<Var> {
    let ones = tape.constant(Tensor::from_fn(vec![1, tokens], |_| 1.0));
    let importance = tape.matmul(ones, g)?;
    let total = tape.sum(importance);
    let sq = tape.mul(importance, importance)?;
    let sq = tape.sum(sq);
    let inv = tape.recip(total);
    let inv2 = tape.mul(inv, inv)?;
    let ratio = tape.mul(sq, inv2)?;
    let ratio = tape.scale(ratio, n as f64);
    let minus_one = tape.constant(Tensor::scalar(-1.0));
    let cv2 = tape.add(ratio, minus_one)?;
    Ok(tape.scale(cv2, coef))
}

/// Output of one MoE layer evaluated outside a training step.
#[derive(Debug, Clone)]
pub struct MoeForward {
    pub y: Tensor,
    pub gates: Gates,
    pub dispatch: Dispatch,
}

impl MoeForward {
    pub fn stats(&self) -> &RoutingStats {
        &self.dispatch.stats
    }
}

/// `y_t = sum over surviving slots of g[t, e] * E_e(x_t)`.
///
/// Router noise is drawn from `rng` only when `cfg.noise` is set and an rng is
/// supplied; passing `None` is evaluation mode.
pub fn moe_forward(
    x: &Tensor,
    layer: &MoELayer,
    cfg: &GateConfig,
    rng: Option<&mut Rng>,
) -> Result<MoeForward> {
    if !x.is_finite() {
        return Err(Error::Input("moe input must be finite".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = MoeVars::constants(&mut tape, layer);
    let out = moe_on_tape(&mut tape, xv, &vars, cfg, rng)?;
    Ok(MoeForward {
        y: tape.value(out.y).clone(),
        gates: out.gates,
        dispatch: out.dispatch,
    })
}

/// The SwiGLU FFN applied to every row of `x`.
pub fn dense_ffn(x: &Tensor, ffn: &FfnParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = FfnVars::constants(&mut tape, ffn);
    let y = ffn_on_tape(&mut tape, xv, &w)?;
    Ok(tape.value(y).clone())
}

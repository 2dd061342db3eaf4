//! Decoder forward pass: pre-RMSNorm blocks with causal GQA and SwiGLU (or
//! MoE) feed-forward layers, followed by an untied output head.

use super::{expert_name, ffn_name, layer_prefix, router_name, ModelRef, Positional, TensorMap};
use super::{NORM_EPS, ROPE_THETA};
use crate::autograd::{AttentionGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::moe::{ffn_on_tape, moe_on_tape, FfnVars, Gates, MoeVars, RoutingStats};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Puts every tensor of `tensors` on the tape, in map order.
pub(crate) fn bind(tape: &mut Tape, tensors: &TensorMap, trainable: bool) -> Vec<Var> {
    tensors
        .values()
        .map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect()
}

/// Routing record of one MoE layer for one forward pass.
#[derive(Debug, Clone)]
pub struct MoeTrace {
    pub layer: usize,
    /// Normalised input to the MoE block, `[tokens x hidden]`.
    pub input: Tensor,
    /// Block output before the residual add.
    pub output: Tensor,
    pub gates: Gates,
    pub stats: RoutingStats,
    /// `(token, expert)` slots rejected for capacity.
    pub dropped: Vec<(usize, usize)>,
}

pub(crate) struct TapeForward {
    pub logits: Var,
    pub traces: Vec<MoeTrace>,
    /// Sum of the MoE importance penalties, if any layer has one.
    pub aux: Option<Var>,
}

fn split_batch(model: &ModelRef<'_>, tokens: &[usize], batch: usize) -> Result<usize> {
    if tokens.is_empty() || batch == 0 || !tokens.len().is_multiple_of(batch) {
        return Err(Error::Input(format!(
            "{} tokens cannot be split into {batch} sequences",
            tokens.len()
        )));
    }
    let seq = tokens.len() / batch;
    if seq > model.config.seq_len {
        return Err(Error::Input(format!(
            "sequence length {seq} exceeds seq_len {}",
            model.config.seq_len
        )));
    }
    Ok(seq)
}

/// Builds the forward graph for `batch` equal-length sequences laid out
/// back to back in `tokens`. `vars` must come from [`bind`] on the same map.
pub(crate) fn forward_on_tape(
    tape: &mut Tape,
    model: ModelRef<'_>,
    vars: &[Var],
    tokens: &[usize],
    batch: usize,
    mut noise: Option<&mut Rng>,
    record: bool,
) -> Result<TapeForward> {
    let cfg = model.config;
    let seq = split_batch(&model, tokens, batch)?;
    let var = |name: &str| -> Result<Var> {
        model
            .tensors
            .get_index_of(name)
            .map(|i| vars[i])
            .ok_or_else(|| Error::Schema(format!("missing tensor `{name}`")))
    };
    let geom = AttentionGeometry {
        batch,
        seq,
        heads: cfg.heads,
        kv_heads: cfg.kv_heads,
        head_dim: cfg.head_dim(),
    };

    let mut x = tape.embedding(var("embed.weight")?, tokens)?;
    let mut traces = Vec::new();
    let mut aux: Option<Var> = None;
    for l in 0..cfg.layers {
        let p = layer_prefix(l);
        let n = tape.rms_norm(x, var(&format!("{p}.attn_norm"))?, NORM_EPS)?;
        let mut q = tape.matmul(n, var(&format!("{p}.attn.wq"))?)?;
        let mut k = tape.matmul(n, var(&format!("{p}.attn.wk"))?)?;
        let v = tape.matmul(n, var(&format!("{p}.attn.wv"))?)?;
        if cfg.positional == Positional::Rotary {
            q = tape.rotary(q, seq, cfg.head_dim(), ROPE_THETA)?;
            k = tape.rotary(k, seq, cfg.head_dim(), ROPE_THETA)?;
        }
        let a = tape.attention(q, k, v, geom)?;
        let o = tape.matmul(a, var(&format!("{p}.attn.wo"))?)?;
        x = tape.add(x, o)?;

        let n = tape.rms_norm(x, var(&format!("{p}.ffn_norm"))?, NORM_EPS)?;
        let f = match model.moe.filter(|m| m.is_moe(l)) {
            Some(spec) => {
                let mv = MoeVars {
                    w_g: var(&router_name(l, "w_g"))?,
                    w_noise: var(&router_name(l, "w_noise"))?,
                    experts: (0..spec.gate.experts)
                        .map(|e| {
                            Ok(FfnVars {
                                w1: var(&expert_name(l, e, "w1"))?,
                                w2: var(&expert_name(l, e, "w2"))?,
                                w3: var(&expert_name(l, e, "w3"))?,
                            })
                        })
                        .collect::<Result<_>>()?,
                };
                let out = moe_on_tape(tape, n, &mv, &spec.gate, noise.as_deref_mut())?;
                if let Some(a) = out.aux {
                    aux = Some(match aux {
                        Some(prev) => tape.add(prev, a)?,
                        None => a,
                    });
                }
                let (input, output) = if record {
                    (tape.value(n).clone(), tape.value(out.y).clone())
                } else {
                    (Tensor::zeros(vec![0]), Tensor::zeros(vec![0]))
                };
                traces.push(MoeTrace {
                    layer: l,
                    input,
                    output,
                    gates: out.gates,
                    stats: out.dispatch.stats,
                    dropped: out.dispatch.dropped,
                });
                out.y
            }
            None => {
                let w = FfnVars {
                    w1: var(&ffn_name(l, "w1"))?,
                    w2: var(&ffn_name(l, "w2"))?,
                    w3: var(&ffn_name(l, "w3"))?,
                };
                ffn_on_tape(tape, n, &w)?
            }
        };
        x = tape.add(x, f)?;
    }
    let n = tape.rms_norm(x, var("final_norm")?, NORM_EPS)?;
    let logits = tape.matmul(n, var("lm_head")?)?;
    Ok(TapeForward {
        logits,
        traces,
        aux,
    })
}

/// Mean next-token cross-entropy plus any MoE importance penalty, built on
/// `tape`. `vars` holds one variable per tensor of `model`, in map order.
pub fn loss_on_tape(
    tape: &mut Tape,
    model: ModelRef<'_>,
    vars: &[Var],
    tokens: &[usize],
    targets: &[usize],
    batch: usize,
    noise: Option<&mut Rng>,
) -> Result<Var> {
    if vars.len() != model.tensors.len() {
        return Err(Error::Input(format!(
            "{} variables for {} tensors",
            vars.len(),
            model.tensors.len()
        )));
    }
    let out = forward_on_tape(tape, model, vars, tokens, batch, noise, false)?;
    let ce = tape.cross_entropy(out.logits, targets)?;
    match out.aux {
        Some(a) => tape.add(ce, a),
        None => Ok(ce),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Number of equal-length sequences in the token buffer.
    pub batch: usize,
    /// Keep MoE block inputs and outputs in the traces.
    pub record: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            batch: 1,
            record: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch * seq x vocab]`.
    pub logits: Tensor,
    pub traces: Vec<MoeTrace>,
    /// Multiply-accumulates performed by matrix products and attention.
    pub macs: u64,
}

/// Evaluation-mode forward pass; router noise is drawn only if `noise` is given.
pub fn forward(
    model: ModelRef<'_>,
    tokens: &[usize],
    opts: ForwardOptions,
    noise: Option<&mut Rng>,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, model.tensors, false);
    let before = tape.macs();
    let out = forward_on_tape(
        &mut tape,
        model,
        &vars,
        tokens,
        opts.batch,
        noise,
        opts.record,
    )?;
    Ok(ForwardOutput {
        logits: tape.value(out.logits).clone(),
        traces: out.traces,
        macs: tape.macs() - before,
    })
}

/// Logits `[len x vocab]` of a single sequence, noise off.
pub fn forward_logits(model: ModelRef<'_>, tokens: &[usize]) -> Result<Tensor> {
    Ok(forward(model, tokens, ForwardOptions::default(), None)?.logits)
}

/// Mean token negative log-likelihood.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, targets)?;
    Ok(tape.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DenseCheckpoint, ModelConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            vocab: 32,
            hidden: 16,
            layers: 2,
            heads: 4,
            kv_heads: 2,
            ffn_hidden: 24,
            seq_len: 8,
            positional: Positional::Rotary,
        }
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = DenseCheckpoint::zeros(small()).unwrap();
        let logits = forward_logits(m.view(), &[1, 2, 3]).unwrap();
        assert!(logits.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn out_of_range_token_is_input_error() {
        let m = DenseCheckpoint::init(small(), 1).unwrap();
        assert!(matches!(
            forward_logits(m.view(), &[32]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            forward_logits(m.view(), &[0; 9]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn causal_prefix_is_unaffected_by_later_tokens() {
        let m = DenseCheckpoint::init(small(), 2).unwrap();
        let a = forward_logits(m.view(), &[3, 5, 7, 7, 1]).unwrap();
        let b = forward_logits(m.view(), &[3, 5, 9, 2, 6]).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
    }

    #[test]
    fn uniform_logits_loss_is_log_vocab() {
        let logits = Tensor::zeros(vec![3, 512]);
        let l = cross_entropy(&logits, &[0, 100, 511]).unwrap();
        assert!((l - 512f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&logits, &[]).is_err());
    }

    #[test]
    fn batched_rows_match_single_sequence_runs() {
        let m = DenseCheckpoint::init(small(), 3).unwrap();
        let a = forward_logits(m.view(), &[1, 2, 3, 4]).unwrap();
        let b = forward_logits(m.view(), &[9, 8, 7, 6]).unwrap();
        let opts = ForwardOptions {
            batch: 2,
            record: false,
        };
        let both = forward(m.view(), &[1, 2, 3, 4, 9, 8, 7, 6], opts, None).unwrap();
        for r in 0..4 {
            for (x, y) in both.logits.row(r).iter().zip(a.row(r)) {
                assert!((x - y).abs() < 1e-14);
            }
            for (x, y) in both.logits.row(r + 4).iter().zip(b.row(r)) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }
}

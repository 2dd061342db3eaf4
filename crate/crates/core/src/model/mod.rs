//! Llama-style decoder: configuration, tensor schema, initialisation and the
//! dense / MoE checkpoint containers.

mod checkpoint;
mod forward;

pub use checkpoint::{
    load_bundle, load_checkpoint, load_moe_checkpoint, save_bundle, save_checkpoint, BundleKind,
    Dtype, Manifest, TensorRecord, FORMAT_VERSION,
};
pub use forward::{
    cross_entropy, forward, forward_logits, loss_on_tape, ForwardOptions, ForwardOutput, MoeTrace,
};

pub(crate) use forward::{bind, forward_on_tape};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{FfnParams, MoELayer, MoeSpec, RouterParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Named tensors in schema order.
pub type TensorMap = IndexMap<String, Tensor>;

pub const NORM_EPS: f64 = 1e-6;
pub const ROPE_THETA: f64 = 10_000.0;
/// Standard deviation of every randomly initialised weight matrix.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    #[default]
    None,
    Rotary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub ffn_hidden: usize,
    pub seq_len: usize,
    #[serde(default)]
    pub positional: Positional,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            vocab: 512,
            hidden: 64,
            layers: 4,
            heads: 4,
            kv_heads: 2,
            ffn_hidden: 256,
            seq_len: 128,
            positional: Positional::None,
        }
    }

    /// Llama 3-8B geometry (weights are not shipped).
    pub fn llama3_8b() -> Self {
        Self {
            vocab: 128_256,
            hidden: 4096,
            layers: 32,
            heads: 32,
            kv_heads: 8,
            ffn_hidden: 14_336,
            seq_len: 8192,
            positional: Positional::Rotary,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab", self.vocab),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("kv_heads", self.kv_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return Err(Error::Config(format!(
                "heads ({}) must be divisible by kv_heads ({})",
                self.heads, self.kv_heads
            )));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden ({}) must be divisible by heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.positional == Positional::Rotary && !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary embedding needs an even head dim, got {}",
                self.head_dim()
            )));
        }
        Ok(())
    }
}

pub fn layer_prefix(layer: usize) -> String {
    format!("layers.{layer}")
}

pub fn ffn_name(layer: usize, w: &str) -> String {
    format!("layers.{layer}.ffn.{w}")
}

pub fn router_name(layer: usize, w: &str) -> String {
    format!("layers.{layer}.moe.router.{w}")
}

pub fn expert_name(layer: usize, expert: usize, w: &str) -> String {
    format!("layers.{layer}.moe.experts.{expert}.{w}")
}

/// What a tensor is, as far as counting and sharding are concerned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Embedding,
    Norm,
    Attention,
    /// Dense FFN weight `w1`, `w2` or `w3`.
    Ffn,
    Router,
    /// Expert FFN weight of expert `.0`.
    Expert(usize),
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
    /// Owning layer for per-layer tensors.
    pub layer: Option<usize>,
}

/// Ordered tensor names and shapes implied by `config` (and `moe`, if any).
/// Converted layers carry a router and `N` expert FFNs instead of `ffn.*`.
pub fn schema(config: &ModelConfig, moe: Option<&MoeSpec>) -> Vec<SchemaEntry> {
    let (h, f, v) = (config.hidden, config.ffn_hidden, config.vocab);
    let q = config.heads * config.head_dim();
    let kv = config.kv_dim();
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, role, layer| {
        out.push(SchemaEntry {
            name,
            shape,
            role,
            layer,
        })
    };
    push(
        "embed.weight".into(),
        vec![v, h],
        TensorRole::Embedding,
        None,
    );
    for l in 0..config.layers {
        let p = layer_prefix(l);
        let at = Some(l);
        push(format!("{p}.attn_norm"), vec![h], TensorRole::Norm, at);
        push(
            format!("{p}.attn.wq"),
            vec![h, q],
            TensorRole::Attention,
            at,
        );
        push(
            format!("{p}.attn.wk"),
            vec![h, kv],
            TensorRole::Attention,
            at,
        );
        push(
            format!("{p}.attn.wv"),
            vec![h, kv],
            TensorRole::Attention,
            at,
        );
        push(
            format!("{p}.attn.wo"),
            vec![q, h],
            TensorRole::Attention,
            at,
        );
        push(format!("{p}.ffn_norm"), vec![h], TensorRole::Norm, at);
        match moe.filter(|m| m.is_moe(l)) {
            Some(m) => {
                let n = m.gate.experts;
                push(router_name(l, "w_g"), vec![h, n], TensorRole::Router, at);
                push(
                    router_name(l, "w_noise"),
                    vec![h, n],
                    TensorRole::Router,
                    at,
                );
                for e in 0..n {
                    push(
                        expert_name(l, e, "w1"),
                        vec![h, f],
                        TensorRole::Expert(e),
                        at,
                    );
                    push(
                        expert_name(l, e, "w2"),
                        vec![f, h],
                        TensorRole::Expert(e),
                        at,
                    );
                    push(
                        expert_name(l, e, "w3"),
                        vec![h, f],
                        TensorRole::Expert(e),
                        at,
                    );
                }
            }
            None => {
                push(ffn_name(l, "w1"), vec![h, f], TensorRole::Ffn, at);
                push(ffn_name(l, "w2"), vec![f, h], TensorRole::Ffn, at);
                push(ffn_name(l, "w3"), vec![h, f], TensorRole::Ffn, at);
            }
        }
    }
    push("final_norm".into(), vec![h], TensorRole::Norm, None);
    push("lm_head".into(), vec![h, v], TensorRole::Head, None);
    out
}

/// Checks that `tensors` holds exactly the schema's names and shapes, all finite.
pub fn validate_tensors(
    config: &ModelConfig,
    moe: Option<&MoeSpec>,
    tensors: &TensorMap,
) -> Result<()> {
    config.validate()?;
    if let Some(m) = moe {
        m.validate(config.layers)?;
    }
    let entries = schema(config, moe);
    for e in &entries {
        let t = tensors
            .get(&e.name)
            .ok_or_else(|| Error::Schema(format!("missing tensor `{}`", e.name)))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Schema(format!(
                "tensor `{}` has shape {:?}, schema expects {:?}",
                e.name,
                t.shape(),
                e.shape
            )));
        }
        if !t.is_finite() {
            return Err(Error::Schema(format!("tensor `{}` is not finite", e.name)));
        }
    }
    if tensors.len() != entries.len() {
        let extra = tensors
            .keys()
            .find(|k| !entries.iter().any(|e| &e.name == *k))
            .cloned()
            .unwrap_or_default();
        return Err(Error::Schema(format!("unexpected tensor `{extra}`")));
    }
    Ok(())
}

/// Borrowed view of any model: dense when `moe` is `None`.
#[derive(Debug, Clone, Copy)]
pub struct ModelRef<'a> {
    pub config: &'a ModelConfig,
    pub moe: Option<&'a MoeSpec>,
    pub tensors: &'a TensorMap,
}

impl ModelRef<'_> {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Schema(format!("missing tensor `{name}`")))
    }

    pub fn ffn(&self, layer: usize) -> Result<FfnParams> {
        FfnParams::new(
            self.tensor(&ffn_name(layer, "w1"))?.clone(),
            self.tensor(&ffn_name(layer, "w2"))?.clone(),
            self.tensor(&ffn_name(layer, "w3"))?.clone(),
        )
    }

    pub fn moe_layer(&self, layer: usize) -> Result<MoELayer> {
        let spec = self
            .moe
            .filter(|m| m.is_moe(layer))
            .ok_or_else(|| Error::Config(format!("layer {layer} is not an MoE layer")))?;
        let router = RouterParams::new(
            self.tensor(&router_name(layer, "w_g"))?.clone(),
            self.tensor(&router_name(layer, "w_noise"))?.clone(),
        )?;
        let experts = (0..spec.gate.experts)
            .map(|e| {
                FfnParams::new(
                    self.tensor(&expert_name(layer, e, "w1"))?.clone(),
                    self.tensor(&expert_name(layer, e, "w2"))?.clone(),
                    self.tensor(&expert_name(layer, e, "w3"))?.clone(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        MoELayer::new(router, experts)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// Mutable view used by the training loop.
#[derive(Debug)]
pub struct ModelMut<'a> {
    pub config: &'a ModelConfig,
    pub moe: Option<&'a MoeSpec>,
    pub tensors: &'a mut TensorMap,
}

impl ModelMut<'_> {
    pub fn view(&self) -> ModelRef<'_> {
        ModelRef {
            config: self.config,
            moe: self.moe,
            tensors: self.tensors,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseCheckpoint {
    pub config: ModelConfig,
    pub tensors: TensorMap,
}

impl DenseCheckpoint {
    pub fn new(config: ModelConfig, tensors: TensorMap) -> Result<Self> {
        validate_tensors(&config, None, &tensors)?;
        Ok(Self { config, tensors })
    }

    /// Normal(0, 0.02) weights with unit norm gains. Tensor `i` of the schema
    /// draws from stream `i` of `seed`, so each tensor is reproducible alone.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tensors = schema(&config, None)
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                let t = match e.role {
                    TensorRole::Norm => Tensor::from_fn(e.shape, |_| 1.0),
                    _ => {
                        let mut rng = Rng::new(seed, i as u64);
                        Tensor::from_fn(e.shape, |_| rng.normal(0.0, INIT_STD))
                    }
                };
                (e.name, t)
            })
            .collect();
        Ok(Self { config, tensors })
    }

    /// Every weight zero, norm gains one.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = schema(&config, None)
            .into_iter()
            .map(|e| {
                let t = match e.role {
                    TensorRole::Norm => Tensor::from_fn(e.shape, |_| 1.0),
                    _ => Tensor::zeros(e.shape),
                };
                (e.name, t)
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn view(&self) -> ModelRef<'_> {
        ModelRef {
            config: &self.config,
            moe: None,
            tensors: &self.tensors,
        }
    }

    pub fn view_mut(&mut self) -> ModelMut<'_> {
        ModelMut {
            config: &self.config,
            moe: None,
            tensors: &mut self.tensors,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoECheckpoint {
    pub config: ModelConfig,
    pub moe: MoeSpec,
    pub tensors: TensorMap,
}

impl MoECheckpoint {
    pub fn new(config: ModelConfig, moe: MoeSpec, tensors: TensorMap) -> Result<Self> {
        validate_tensors(&config, Some(&moe), &tensors)?;
        Ok(Self {
            config,
            moe,
            tensors,
        })
    }

    pub fn view(&self) -> ModelRef<'_> {
        ModelRef {
            config: &self.config,
            moe: Some(&self.moe),
            tensors: &self.tensors,
        }
    }

    pub fn view_mut(&mut self) -> ModelMut<'_> {
        ModelMut {
            config: &self.config,
            moe: Some(&self.moe),
            tensors: &mut self.tensors,
        }
    }
}

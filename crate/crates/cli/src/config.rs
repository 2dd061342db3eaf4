//! One TOML run config with command-scoped sections. Command-line flags
//! override file values, which override built-in defaults.

use std::path::{Path, PathBuf};

use moe_upcycle::model::{Dtype, ModelConfig};
use moe_upcycle::moe::{CapacityFactor, GateConfig, RouterType};
use moe_upcycle::plan::{FlopConvention, ParallelPlan};
use moe_upcycle::train::{AblationConfig, DataConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model init, router init and router noise; also the data seed
    /// when `[data]` is absent.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub upcycle: UpcycleSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<ParallelPlan>,
    #[serde(default)]
    pub cost: CostSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub ablate: AblateSection,
    #[serde(default)]
    pub flops: FlopsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpcycleSection {
    /// Dense checkpoint directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense: Option<PathBuf>,
    /// MoE layers; all layers when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    #[serde(default = "one")]
    pub tp: usize,
    #[serde(default = "one")]
    pub ep: usize,
    #[serde(default)]
    pub dtype: Dtype,
    #[serde(default)]
    pub verify: bool,
}

impl Default for UpcycleSection {
    fn default() -> Self {
        Self {
            dense: None,
            layers: None,
            tp: 1,
            ep: 1,
            dtype: Dtype::default(),
            verify: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    /// Tokens per rank for communication volumes; model seq_len when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_per_rank: Option<usize>,
    /// Tokens for the FLOP count; model seq_len when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flop_tokens: Option<usize>,
    #[serde(default)]
    pub convention: FlopConvention,
    #[serde(default = "yes")]
    pub include_attention: bool,
    #[serde(default = "two")]
    pub bytes_per_param: f64,
    #[serde(default = "twelve")]
    pub optimizer_multiplier: f64,
}

fn two() -> f64 {
    2.0
}
fn twelve() -> f64 {
    12.0
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            tokens_per_rank: None,
            flop_tokens: None,
            convention: FlopConvention::SixP,
            include_attention: true,
            bytes_per_param: 2.0,
            optimizer_multiplier: 12.0,
        }
    }
}

fn eight() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Checkpoint to train from (dense or MoE) or to evaluate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    /// Upcycle a dense starting point with `[gate]` before training.
    #[serde(default)]
    pub moe: bool,
    /// Held-out batches for `eval`.
    #[serde(default = "eight")]
    pub eval_batches: usize,
    #[serde(default)]
    pub dtype: Dtype,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            init: None,
            moe: false,
            eval_batches: 8,
            dtype: Dtype::default(),
        }
    }
}

/// A capacity factor or router name as written in the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Number(f64),
    Name(String),
}

impl std::fmt::Display for AxisValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Number(v) => write!(f, "{v}"),
            Self::Name(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    /// `cf` or `router_type`.
    #[serde(default = "default_axis")]
    pub axis: String,
    #[serde(default = "default_values")]
    pub values: Vec<AxisValue>,
    /// MoE layers; all layers when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    /// Dense training before upcycling; the desk default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<TrainConfig>,
}

fn default_axis() -> String {
    "router_type".into()
}

fn default_values() -> Vec<AxisValue> {
    vec![
        AxisValue::Name(RouterType::Mixtral.to_string()),
        AxisValue::Name(RouterType::St.to_string()),
    ]
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            axis: default_axis(),
            values: default_values(),
            layers: None,
            pretrain: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsSection {
    /// `llama3-8b` or `toy`; `[model]` (else Llama 3-8B) when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Sequence length; 8192 for Llama 3-8B, else the model seq_len.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<usize>,
    /// MoE layers; all layers when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    #[serde(default)]
    pub convention: FlopConvention,
    #[serde(default = "yes")]
    pub attention: bool,
}

impl Default for FlopsSection {
    fn default() -> Self {
        Self {
            preset: None,
            tokens: None,
            layers: None,
            convention: FlopConvention::SixP,
            attention: true,
        }
    }
}

/// 8 experts, top-2, mixtral router, dropless.
pub fn default_gate() -> GateConfig {
    GateConfig::new(8, 2)
}

pub fn preset(name: &str) -> Result<ModelConfig, CliError> {
    match name {
        "llama3-8b" => Ok(ModelConfig::llama3_8b()),
        "toy" => Ok(ModelConfig::toy()),
        other => Err(CliError::config(format!(
            "unknown model preset `{other}` (expected llama3-8b | toy)"
        ))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn model(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(ModelConfig::toy)
    }

    pub fn gate(&self) -> GateConfig {
        self.gate.clone().unwrap_or_else(default_gate)
    }

    pub fn data(&self) -> DataConfig {
        self.data
            .clone()
            .unwrap_or_else(|| DataConfig::new(self.seed))
    }

    /// 200 Adam steps of 32 x min(128, seq_len) tokens.
    pub fn train(&self) -> TrainConfig {
        self.train.clone().unwrap_or_else(|| {
            let mut t = TrainConfig::toy(200);
            t.seq_len = t.seq_len.min(self.model().seq_len);
            t
        })
    }

    /// The desk ablation setup, with any section given in the file taking
    /// its place.
    pub fn ablation(&self) -> AblationConfig {
        let base = AblationConfig::desk(self.seed);
        AblationConfig {
            model: self.model.clone().unwrap_or(base.model),
            gate: self.gate.clone().unwrap_or(base.gate),
            layers: self.ablate.layers.clone(),
            pretrain: self.ablate.pretrain.clone().or(base.pretrain),
            train: self.train.clone().unwrap_or(base.train),
            data: self.data.clone().unwrap_or(base.data),
            model_seed: self.seed,
            router_seed: self.seed,
        }
    }

    /// Every optional section filled with the value commands would use.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.model = Some(self.model());
        c.gate = Some(self.gate());
        c.data = Some(self.data());
        c.train = Some(self.train());
        c
    }

    /// A config with every key populated, used for `--help`.
    pub fn example() -> Self {
        let mut c = Self::default().resolved();
        c.out = Some("runs/example".into());
        c.upcycle.dense = Some("runs/dense".into());
        c.upcycle.layers = Some(vec![0, 1]);
        c.plan = Some(ParallelPlan::folding_example());
        c.cost.tokens_per_rank = Some(4096);
        c.cost.flop_tokens = Some(8192);
        c.run.init = Some("runs/dense".into());
        c.ablate.layers = Some(vec![0, 1]);
        c.ablate.pretrain = AblationConfig::desk(0).pretrain;
        c.flops.preset = Some("llama3-8b".into());
        c.flops.tokens = Some(8192);
        c.flops.layers = Some(vec![0, 1]);
        if let Some(g) = c.gate.as_mut() {
            g.cf = CapacityFactor::Finite(2.0);
        }
        if let Some(d) = c.data.as_mut() {
            d.epoch_batches = Some(100);
        }
        c
    }

    /// Sections read by `command`, rendered as TOML.
    pub fn keys_for(command: &str) -> String {
        let sections: &[&str] = match command {
            "upcycle" => &["seed", "out", "gate", "upcycle"],
            "plan" => &["model", "gate", "plan", "cost"],
            "train" => &["seed", "out", "model", "gate", "data", "train", "run"],
            "eval" => &["seed", "out", "model", "data", "train", "run"],
            "ablate" => &["seed", "out", "model", "gate", "data", "train", "ablate"],
            "flops" => &["out", "model", "gate", "flops"],
            _ => &[],
        };
        let full = toml::Table::try_from(Self::example()).expect("example serialises");
        let table: toml::Table = full
            .into_iter()
            .filter(|(k, _)| sections.is_empty() || sections.contains(&k.as_str()))
            .collect();
        toml::to_string(&table).expect("table serialises")
    }
}

//! Ablation runners: one training run per axis value from a shared dense
//! starting point, shared seeds and an identical data stream.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{data_source, train, DataConfig, RunMetrics, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{DenseCheckpoint, ModelConfig, Positional};
use crate::moe::{CapacityFactor, GateConfig, RouterType};
use crate::upcycle::upcycle_full;

/// Stream of the dense warm-up data.
const PRETRAIN_STREAM: u32 = 1;
/// Stream replayed by every ablation run.
const RUN_STREAM: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum AblationAxis {
    Cf(Vec<CapacityFactor>),
    RouterType(Vec<RouterType>),
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Cf(_) => "cf",
            Self::RouterType(_) => "router_type",
        }
    }

    pub fn labels(&self) -> Vec<String> {
        match self {
            Self::Cf(v) => v.iter().map(ToString::to_string).collect(),
            Self::RouterType(v) => v.iter().map(ToString::to_string).collect(),
        }
    }

    fn gates(&self, base: &GateConfig) -> Vec<GateConfig> {
        match self {
            Self::Cf(v) => v.iter().map(|&cf| base.clone().with_cf(cf)).collect(),
            Self::RouterType(v) => v.iter().map(|&r| base.clone().with_router(r)).collect(),
        }
    }

    /// Parses `cf` or `router_type` with comma-separated values.
    pub fn parse(name: &str, values: &str) -> Result<Self> {
        let items = values.split(',').map(str::trim).filter(|s| !s.is_empty());
        let axis = match name {
            "cf" => Self::Cf(items.map(str::parse).collect::<Result<_>>()?),
            "router_type" => Self::RouterType(items.map(str::parse).collect::<Result<_>>()?),
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation axis `{other}` (expected cf | router_type)"
                )))
            }
        };
        if axis.labels().is_empty() {
            return Err(Error::Config(
                "ablation axis needs at least one value".into(),
            ));
        }
        Ok(axis)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub model: ModelConfig,
    /// Base gate; the ablated field is overridden per run.
    pub gate: GateConfig,
    /// MoE layers; all layers when absent.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    /// Dense training before upcycling; skipped when absent.
    #[serde(default)]
    pub pretrain: Option<TrainConfig>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub model_seed: u64,
    pub router_seed: u64,
}

impl AblationConfig {
    /// Desk-sized setup: a two-layer model over a 64-token vocabulary,
    /// pretrained dense for 300 steps, then 2000 MoE steps per run.
    pub fn desk(seed: u64) -> Self {
        let model = ModelConfig {
            vocab: 64,
            hidden: 32,
            layers: 2,
            heads: 4,
            kv_heads: 2,
            ffn_hidden: 64,
            seq_len: 32,
            positional: Positional::None,
        };
        let mut pretrain = TrainConfig::toy(300);
        pretrain.batch = 8;
        pretrain.seq_len = 32;
        pretrain.schedule.lr_max = 3e-3;
        pretrain.schedule.lr_min = 3e-3;
        let mut train = TrainConfig::toy(2000);
        train.batch = 8;
        train.seq_len = 32;
        train.schedule.lr_max = 1e-3;
        train.schedule.lr_min = 1e-5;
        Self {
            model,
            gate: GateConfig::new(4, 2),
            layers: None,
            pretrain: Some(pretrain),
            train,
            data: DataConfig {
                epoch_batches: Some(100),
                ..DataConfig::new(seed)
            },
            model_seed: seed,
            router_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gate.validate()?;
        self.train.validate()?;
        if let Some(p) = &self.pretrain {
            p.validate()?;
        }
        self.data.blend.validate()
    }

    fn moe_layers(&self) -> Vec<usize> {
        self.layers
            .clone()
            .unwrap_or_else(|| (0..self.model.layers).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub label: String,
    pub gate: GateConfig,
    pub metrics: RunMetrics,
}

/// Randomly initialised dense model, trained by `cfg.pretrain` if present.
pub fn pretrain_dense(cfg: &AblationConfig) -> Result<DenseCheckpoint> {
    cfg.validate()?;
    let mut dense = DenseCheckpoint::init(cfg.model.clone(), cfg.model_seed)?;
    if let Some(p) = &cfg.pretrain {
        let mut data = data_source(
            &cfg.data,
            cfg.model.vocab,
            PRETRAIN_STREAM,
            p.batch,
            p.seq_len,
        )?;
        train(dense.view_mut(), data.as_mut(), p, "dense")?;
    }
    Ok(dense)
}

/// Upcycles the pretrained dense model once per axis value and trains each
/// MoE on the same data stream with the same router and noise seeds.
pub fn ablate(axis: &AblationAxis, cfg: &AblationConfig) -> Result<Vec<AblationRun>> {
    let dense = pretrain_dense(cfg)?;
    ablate_from(axis, cfg, &dense)
}

/// [`ablate`] from an existing dense model.
pub fn ablate_from(
    axis: &AblationAxis,
    cfg: &AblationConfig,
    dense: &DenseCheckpoint,
) -> Result<Vec<AblationRun>> {
    cfg.validate()?;
    let layers = cfg.moe_layers();
    axis.gates(&cfg.gate)
        .into_iter()
        .zip(axis.labels())
        .map(|(gate, label)| {
            gate.validate()?;
            let mut moe = upcycle_full(dense, gate.clone(), &layers, cfg.router_seed)?;
            let t = &cfg.train;
            let mut data = data_source(&cfg.data, cfg.model.vocab, RUN_STREAM, t.batch, t.seq_len)?;
            let run_id = format!("{}={label}", axis.name());
            let metrics = train(moe.view_mut(), data.as_mut(), t, &run_id)?;
            Ok(AblationRun {
                label,
                gate,
                metrics,
            })
        })
        .collect()
}

/// Writes `ablate_<axis>_<label>.csv` per run into `dir`; refuses to replace
/// existing files unless `force`.
pub fn write_ablation_csvs(
    dir: &Path,
    axis: &AblationAxis,
    runs: &[AblationRun],
    force: bool,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths: Vec<PathBuf> = runs
        .iter()
        .map(|r| dir.join(format!("ablate_{}_{}.csv", axis.name(), r.label)))
        .collect();
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Error::io(
                p,
                std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    "output exists (pass --force to overwrite)",
                ),
            ));
        }
    }
    for (p, r) in paths.iter().zip(runs) {
        let mut f = std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?);
        r.metrics
            .write_csv(&mut f, true)
            .map_err(|e| Error::io(p, e))?;
        f.flush().map_err(|e| Error::io(p, e))?;
    }
    Ok(paths)
}

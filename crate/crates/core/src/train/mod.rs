//! Toy-scale training: schedule, blended synthetic data, optimizers, the
//! training loop, perplexity evaluation and ablation runners.

mod ablate;
mod data;
mod schedule;

pub use ablate::{
    ablate, ablate_from, pretrain_dense, write_ablation_csvs, AblationAxis, AblationConfig,
    AblationRun,
};
pub use data::{
    Batch, BlendSampler, BlendSource, BlendSpec, DataConfig, FixedCorpus, MarkovCorpus,
    SyntheticData,
};
pub use schedule::Schedule;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{
    bind, cross_entropy, forward, forward_on_tape, ForwardOptions, ModelMut, ModelRef,
};
use crate::moe::RoutingStats;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Anything that yields training batches.
pub trait BatchSource {
    fn next_batch(&mut self, batch: usize, seq: usize) -> Result<Batch>;
}

impl BatchSource for SyntheticData {
    fn next_batch(&mut self, batch: usize, seq: usize) -> Result<Batch> {
        Ok(SyntheticData::next_batch(self, batch, seq))
    }
}

impl BatchSource for FixedCorpus {
    fn next_batch(&mut self, batch: usize, seq: usize) -> Result<Batch> {
        FixedCorpus::next_batch(self, batch, seq)
    }
}

/// Training stream described by `cfg`: fresh samples, or a replayed fixed
/// corpus when `epoch_batches` is set.
pub fn data_source(
    cfg: &DataConfig,
    vocab: usize,
    stream: u32,
    batch: usize,
    seq: usize,
) -> Result<Box<dyn BatchSource>> {
    let mut data = SyntheticData::with_stream(cfg, vocab, stream)?;
    Ok(match cfg.epoch_batches {
        Some(n) => Box::new(FixedCorpus::draw(&mut data, n, batch, seq)?),
        None => Box::new(data),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adaptive moments with bias correction.
    #[default]
    Adam,
    /// SGD with heavy-ball momentum.
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(Error::Config(format!(
                "unknown optimizer `{other}` (expected adam | sgd)"
            ))),
        }
    }
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_momentum() -> f64 {
    0.9
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sequences per batch.
    pub batch: usize,
    /// Tokens per sequence.
    pub seq_len: usize,
    pub schedule: Schedule,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    /// Seed of the router-noise stream (used only when the gate enables noise).
    #[serde(default)]
    pub noise_seed: u64,
}

impl TrainConfig {
    /// 32 sequences of 128 tokens, Adam, cosine decay from 1e-3 to 1e-5 after
    /// 100 warmup steps.
    pub fn toy(steps: usize) -> Self {
        Self {
            steps,
            batch: 32,
            seq_len: 128,
            schedule: Schedule {
                lr_max: 1e-3,
                lr_min: 1e-5,
                warmup_steps: 100.min(steps.saturating_sub(1)),
                total_steps: steps,
            },
            optimizer: OptimizerKind::Adam,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            momentum: default_momentum(),
            grad_clip: default_clip(),
            noise_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.steps == 0 || self.batch == 0 || self.seq_len == 0 {
            return Err(Error::Config(
                "steps, batch and seq_len must all be at least 1".into(),
            ));
        }
        if self.steps > self.schedule.total_steps {
            return Err(Error::Config(format!(
                "steps ({}) exceed schedule.total_steps ({})",
                self.steps, self.schedule.total_steps
            )));
        }
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !(unit(self.beta1) && unit(self.beta2) && unit(self.momentum))
            || self.eps.is_nan()
            || self.eps <= 0.0
        {
            return Err(Error::Config(
                "beta1, beta2 and momentum must lie in [0, 1) and eps must be positive".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!(
                    "grad_clip must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-parameter optimizer state, indexed like the tensor map.
#[derive(Debug, Clone)]
struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    t: i32,
}

impl Optimizer {
    fn new(kind: OptimizerKind, sizes: impl Iterator<Item = usize>) -> Self {
        let first: Vec<Vec<f64>> = sizes.map(|n| vec![0.0; n]).collect();
        let second = match kind {
            OptimizerKind::Adam => first.clone(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Self {
            kind,
            first,
            second,
            t: 0,
        }
    }

    fn step(&mut self, cfg: &TrainConfig, lr: f64, params: &mut [&mut Tensor], grads: &[Vec<f64>]) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let p = p.data_mut();
            match self.kind {
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for j in 0..p.len() {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                        p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
                    }
                }
                OptimizerKind::Sgd => {
                    let buf = &mut self.first[i];
                    for j in 0..p.len() {
                        buf[j] = cfg.momentum * buf[j] + g[j];
                        p[j] -= lr * buf[j];
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    /// Mean token cross-entropy of the batch, before the update.
    pub loss: f64,
    pub lr: f64,
    /// `(layer, stats)` for every MoE layer.
    pub routing: Vec<(usize, RoutingStats)>,
}

impl StepMetrics {
    /// Mean drop rate over MoE layers; zero for dense models.
    pub fn drop_rate(&self) -> f64 {
        mean(self.routing.iter().map(|(_, s)| s.drop_rate()))
    }

    /// Mean load entropy over MoE layers; zero for dense models.
    pub fn load_entropy(&self) -> f64 {
        mean(self.routing.iter().map(|(_, s)| s.load_entropy()))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub run_id: String,
    pub steps: Vec<StepMetrics>,
}

impl RunMetrics {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Means of consecutive non-overlapping windows; a trailing partial window
    /// is dropped.
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        if window == 0 {
            return Vec::new();
        }
        self.losses()
            .chunks_exact(window)
            .map(|c| c.iter().sum::<f64>() / window as f64)
            .collect()
    }

    /// Trailing moving average at every step from `window - 1` on.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        if window == 0 {
            return Vec::new();
        }
        self.losses()
            .windows(window)
            .map(|c| c.iter().sum::<f64>() / window as f64)
            .collect()
    }

    /// `step,run_id,loss,lr,drop_rate,load_entropy`, one row per step.
    pub fn write_csv<W: Write>(&self, out: &mut W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(out, "step,run_id,loss,lr,drop_rate,load_entropy")?;
        }
        for s in &self.steps {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                s.step,
                self.run_id,
                s.loss,
                s.lr,
                s.drop_rate(),
                s.load_entropy()
            )?;
        }
        Ok(())
    }
}

fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Trains every tensor of `model` in place, routers included, and logs one
/// [`StepMetrics`] per step. Deterministic given the model, the data stream
/// and `cfg.noise_seed`.
pub fn train<D: BatchSource + ?Sized>(
    model: ModelMut<'_>,
    data: &mut D,
    cfg: &TrainConfig,
    run_id: &str,
) -> Result<RunMetrics> {
    cfg.validate()?;
    if run_id.contains([',', '\n', '"']) {
        return Err(Error::Config(format!(
            "run id `{run_id}` must not contain , \" or newlines"
        )));
    }
    if let Some(m) = model.moe {
        m.validate(model.config.layers)?;
    }
    if cfg.seq_len > model.config.seq_len {
        return Err(Error::Config(format!(
            "train seq_len {} exceeds model seq_len {}",
            cfg.seq_len, model.config.seq_len
        )));
    }
    let ModelMut {
        config,
        moe,
        tensors,
    } = model;
    let mut opt = Optimizer::new(cfg.optimizer, tensors.values().map(Tensor::len));
    let mut noise = Rng::new(cfg.noise_seed, 0);
    let mut steps = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = cfg.schedule.lr_at(step)?;
        let batch = data.next_batch(cfg.batch, cfg.seq_len)?;
        let diverged = Error::NonFiniteLoss {
            step,
            last_good: step.checked_sub(1),
        };
        if !tensors.values().all(Tensor::is_finite) {
            return Err(diverged);
        }
        let view = ModelRef {
            config,
            moe,
            tensors,
        };
        let mut tape = Tape::new();
        let vars = bind(&mut tape, tensors, true);
        let fwd = forward_on_tape(
            &mut tape,
            view,
            &vars,
            &batch.inputs,
            batch.batch,
            Some(&mut noise),
            false,
        );
        // The gate config is validated up front, so a gate failure here means
        // the router logits overflowed.
        let fwd = match fwd {
            Err(Error::InvalidGate(_)) => return Err(diverged),
            other => other?,
        };
        if !tape.value(fwd.logits).is_finite() {
            return Err(diverged);
        }
        let ce = tape.cross_entropy(fwd.logits, &batch.targets)?;
        let loss = tape.value(ce).data()[0];
        let total = match fwd.aux {
            Some(a) => tape.add(ce, a)?,
            None => ce,
        };
        if !(loss.is_finite() && tape.value(total).data()[0].is_finite()) {
            return Err(diverged);
        }
        tape.backward(total)?;
        let mut grads: Vec<Vec<f64>> = vars
            .iter()
            .zip(tensors.values())
            .map(|(&v, t)| match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.len()],
            })
            .collect();
        let norm = global_norm(&grads);
        if !norm.is_finite() {
            return Err(diverged);
        }
        if let Some(clip) = cfg.grad_clip {
            if norm > clip {
                let s = clip / norm;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        let mut params: Vec<&mut Tensor> = tensors.values_mut().collect();
        opt.step(cfg, lr, &mut params, &grads);
        steps.push(StepMetrics {
            step,
            loss,
            lr,
            routing: fwd.traces.into_iter().map(|t| (t.layer, t.stats)).collect(),
        });
    }
    Ok(RunMetrics {
        run_id: run_id.to_string(),
        steps,
    })
}

/// `exp` of the mean token NLL over all batches, noise off.
pub fn eval_perplexity(model: ModelRef<'_>, batches: &[Batch]) -> Result<f64> {
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for b in batches {
        if b.inputs.is_empty() {
            continue;
        }
        let out = forward(
            model,
            &b.inputs,
            ForwardOptions {
                batch: b.batch,
                record: false,
            },
            None,
        )?;
        nll += cross_entropy(&out.logits, &b.targets)? * b.targets.len() as f64;
        tokens += b.targets.len();
    }
    if tokens == 0 {
        return Err(Error::Input("perplexity needs at least one token".into()));
    }
    Ok((nll / tokens as f64).exp())
}

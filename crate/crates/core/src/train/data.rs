//! Seeded synthetic corpora and the weighted blend sampler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendSource {
    pub name: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendSpec {
    pub sources: Vec<BlendSource>,
    pub seed: u64,
}

impl BlendSpec {
    /// Two sources weighted 7:3.
    pub fn seven_three(seed: u64) -> Self {
        Self {
            sources: vec![
                BlendSource {
                    name: "web".into(),
                    weight: 7.0,
                },
                BlendSource {
                    name: "academic".into(),
                    weight: 3.0,
                },
            ],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Config("blend needs at least one source".into()));
        }
        if let Some(s) = self
            .sources
            .iter()
            .find(|s| !(s.weight.is_finite() && s.weight > 0.0))
        {
            return Err(Error::Config(format!(
                "blend weight of `{}` must be positive and finite, got {}",
                s.name, s.weight
            )));
        }
        Ok(())
    }
}

/// Endless i.i.d. stream of source indices with probabilities proportional to
/// the weights; one uniform draw per item.
#[derive(Debug, Clone)]
pub struct BlendSampler {
    cumulative: Vec<f64>,
    rng: Rng,
}

impl BlendSampler {
    pub fn new(spec: &BlendSpec) -> Result<Self> {
        Self::with_stream(spec, 0)
    }

    /// Independent draw sequence `stream` of the same blend.
    pub fn with_stream(spec: &BlendSpec, stream: u32) -> Result<Self> {
        spec.validate()?;
        let total: f64 = spec.sources.iter().map(|s| s.weight).sum();
        let mut acc = 0.0;
        let cumulative = spec
            .sources
            .iter()
            .map(|s| {
                acc += s.weight / total;
                acc
            })
            .collect();
        Ok(Self {
            cumulative,
            rng: Rng::new(spec.seed, u64::from(stream) << 33),
        })
    }
}

impl Iterator for BlendSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let u = self.rng.uniform();
        let last = self.cumulative.len() - 1;
        Some(self.cumulative.iter().position(|&c| u < c).unwrap_or(last))
    }
}

/// First-order Markov chain where every token has `branching` distinct,
/// equally likely successors chosen at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovCorpus {
    vocab: usize,
    successors: Vec<Vec<usize>>,
}

impl MarkovCorpus {
    pub fn new(vocab: usize, branching: usize, seed: u64) -> Result<Self> {
        if vocab == 0 || branching == 0 || branching > vocab {
            return Err(Error::Config(format!(
                "markov corpus needs 1 <= branching <= vocab (got {branching}, {vocab})"
            )));
        }
        let mut rng = Rng::new(seed, 0);
        let successors = (0..vocab)
            .map(|_| {
                // Partial Fisher-Yates over the vocabulary.
                let mut pool: Vec<usize> = (0..vocab).collect();
                for i in 0..branching {
                    let j = i + rng.below(vocab - i);
                    pool.swap(i, j);
                }
                pool.truncate(branching);
                pool
            })
            .collect();
        Ok(Self { vocab, successors })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn successors(&self, token: usize) -> &[usize] {
        &self.successors[token]
    }

    /// Entropy rate of the chain in nats.
    pub fn entropy(&self) -> f64 {
        (self.successors[0].len() as f64).ln()
    }

    pub fn sample(&self, len: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let mut t = rng.below(self.vocab);
        out.push(t);
        while out.len() < len {
            let next = &self.successors[t];
            t = next[rng.below(next.len())];
            out.push(t);
        }
        out
    }
}

/// One batch of next-token prediction: `inputs[i]` predicts `targets[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Successors per token in each synthetic source.
    #[serde(default = "default_branching")]
    pub branching: usize,
    pub blend: BlendSpec,
    /// When set, training replays a fixed corpus of this many batches in the
    /// same order every epoch instead of drawing fresh samples.
    #[serde(default)]
    pub epoch_batches: Option<usize>,
}

fn default_branching() -> usize {
    4
}

impl DataConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            branching: default_branching(),
            blend: BlendSpec::seven_three(seed),
            epoch_batches: None,
        }
    }
}

/// Blended synthetic stream: each sequence picks its source from the blend
/// sampler, then walks that source's chain. The transition tables depend on
/// `blend.seed` alone; `stream` selects an independent sequence of samples
/// from the same distribution.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    corpora: Vec<MarkovCorpus>,
    sampler: BlendSampler,
    rng: Rng,
}

impl SyntheticData {
    pub fn new(cfg: &DataConfig, vocab: usize) -> Result<Self> {
        Self::with_stream(cfg, vocab, 0)
    }

    pub fn with_stream(cfg: &DataConfig, vocab: usize, stream: u32) -> Result<Self> {
        let corpora = (0..cfg.blend.sources.len())
            .map(|i| {
                let seed = Rng::new(cfg.blend.seed, 1 + i as u64).next_u64();
                MarkovCorpus::new(vocab, cfg.branching, seed)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            corpora,
            sampler: BlendSampler::with_stream(&cfg.blend, stream)?,
            rng: Rng::new(cfg.blend.seed, (u64::from(stream) << 33) | (1 << 32)),
        })
    }

    pub fn corpora(&self) -> &[MarkovCorpus] {
        &self.corpora
    }

    pub fn next_batch(&mut self, batch: usize, seq: usize) -> Batch {
        let mut inputs = Vec::with_capacity(batch * seq);
        let mut targets = Vec::with_capacity(batch * seq);
        for _ in 0..batch {
            let src = self.sampler.next().expect("endless");
            let s = self.corpora[src].sample(seq + 1, &mut self.rng);
            inputs.extend_from_slice(&s[..seq]);
            targets.extend_from_slice(&s[1..]);
        }
        Batch {
            batch,
            seq,
            inputs,
            targets,
        }
    }
}

/// A finite corpus of pre-drawn batches, replayed in order.
#[derive(Debug, Clone)]
pub struct FixedCorpus {
    batches: Vec<Batch>,
    next: usize,
}

impl FixedCorpus {
    pub fn draw(
        data: &mut SyntheticData,
        batches: usize,
        batch: usize,
        seq: usize,
    ) -> Result<Self> {
        if batches == 0 {
            return Err(Error::Config(
                "a fixed corpus needs at least one batch".into(),
            ));
        }
        Ok(Self {
            batches: (0..batches).map(|_| data.next_batch(batch, seq)).collect(),
            next: 0,
        })
    }

    pub fn batches(&self) -> &[Batch] {
        &self.batches
    }

    pub fn next_batch(&mut self, batch: usize, seq: usize) -> Result<Batch> {
        let b = &self.batches[self.next];
        if (b.batch, b.seq) != (batch, seq) {
            return Err(Error::Config(format!(
                "fixed corpus holds {}x{} batches, {batch}x{seq} requested",
                b.batch, b.seq
            )));
        }
        self.next = (self.next + 1) % self.batches.len();
        Ok(b.clone())
    }
}

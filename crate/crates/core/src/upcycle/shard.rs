//! Per-rank ("online") upcycling over simulated tensor/expert parallel shards.
//!
//! Rank layout: `rank = tp_index + tp_size * ep_index`. Across tensor-parallel
//! ranks FFN `w1`/`w3` are split by columns and `w2` by rows; every
//! expert-parallel rank keeps the full (tp-local) FFN and, once upcycled, the
//! contiguous block of `N / ep` experts it owns. Everything else is
//! replicated. Pipeline, context and data parallelism do not change tensor
//! contents and are not modelled here.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_upcycle_args, init_router, MoECheckpoint};
use crate::error::{Error, Result};
use crate::model::{
    ffn_name, load_bundle, router_name, save_bundle, schema, BundleKind, DenseCheckpoint, Dtype,
    ModelConfig, SchemaEntry, TensorMap, TensorRole,
};
use crate::moe::{GateConfig, MoeSpec};
use crate::tensor::Tensor;

const SIDECAR: &str = "shard.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardSpec {
    pub rank: usize,
    /// `(index, size)` along tensor parallelism.
    pub tp: (usize, usize),
    /// `(index, size)` along expert parallelism.
    pub ep: (usize, usize),
}

impl ShardSpec {
    pub fn new(tp_index: usize, tp_size: usize, ep_index: usize, ep_size: usize) -> Self {
        Self {
            rank: tp_index + tp_size * ep_index,
            tp: (tp_index, tp_size),
            ep: (ep_index, ep_size),
        }
    }

    pub fn world(&self) -> usize {
        self.tp.1 * self.ep.1
    }

    /// Contiguous block of experts held by this rank.
    pub fn owned_experts(&self, experts: usize) -> Range<usize> {
        let per = experts / self.ep.1;
        self.ep.0 * per..(self.ep.0 + 1) * per
    }

    fn ffn_slice(&self, ffn_hidden: usize) -> Range<usize> {
        let per = ffn_hidden / self.tp.1;
        self.tp.0 * per..(self.tp.0 + 1) * per
    }
}

/// Placement of a local tensor inside the full tensor of the same name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tile {
    pub name: String,
    /// Split axis, or `None` for a full replica.
    pub axis: Option<usize>,
    pub start: usize,
    pub len: usize,
    pub full_shape: Vec<usize>,
}

impl Tile {
    fn full(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            axis: None,
            start: 0,
            len: shape.first().copied().unwrap_or(1),
            full_shape: shape.to_vec(),
        }
    }

    fn renamed(&self, name: String) -> Self {
        Self {
            name,
            ..self.clone()
        }
    }
}

/// One simulated rank's tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub spec: ShardSpec,
    pub config: ModelConfig,
    /// Set once the shard has been upcycled.
    pub moe: Option<MoeSpec>,
    pub tensors: TensorMap,
    /// One tile per tensor, in the same order.
    pub tiles: Vec<Tile>,
}

impl Shard {
    fn push(&mut self, tile: Tile, t: Tensor) {
        self.tensors.insert(tile.name.clone(), t);
        self.tiles.push(tile);
    }
}

fn ffn_weight(name: &str) -> &str {
    name.rsplit('.').next().expect("weight suffix")
}

/// FFN tile of `name` (suffix `w1`, `w2` or `w3`) for `spec`.
fn ffn_tile(
    name: &str,
    full: &Tensor,
    spec: &ShardSpec,
    ffn_hidden: usize,
) -> Result<(Tile, Tensor)> {
    let r = spec.ffn_slice(ffn_hidden);
    let (axis, local) = if ffn_weight(name) == "w2" {
        (0, full.slice_rows(r.start, r.len())?)
    } else {
        (1, full.slice_cols(r.start, r.len())?)
    };
    let tile = Tile {
        name: name.to_string(),
        axis: Some(axis),
        start: r.start,
        len: r.len(),
        full_shape: full.shape().to_vec(),
    };
    Ok((tile, local))
}

/// Splits a dense checkpoint into `tp * ep` rank-local shards, ordered by rank.
pub fn shard_dense(dense: &DenseCheckpoint, tp: usize, ep: usize) -> Result<Vec<Shard>> {
    if tp == 0 || ep == 0 {
        return Err(Error::Config("tp and ep sizes must be at least 1".into()));
    }
    let f = dense.config.ffn_hidden;
    if !f.is_multiple_of(tp) {
        return Err(Error::Config(format!(
            "tensor `{}` dimension ffn_hidden = {f} is not divisible by tp = {tp}",
            ffn_name(0, "w1")
        )));
    }
    let mut shards = Vec::with_capacity(tp * ep);
    for ep_i in 0..ep {
        for tp_i in 0..tp {
            let spec = ShardSpec::new(tp_i, tp, ep_i, ep);
            let mut shard = Shard {
                spec,
                config: dense.config.clone(),
                moe: None,
                tensors: TensorMap::new(),
                tiles: Vec::new(),
            };
            for (name, t) in &dense.tensors {
                if name.contains(".ffn.") {
                    let (tile, local) = ffn_tile(name, t, &spec, f)?;
                    shard.push(tile, local);
                } else {
                    shard.push(Tile::full(name, t.shape()), t.clone());
                }
            }
            shards.push(shard);
        }
    }
    Ok(shards)
}

/// Upcycles one dense shard in place of the full model: owned experts copy
/// the local FFN tile; the router is drawn from `(router_seed, layer)` and is
/// therefore identical on every rank.
pub fn upcycle_shard(
    shard: &Shard,
    gate: GateConfig,
    layers: &[usize],
    router_seed: u64,
) -> Result<Shard> {
    if shard.moe.is_some() {
        return Err(Error::Config(format!(
            "shard of rank {} is already upcycled",
            shard.spec.rank
        )));
    }
    let spec = MoeSpec::new(gate, layers.to_vec());
    check_upcycle_args(&shard.config, &spec)?;
    let n = spec.gate.experts;
    if !n.is_multiple_of(shard.spec.ep.1) {
        return Err(Error::Config(format!(
            "expert count N = {n} is not divisible by ep = {}",
            shard.spec.ep.1
        )));
    }
    let owned = shard.spec.owned_experts(n);
    let tiles: HashMap<&str, &Tile> = shard.tiles.iter().map(|t| (t.name.as_str(), t)).collect();
    let local = |name: &str| -> Result<(&Tile, &Tensor)> {
        match (tiles.get(name), shard.tensors.get(name)) {
            (Some(tile), Some(t)) => Ok((*tile, t)),
            _ => Err(Error::MissingTile {
                rank: shard.spec.rank,
                detail: format!("tensor `{name}` absent from shard"),
            }),
        }
    };
    let mut out = Shard {
        spec: shard.spec,
        config: shard.config.clone(),
        moe: Some(spec.clone()),
        tensors: TensorMap::new(),
        tiles: Vec::new(),
    };
    for e in schema(&shard.config, Some(&spec)) {
        match (e.layer, e.role) {
            (Some(l), TensorRole::Router) => {
                let (w_g, w_noise) = init_router(&shard.config, n, l, router_seed);
                let t = if e.name == router_name(l, "w_g") {
                    w_g
                } else {
                    w_noise
                };
                out.push(Tile::full(&e.name, &e.shape), t);
            }
            (Some(l), TensorRole::Expert(x)) => {
                if owned.contains(&x) {
                    let (tile, t) = local(&ffn_name(l, ffn_weight(&e.name)))?;
                    out.push(tile.renamed(e.name.clone()), t.clone());
                }
            }
            _ => {
                let (tile, t) = local(&e.name)?;
                out.push(tile.clone(), t.clone());
            }
        }
    }
    Ok(out)
}

/// Rank expected to hold position `pos` along the split axis of `entry`.
fn owner(
    entry: &SchemaEntry,
    pos: usize,
    axis_len: usize,
    spec: &ShardSpec,
    experts: usize,
) -> usize {
    let (tp, ep) = (spec.tp.1, spec.ep.1);
    let tp_i = (pos / (axis_len / tp).max(1)).min(tp - 1);
    let ep_i = match entry.role {
        TensorRole::Expert(e) => e / (experts / ep).max(1),
        _ => 0,
    };
    tp_i + tp * ep_i
}

fn gather(shards: &[Shard]) -> Result<(ModelConfig, Option<MoeSpec>, TensorMap)> {
    let first = shards.first().ok_or_else(|| Error::MissingTile {
        rank: 0,
        detail: "no shards supplied".into(),
    })?;
    let (tp, ep) = (first.spec.tp.1, first.spec.ep.1);
    let mut by_rank: BTreeMap<usize, &Shard> = BTreeMap::new();
    for s in shards {
        if s.config != first.config || s.moe != first.moe {
            return Err(Error::Schema(format!(
                "rank {} disagrees with rank {} on the model configuration",
                s.spec.rank, first.spec.rank
            )));
        }
        if (s.spec.tp.1, s.spec.ep.1) != (tp, ep)
            || s.spec != ShardSpec::new(s.spec.tp.0, tp, s.spec.ep.0, ep)
        {
            return Err(Error::Schema(format!(
                "rank {} has inconsistent parallel coordinates",
                s.spec.rank
            )));
        }
        if by_rank.insert(s.spec.rank, s).is_some() {
            return Err(Error::OverlappingTile(format!(
                "rank {} supplied twice",
                s.spec.rank
            )));
        }
    }
    if let Some(rank) = (0..tp * ep).find(|r| !by_rank.contains_key(r)) {
        return Err(Error::MissingTile {
            rank,
            detail: format!("no shard for rank {rank} of {}", tp * ep),
        });
    }

    let experts = first.moe.as_ref().map_or(1, |m| m.gate.experts);
    let mut out = TensorMap::new();
    for entry in schema(&first.config, first.moe.as_ref()) {
        let mut holders: Vec<(usize, &Tile, &Tensor)> = Vec::new();
        for (&rank, s) in &by_rank {
            if let Some(i) = s.tensors.get_index_of(&entry.name) {
                let tile = s
                    .tiles
                    .get(i)
                    .filter(|t| t.name == entry.name)
                    .ok_or_else(|| {
                        Error::Schema(format!("rank {rank}: tile list out of step with tensors"))
                    })?;
                holders.push((rank, tile, &s.tensors[i]));
            }
        }
        let Some(&(_, tile0, _)) = holders.first() else {
            return Err(Error::MissingTile {
                rank: owner(&entry, 0, 1, &first.spec, experts),
                detail: format!("tensor `{}` held by no rank", entry.name),
            });
        };
        // Replicas of the same tile must agree bitwise.
        let mut groups: BTreeMap<(usize, usize), (usize, &Tensor)> = BTreeMap::new();
        for &(rank, tile, t) in &holders {
            if tile.axis != tile0.axis || tile.full_shape != entry.shape {
                return Err(Error::OverlappingTile(format!(
                    "`{}` tiled inconsistently on rank {rank}",
                    entry.name
                )));
            }
            match groups.get(&(tile.start, tile.len)) {
                Some(&(r0, t0)) if !t0.bitwise_eq(t) => {
                    return Err(Error::ReplicaMismatch {
                        tensor: entry.name.clone(),
                        first: r0,
                        second: rank,
                    })
                }
                Some(_) => {}
                None => {
                    groups.insert((tile.start, tile.len), (rank, t));
                }
            }
        }
        let full = match tile0.axis {
            None => groups.values().next().expect("one group").1.clone(),
            Some(axis) => {
                let axis_len = entry.shape[axis];
                let mut cursor = 0;
                let mut parts = Vec::new();
                for (&(start, len), &(rank, t)) in &groups {
                    if start < cursor {
                        return Err(Error::OverlappingTile(format!(
                            "`{}` rows/cols {start}..{} from rank {rank} overlap {}",
                            entry.name,
                            start + len,
                            cursor
                        )));
                    }
                    if start > cursor {
                        break;
                    }
                    parts.push(t);
                    cursor = start + len;
                }
                if cursor != axis_len {
                    return Err(Error::MissingTile {
                        rank: owner(&entry, cursor, axis_len, &first.spec, experts),
                        detail: format!(
                            "`{}` covers {cursor} of {axis_len} along axis {axis}",
                            entry.name
                        ),
                    });
                }
                if axis == 0 {
                    Tensor::concat_rows(&parts)?
                } else {
                    Tensor::concat_cols(&parts)?
                }
            }
        };
        out.insert(entry.name, full);
    }
    Ok((first.config.clone(), first.moe.clone(), out))
}

/// Reassembles upcycled shards into a full MoE checkpoint.
pub fn gather_moe(shards: &[Shard]) -> Result<MoECheckpoint> {
    let (config, moe, tensors) = gather(shards)?;
    let moe = moe.ok_or_else(|| Error::Schema("shards are not upcycled".into()))?;
    MoECheckpoint::new(config, moe, tensors)
}

/// Reassembles dense shards.
pub fn gather_dense(shards: &[Shard]) -> Result<DenseCheckpoint> {
    let (config, moe, tensors) = gather(shards)?;
    if moe.is_some() {
        return Err(Error::Schema("shards are upcycled".into()));
    }
    DenseCheckpoint::new(config, tensors)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    rank: usize,
    tp: (usize, usize),
    ep: (usize, usize),
    tiles: Vec<Tile>,
}

/// Writes a shard as a checkpoint bundle plus `shard.json`.
pub fn save_shard(dir: &Path, shard: &Shard, dtype: Dtype) -> Result<()> {
    save_bundle(
        dir,
        BundleKind::Shard,
        &shard.config,
        shard.moe.as_ref(),
        &shard.tensors,
        dtype,
    )?;
    let sidecar = Sidecar {
        rank: shard.spec.rank,
        tp: shard.spec.tp,
        ep: shard.spec.ep,
        tiles: shard.tiles.clone(),
    };
    let path = dir.join(SIDECAR);
    let mut json = serde_json::to_string_pretty(&sidecar).expect("sidecar serialises");
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_shard(dir: &Path) -> Result<Shard> {
    let (manifest, tensors) = load_bundle(dir)?;
    let path = dir.join(SIDECAR);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |detail: String| Error::Manifest {
        path: path.clone(),
        detail,
    };
    let side: Sidecar = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if manifest.kind != BundleKind::Shard {
        return Err(bad(format!(
            "bundle kind is {:?}, expected shard",
            manifest.kind
        )));
    }
    let in_step = side.tiles.len() == tensors.len()
        && side
            .tiles
            .iter()
            .zip(tensors.keys())
            .all(|(t, k)| &t.name == k);
    if !in_step {
        return Err(bad("tile list does not match the manifest tensors".into()));
    }
    Ok(Shard {
        spec: ShardSpec {
            rank: side.rank,
            tp: side.tp,
            ep: side.ep,
        },
        config: manifest.config,
        moe: manifest.moe,
        tensors,
        tiles: side.tiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Positional};
    use crate::upcycle::upcycle_full;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab: 16,
            hidden: 8,
            layers: 2,
            heads: 2,
            kv_heads: 1,
            ffn_hidden: 12,
            seq_len: 4,
            positional: Positional::None,
        }
    }

    #[test]
    fn single_shard_is_the_dense_model() {
        let dense = DenseCheckpoint::init(cfg(), 1).unwrap();
        let shards = shard_dense(&dense, 1, 1).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].tensors, dense.tensors);
        assert_eq!(gather_dense(&shards).unwrap(), dense);
    }

    #[test]
    fn tp_split_tiles_ffn() {
        let dense = DenseCheckpoint::init(cfg(), 1).unwrap();
        let shards = shard_dense(&dense, 2, 1).unwrap();
        assert_eq!(shards[0].tensors[&ffn_name(0, "w1")].shape(), &[8, 6]);
        assert_eq!(shards[1].tensors[&ffn_name(0, "w2")].shape(), &[6, 8]);
        assert_eq!(gather_dense(&shards).unwrap(), dense);
        assert!(matches!(shard_dense(&dense, 5, 1), Err(Error::Config(_))));
    }

    #[test]
    fn sharded_upcycle_gathers_to_full() {
        let dense = DenseCheckpoint::init(cfg(), 1).unwrap();
        let gate = GateConfig::new(4, 2);
        let full = upcycle_full(&dense, gate.clone(), &[0, 1], 7).unwrap();
        let shards: Vec<Shard> = shard_dense(&dense, 2, 2)
            .unwrap()
            .iter()
            .map(|s| upcycle_shard(s, gate.clone(), &[0, 1], 7).unwrap())
            .collect();
        assert_eq!(gather_moe(&shards).unwrap(), full);
    }

    #[test]
    fn gather_detects_missing_and_mismatched() {
        let dense = DenseCheckpoint::init(cfg(), 1).unwrap();
        let gate = GateConfig::new(4, 2);
        let mut shards: Vec<Shard> = shard_dense(&dense, 2, 2)
            .unwrap()
            .iter()
            .map(|s| upcycle_shard(s, gate.clone(), &[0], 7).unwrap())
            .collect();
        let missing: Vec<Shard> = shards
            .iter()
            .filter(|s| s.spec.rank != 2)
            .cloned()
            .collect();
        assert!(matches!(
            gather_moe(&missing),
            Err(Error::MissingTile { rank: 2, .. })
        ));
        shards[3]
            .tensors
            .get_mut(&router_name(0, "w_g"))
            .unwrap()
            .data_mut()[0] += 1e-3;
        assert!(matches!(
            gather_moe(&shards),
            Err(Error::ReplicaMismatch {
                first: 0,
                second: 3,
                ..
            })
        ));
    }

    #[test]
    fn shard_round_trips_through_disk() {
        let dense = DenseCheckpoint::init(cfg(), 1).unwrap();
        let shard = upcycle_shard(
            &shard_dense(&dense, 2, 2).unwrap()[3],
            GateConfig::new(4, 2),
            &[1],
            3,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_shard(dir.path(), &shard, Dtype::F64).unwrap();
        assert_eq!(load_shard(dir.path()).unwrap(), shard);
    }
}

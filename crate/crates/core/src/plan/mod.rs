//! Parallel folding planner: two independent 4-D rank mappings, one for
//! attention (TP x CP x DP x PP) and one for MoE layers (ETP x EP x EDP x PP),
//! plus analytic cost calculators.

mod cost;

pub use cost::{
    comm_volume, cost_report, count_params, forward_flops, memory_estimate, pipeline_bubble,
    CommVolume, CostOptions, CostReport, FlopConvention, FlopReport, MemoryReport, ParamCount,
    PUBLISHED_COUNTS,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::moe::GateConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dispatcher {
    #[default]
    Alltoall,
    Allgather,
}

impl std::str::FromStr for Dispatcher {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alltoall" => Ok(Self::Alltoall),
            "allgather" => Ok(Self::Allgather),
            other => Err(Error::Config(format!(
                "unknown dispatcher `{other}` (expected alltoall | allgather)"
            ))),
        }
    }
}

fn one() -> usize {
    1
}

fn eight() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelPlan {
    pub world: usize,
    #[serde(default = "eight")]
    pub node_size: usize,
    #[serde(default = "one")]
    pub tp: usize,
    #[serde(default = "one")]
    pub cp: usize,
    #[serde(default = "one")]
    pub dp: usize,
    /// Shared by both mappings.
    #[serde(default = "one")]
    pub pp: usize,
    #[serde(default = "one")]
    pub etp: usize,
    #[serde(default = "one")]
    pub ep: usize,
    #[serde(default = "one")]
    pub edp: usize,
    /// Virtual pipeline stages per pipeline rank.
    #[serde(default = "one")]
    pub vp: usize,
    #[serde(default = "one")]
    pub microbatches: usize,
    #[serde(default)]
    pub dispatcher: Dispatcher,
}

impl ParallelPlan {
    /// Everything 1 on a single rank.
    pub fn single() -> Self {
        Self::uniform(1)
    }

    /// `world` ranks, all of them data parallel on both sides.
    pub fn uniform(world: usize) -> Self {
        Self {
            world,
            node_size: 8,
            tp: 1,
            cp: 1,
            dp: world,
            pp: 1,
            etp: 1,
            ep: 1,
            edp: world,
            vp: 1,
            microbatches: 1,
            dispatcher: Dispatcher::Alltoall,
        }
    }

    /// Attention TP2 x CP2 x DP2, MoE ETP1 x EP8, on one 8-rank node.
    pub fn folding_example() -> Self {
        Self {
            world: 8,
            node_size: 8,
            tp: 2,
            cp: 2,
            dp: 2,
            pp: 1,
            etp: 1,
            ep: 8,
            edp: 1,
            vp: 1,
            microbatches: 1,
            dispatcher: Dispatcher::Alltoall,
        }
    }

    fn attention_dims(&self) -> [usize; 4] {
        [self.tp, self.cp, self.dp, self.pp]
    }

    fn moe_dims(&self) -> [usize; 4] {
        [self.etp, self.ep, self.edp, self.pp]
    }
}

/// Checks both product constraints and the model divisibility rules; every
/// violation is reported with both sides of the equation.
pub fn validate_plan(
    plan: &ParallelPlan,
    model: &ModelConfig,
    gate: Option<&GateConfig>,
) -> Result<()> {
    let named = [
        ("world", plan.world),
        ("node_size", plan.node_size),
        ("tp", plan.tp),
        ("cp", plan.cp),
        ("dp", plan.dp),
        ("pp", plan.pp),
        ("etp", plan.etp),
        ("ep", plan.ep),
        ("edp", plan.edp),
        ("vp", plan.vp),
        ("microbatches", plan.microbatches),
    ];
    let mut violations = Vec::new();
    for (name, v) in named {
        if v == 0 {
            violations.push(format!("{name} >= 1 (got 0)"));
        }
    }
    let attn: usize = plan.attention_dims().iter().product();
    if attn != plan.world {
        violations.push(format!(
            "tp*cp*dp*pp = {}*{}*{}*{} = {attn} != world = {}",
            plan.tp, plan.cp, plan.dp, plan.pp, plan.world
        ));
    }
    let moe: usize = plan.moe_dims().iter().product();
    if moe != plan.world {
        violations.push(format!(
            "etp*ep*edp*pp = {}*{}*{}*{} = {moe} != world = {}",
            plan.etp, plan.ep, plan.edp, plan.pp, plan.world
        ));
    }
    if plan.tp > 0 && !model.heads.is_multiple_of(plan.tp) {
        violations.push(format!(
            "heads % tp = {} % {} = {} != 0",
            model.heads,
            plan.tp,
            model.heads % plan.tp
        ));
    }
    if plan.etp > 0 && !model.ffn_hidden.is_multiple_of(plan.etp) {
        violations.push(format!(
            "ffn_hidden % etp = {} % {} = {} != 0",
            model.ffn_hidden,
            plan.etp,
            model.ffn_hidden % plan.etp
        ));
    }
    if let Some(g) = gate {
        if plan.ep > 0 && g.experts % plan.ep != 0 {
            violations.push(format!(
                "N % ep = {} % {} = {} != 0",
                g.experts,
                plan.ep,
                g.experts % plan.ep
            ));
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::Plan(violations.join("; ")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Tp,
    Cp,
    Dp,
    Pp,
    Etp,
    Ep,
    Edp,
}

impl GroupKind {
    pub const ALL: [GroupKind; 7] = [
        Self::Tp,
        Self::Cp,
        Self::Dp,
        Self::Pp,
        Self::Etp,
        Self::Ep,
        Self::Edp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Tp => "tp",
            Self::Cp => "cp",
            Self::Dp => "dp",
            Self::Pp => "pp",
            Self::Etp => "etp",
            Self::Ep => "ep",
            Self::Edp => "edp",
        }
    }
}

impl std::str::FromStr for GroupKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown group kind `{s}`")))
    }
}

/// Rank groups of every kind; each kind partitions `0..world`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMap {
    pub world: usize,
    pub groups: BTreeMap<GroupKind, Vec<Vec<usize>>>,
}

impl GroupMap {
    /// The group of `kind` that contains `rank`.
    pub fn group_of(&self, kind: GroupKind, rank: usize) -> &[usize] {
        self.groups[&kind]
            .iter()
            .find(|g| g.contains(&rank))
            .expect("groups partition the world")
    }
}

/// Groups along axis `axis` of a mixed-radix layout with `dims` fastest first.
fn axis_groups(dims: [usize; 4], axis: usize) -> Vec<Vec<usize>> {
    let stride: usize = dims[..axis].iter().product();
    let world: usize = dims.iter().product();
    let mut groups = Vec::new();
    for base in 0..world {
        if !(base / stride).is_multiple_of(dims[axis]) {
            continue;
        }
        groups.push((0..dims[axis]).map(|i| base + i * stride).collect());
    }
    groups
}

/// Lays ranks out fastest to slowest as `tp, cp, dp, pp` for attention and
/// `etp, ep, edp, pp` for MoE layers.
pub fn build_groups(plan: &ParallelPlan) -> GroupMap {
    let (a, m) = (plan.attention_dims(), plan.moe_dims());
    let mut groups = BTreeMap::new();
    groups.insert(GroupKind::Tp, axis_groups(a, 0));
    groups.insert(GroupKind::Cp, axis_groups(a, 1));
    groups.insert(GroupKind::Dp, axis_groups(a, 2));
    groups.insert(GroupKind::Pp, axis_groups(a, 3));
    groups.insert(GroupKind::Etp, axis_groups(m, 0));
    groups.insert(GroupKind::Ep, axis_groups(m, 1));
    groups.insert(GroupKind::Edp, axis_groups(m, 2));
    GroupMap {
        world: plan.world,
        groups,
    }
}

/// `true` for a kind iff each of its groups sits inside one node.
pub fn intra_node_report(groups: &GroupMap, node_size: usize) -> BTreeMap<GroupKind, bool> {
    let node_size = node_size.max(1);
    groups
        .groups
        .iter()
        .map(|(kind, gs)| {
            let intra = gs
                .iter()
                .all(|g| g.iter().all(|r| r / node_size == g[0] / node_size));
            (*kind, intra)
        })
        .collect()
}

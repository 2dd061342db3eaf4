//! Capacity-limited assignment of (token, expert) slots.

use std::io::Write;

use super::gate::{CapacityFactor, DropPolicy, Gates};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capacity {
    Limited(usize),
    Unbounded,
}

impl Capacity {
    pub fn limit(self) -> Option<usize> {
        match self {
            Self::Limited(c) => Some(c),
            Self::Unbounded => None,
        }
    }
}

/// `ceil(tokens / experts * cf)` slots per expert, or unbounded when dropless.
///
/// Products within a relative 1e-9 of an integer are treated as that integer so
/// binary rounding of `cf` cannot push the ceiling up by one.
pub fn expert_capacity(tokens: usize, experts: usize, cf: CapacityFactor) -> Result<Capacity> {
    if tokens == 0 || experts == 0 {
        return Err(Error::Config(format!(
            "capacity needs tokens >= 1 and experts >= 1 (got {tokens}, {experts})"
        )));
    }
    let cf = match cf {
        CapacityFactor::Dropless => return Ok(Capacity::Unbounded),
        CapacityFactor::Finite(cf) => {
            CapacityFactor::Finite(cf).validate()?;
            cf
        }
    };
    let exact = tokens as f64 / experts as f64 * cf;
    let nearest = exact.round();
    let slots = if (exact - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        exact.ceil()
    };
    Ok(Capacity::Limited((slots as usize).max(1)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingStats {
    /// Slots each expert accepted.
    pub assigned: Vec<usize>,
    pub dropped: usize,
    /// Selected slots before capacity, i.e. `tokens * k`.
    pub total_slots: usize,
    /// Sum of selected gate weights per expert (dropped slots included).
    pub gate_mass: Vec<f64>,
    pub capacity: Option<usize>,
}

impl RoutingStats {
    pub fn drop_rate(&self) -> f64 {
        if self.total_slots == 0 {
            0.0
        } else {
            self.dropped as f64 / self.total_slots as f64
        }
    }

    /// Shannon entropy (nats) of the accepted-slot distribution over experts.
    pub fn load_entropy(&self) -> f64 {
        let total: usize = self.assigned.iter().sum();
        if total == 0 {
            return 0.0;
        }
        self.assigned
            .iter()
            .filter(|&&a| a > 0)
            .map(|&a| {
                let p = a as f64 / total as f64;
                -p * p.ln()
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch {
    /// Accepted tokens per expert, ascending by token index.
    pub assignments: Vec<Vec<usize>>,
    /// Rejected `(token, expert)` slots, ascending.
    pub dropped: Vec<(usize, usize)>,
    pub stats: RoutingStats,
}

impl Dispatch {
    pub fn is_dropped(&self, token: usize) -> bool {
        self.dropped.iter().any(|(t, _)| *t == token)
    }
}

/// Assigns every selected slot to its expert unless the expert is full.
pub fn dispatch(gates: &Gates, capacity: Capacity, policy: DropPolicy) -> Dispatch {
    let (tokens, experts) = (gates.tokens(), gates.experts());
    let mut assignments = vec![Vec::new(); experts];
    let mut dropped = Vec::new();
    let mut gate_mass = vec![0.0; experts];
    let mut total_slots = 0;

    for (e, accepted) in assignments.iter_mut().enumerate() {
        let mut candidates: Vec<(usize, f64)> = (0..tokens)
            .filter(|&t| gates.is_selected(t, e))
            .map(|t| (t, gates.weights.row(t)[e]))
            .collect();
        total_slots += candidates.len();
        gate_mass[e] = candidates.iter().map(|(_, g)| g).sum();
        if policy == DropPolicy::Score {
            // Stable: equal gates keep ascending position order.
            candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
        }
        let limit = capacity.limit().unwrap_or(usize::MAX);
        for (rank, (t, _)) in candidates.into_iter().enumerate() {
            if rank < limit {
                accepted.push(t);
            } else {
                dropped.push((t, e));
            }
        }
        accepted.sort_unstable();
    }
    dropped.sort_unstable();

    let stats = RoutingStats {
        assigned: assignments.iter().map(Vec::len).collect(),
        dropped: dropped.len(),
        total_slots,
        gate_mass,
        capacity: capacity.limit(),
    };
    Dispatch {
        assignments,
        dropped,
        stats,
    }
}

/// Writes one CSV row per `(step, layer)` record; the header is emitted when
/// `write_header` is set. Columns: `step,layer,capacity,dropped,total_slots,
/// drop_rate,assigned_0..,gate_mass_0..`.
pub fn write_routing_csv<W: Write>(
    out: &mut W,
    records: &[(usize, usize, &RoutingStats)],
    write_header: bool,
) -> std::io::Result<()> {
    let experts = records.first().map_or(0, |r| r.2.assigned.len());
    if write_header {
        write!(out, "step,layer,capacity,dropped,total_slots,drop_rate")?;
        for e in 0..experts {
            write!(out, ",assigned_{e}")?;
        }
        for e in 0..experts {
            write!(out, ",gate_mass_{e}")?;
        }
        writeln!(out)?;
    }
    for (step, layer, s) in records {
        let cap = s
            .capacity
            .map_or_else(|| "inf".to_string(), |c| c.to_string());
        write!(
            out,
            "{step},{layer},{cap},{},{},{}",
            s.dropped,
            s.total_slots,
            s.drop_rate()
        )?;
        for a in &s.assigned {
            write!(out, ",{a}")?;
        }
        for m in &s.gate_mass {
            write!(out, ",{m}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

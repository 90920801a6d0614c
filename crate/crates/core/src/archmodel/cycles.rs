//! Cycle model for the GEMV (SGD), pipelined (CP, MBCP) and GEMM (MBGD, DFA)
//! mappings.

use serde::{Deserialize, Serialize};

use super::counts::{mac_counts, CountMode};
use super::mapping::{stage_costs, MappingPlan};
use super::ArchConfig;
use crate::error::{Error, Result};
use crate::learners::{pipeline_steps, LearningRule};
use crate::network::NetworkSpec;

/// Cycles to reduce one group of `n_r` partial sums inside a core.
pub fn reduction_cycles(n_r: usize, neighbor_links: bool) -> u64 {
    if neighbor_links {
        (n_r.max(1).ilog2() as u64).saturating_sub(1)
    } else {
        n_r.saturating_sub(1) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    AllGather,
    ReduceScatter,
}

/// Ring cycles to exchange an `n × b` activation between `c` cores. Both
/// collectives move the same volume.
pub fn collective_cycles(n: usize, b: usize, c: usize, n_r: usize, _kind: CollectiveKind) -> f64 {
    let nb = (n * b) as f64;
    (nb - nb / c.max(1) as f64) / n_r as f64
}

/// Compute cycles for one `m×n` GEMV tiled over a `pe_rows × pe_cols` array,
/// one MAC per PE per cycle.
pub fn tile_cycles(m: usize, n: usize, pe_rows: usize, pe_cols: usize) -> u64 {
    (m.div_ceil(pe_cols) * n.div_ceil(pe_rows)) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycles: f64,
    pub utilization: f64,
    /// Cycles per layer per epoch for sequential mappings, stage time per
    /// unit for pipelined ones.
    pub per_layer: Vec<f64>,
}

fn sgd_layer_cycles(arch: &ArchConfig, i: usize, m: usize, n: usize, frac: f64) -> f64 {
    let pr = arch.core_rows * arch.n_r;
    let pc = arch.core_cols * arch.n_r;
    let red = reduction_cycles(arch.n_r, arch.neighbor_links) as f64;
    let tiles = tile_cycles(m, n, pr, pc) as f64;
    let bw = arch.offcore_bw * arch.cores() as f64;
    let off = (1.0 - frac) * (m * n) as f64;

    let rf = n.div_ceil(pr) as f64;
    let fwd = tiles + rf * red + rf + (arch.core_cols - 1) as f64;
    let mut t = fwd.max(off / bw) + tiles.max(2.0 * off / bw);
    if i > 0 {
        let rb = m.div_ceil(pc) as f64;
        t += tiles + rb * red + rb + (arch.core_rows - 1) as f64;
    }
    t
}

fn batched_layer_cycles(
    spec: &NetworkSpec,
    arch: &ArchConfig,
    rule: LearningRule,
    i: usize,
    frac: f64,
) -> f64 {
    let (m, n) = spec.shape(i);
    let b = rule.batch();
    let p = arch.pes() as f64;
    let mn = (m * n) as f64;
    let backward = match (i, rule) {
        (0, _) => 0.0,
        (_, LearningRule::Dfa { .. }) => (m * spec.output()) as f64,
        _ => mn,
    };
    let macs = b as f64 * (2.0 * mn + backward);
    let comp = (macs / p).ceil();
    let off = 3.0 * (1.0 - frac) * mn;
    let bw = arch.offcore_bw * arch.cores() as f64;
    let mut t = comp.max(off / bw);
    if i + 1 < spec.layers() {
        t += collective_cycles(n, b, arch.cores(), arch.n_r, CollectiveKind::AllGather);
        t += collective_cycles(n, b, arch.cores(), arch.n_r, CollectiveKind::ReduceScatter);
    }
    t
}

pub fn epoch_cycles(spec: &NetworkSpec, arch: &ArchConfig, plan: &MappingPlan, k: u64) -> Result<CycleReport> {
    let rule = plan.rule;
    let l = spec.layers();
    if plan.layers.len() != l || plan.total_pes != arch.pes() {
        return Err(Error::Validation(format!(
            "plan for {} layers on {} PEs does not match {spec} on {}",
            plan.layers.len(),
            plan.total_pes,
            arch.label()
        )));
    }
    let units = k.div_ceil(rule.batch() as u64);
    let frac = plan.local_fractions();
    let (cycles, per_layer) = match rule {
        LearningRule::Sgd => {
            let per: Vec<f64> = spec
                .shapes()
                .enumerate()
                .map(|(i, (m, n))| k as f64 * sgd_layer_cycles(arch, i, m, n, frac[i]))
                .collect();
            (per.iter().sum(), per)
        }
        LearningRule::Cp | LearningRule::Mbcp { .. } => {
            let cost = stage_costs(spec, arch, rule, &frac);
            let groups = plan.layers.iter().map(|a| a.group).max().unwrap_or(0) + 1;
            let mut group_time = vec![0.0; groups];
            let mut stage = Vec::with_capacity(l);
            for (c, a) in cost.iter().zip(&plan.layers) {
                let t = (c / a.pes as f64).ceil();
                group_time[a.group] += t;
                stage.push(t);
            }
            let slowest = group_time.iter().cloned().fold(0.0, f64::max);
            (slowest * pipeline_steps(units as usize, l) as f64, stage)
        }
        LearningRule::Mbgd { .. } | LearningRule::Dfa { .. } => {
            let per: Vec<f64> = (0..l)
                .map(|i| units as f64 * batched_layer_cycles(spec, arch, rule, i, frac[i]))
                .collect();
            (per.iter().sum(), per)
        }
        LearningRule::Fa { .. } => {
            return Err(Error::Unsupported("feedback alignment has no accelerator mapping".into()))
        }
    };
    let macs = mac_counts(spec, k, rule, &super::CheckpointPlan::store_all(l), CountMode::Exact)?.training();
    let utilization = if cycles > 0.0 {
        macs as f64 / (cycles * arch.pes() as f64)
    } else {
        0.0
    };
    Ok(CycleReport {
        cycles,
        utilization,
        per_layer,
    })
}

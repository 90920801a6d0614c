//! Memory fit, weight placement and layer-to-PE assignment.

use serde::{Deserialize, Serialize};

use super::ArchConfig;
use crate::error::{Error, Result};
use crate::learners::LearningRule;
use crate::network::NetworkSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Weights and partial sums charged once, activations `(L−i+1)` times.
    #[default]
    Physical,
    /// Every term, weights included, multiplied by `(L−i+1)`.
    PaperLiteral,
    /// Minibatch activation storage only; weights may live off-core.
    Activations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub fits: bool,
    pub words_per_pe: f64,
    pub capacity_words: usize,
    pub per_layer: Vec<f64>,
}

/// Per-PE words needed when every layer is spread over the full grid.
pub fn mem_fit(spec: &NetworkSpec, arch: &ArchConfig, rule: LearningRule, mode: FitMode) -> FitReport {
    let l = spec.layers();
    let p = arch.pes() as f64;
    let b = rule.batch() as f64;
    let n_r = arch.n_r as f64;
    let reach = arch.core_rows.max(arch.core_cols) as f64 * n_r;
    let per_layer: Vec<f64> = spec
        .shapes()
        .enumerate()
        .map(|(i, (m, n))| {
            let (m, n) = (m as f64, n as f64);
            let live = (l - i) as f64;
            match mode {
                FitMode::Physical => live * (m + n) / p + m.max(n) / reach + m * n / p,
                FitMode::PaperLiteral => live * (m + n + m.max(n) + m * n) / p,
                FitMode::Activations => live * (m + n) * b / p,
            }
        })
        .collect();
    let words_per_pe: f64 = per_layer.iter().sum();
    let capacity_words = arch.pe_capacity_words();
    FitReport {
        fits: words_per_pe <= capacity_words as f64,
        words_per_pe,
        capacity_words,
        per_layer,
    }
}

/// Fraction of each layer's weights held in local PE memory. Local storage
/// left after activations and partial sums is filled from the last layer
/// backwards.
pub fn placement(spec: &NetworkSpec, arch: &ArchConfig, rule: LearningRule) -> Vec<f64> {
    let l = spec.layers();
    let b = rule.batch() as f64;
    let act: f64 = spec
        .shapes()
        .enumerate()
        .map(|(i, (m, n))| (l - i) as f64 * (m + n) as f64 * b)
        .sum();
    let psums: f64 = spec.shapes().map(|(m, n)| m.max(n) as f64).sum();
    let mut free = (arch.local_capacity_words() as f64 - act - psums).max(0.0);
    let mut frac = vec![0.0; l];
    for (i, (m, n)) in spec.shapes().enumerate().rev() {
        let w = (m * n) as f64;
        let take = w.min(free);
        frac[i] = take / w;
        free -= take;
    }
    frac
}

/// Greedy minimax split of `units` over jobs of the given cost: every job
/// starts with one unit and each further unit goes to the job with the
/// largest cost per unit, ties to the earlier job.
pub fn split_units(cost: &[f64], units: usize) -> Result<Vec<usize>> {
    if units < cost.len() {
        return Err(Error::Bounds(format!("{units} units for {} jobs", cost.len())));
    }
    let mut alloc = vec![1usize; cost.len()];
    for _ in cost.len()..units {
        let mut best = 0;
        for j in 1..cost.len() {
            if cost[j] / alloc[j] as f64 > cost[best] / alloc[best] as f64 {
                best = j;
            }
        }
        alloc[best] += 1;
    }
    Ok(alloc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerAssignment {
    pub pes: usize,
    /// PE group the layer runs on; layers sharing a group are time-multiplexed.
    pub group: usize,
    pub local_fraction: f64,
}

impl LayerAssignment {
    pub fn cores(&self, arch: &ArchConfig) -> f64 {
        self.pes as f64 / arch.pes_per_core() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingPlan {
    pub rule: LearningRule,
    /// Layers run concurrently on disjoint PE groups (CP, MBCP).
    pub spatial: bool,
    pub layers: Vec<LayerAssignment>,
    pub total_pes: usize,
    pub fit: FitReport,
}

impl MappingPlan {
    pub fn local_fractions(&self) -> Vec<f64> {
        self.layers.iter().map(|a| a.local_fraction).collect()
    }

    pub fn all_local(&self) -> bool {
        self.layers.iter().all(|a| a.local_fraction >= 1.0)
    }
}

/// Per-unit stage cost of each layer in PE-cycles: training MACs, or the
/// off-core traffic time when that is larger.
pub(crate) fn stage_costs(spec: &NetworkSpec, arch: &ArchConfig, rule: LearningRule, frac: &[f64]) -> Vec<f64> {
    let b = rule.batch() as f64;
    let ppc = arch.pes_per_core() as f64;
    spec.shapes()
        .enumerate()
        .map(|(i, (m, n))| {
            let passes = if i == 0 { 2.0 } else { 3.0 };
            let work = passes * b * (m * n) as f64;
            let off_words = 2.0 * (1.0 - frac[i]) * (m * n) as f64;
            work.max(off_words * ppc / arch.offcore_bw)
        })
        .collect()
}

/// CP and MBCP split the PEs between layers; every other rule runs each
/// layer on the full grid in turn.
pub fn assign_layers(spec: &NetworkSpec, arch: &ArchConfig, rule: LearningRule) -> Result<MappingPlan> {
    arch.validate()?;
    rule.validate()?;
    if matches!(rule, LearningRule::Fa { .. }) {
        return Err(Error::Unsupported("feedback alignment has no accelerator mapping".into()));
    }
    let frac = placement(spec, arch, rule);
    let fit_mode = if rule.batch() > 1 && !rule.is_pipelined() {
        FitMode::Activations
    } else {
        FitMode::Physical
    };
    let fit = mem_fit(spec, arch, rule, fit_mode);
    let p = arch.pes();
    let l = spec.layers();
    let layers = if rule.is_pipelined() {
        if p >= l {
            let alloc = split_units(&stage_costs(spec, arch, rule, &frac), p)?;
            (0..l)
                .map(|i| LayerAssignment {
                    pes: alloc[i],
                    group: i,
                    local_fraction: frac[i],
                })
                .collect()
        } else {
            (0..l)
                .map(|i| LayerAssignment {
                    pes: 1,
                    group: i % p,
                    local_fraction: frac[i],
                })
                .collect()
        }
    } else {
        (0..l)
            .map(|i| LayerAssignment {
                pes: p,
                group: 0,
                local_fraction: frac[i],
            })
            .collect()
    };
    Ok(MappingPlan {
        rule,
        spatial: rule.is_pipelined(),
        layers,
        total_pes: p,
        fit,
    })
}

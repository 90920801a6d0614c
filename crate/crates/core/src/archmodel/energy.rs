//! Energy, area and the derived performance metrics.

use serde::{Deserialize, Serialize};

use super::counts::{mac_counts, weight_access_counts, AccessFormula, CheckpointPlan, CountMode};
use super::cycles::epoch_cycles;
use super::mapping::{assign_layers, MappingPlan};
use super::{ArchConfig, EnergyConstants};
use crate::error::{Error, Result};
use crate::learners::LearningRule;
use crate::network::NetworkSpec;

/// Which memory traffic is charged, and at what rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Accounting {
    /// Charge weight reads and write-backs.
    pub weight_words: bool,
    /// Local operand words per MAC for GEMV mappings (batch of one).
    pub operand_words_gemv: f64,
    /// Local operand words per MAC for GEMM mappings.
    pub operand_words_gemm: f64,
    /// Local words per activation element: write, read and table lookup.
    pub activation_words: f64,
    /// Extra MACs per activation element for the iterative nonlinearity.
    pub k_act: f64,
    pub count_mode: CountMode,
    pub access_formula: AccessFormula,
}

impl Default for Accounting {
    fn default() -> Self {
        Accounting {
            weight_words: true,
            operand_words_gemv: 1.35,
            operand_words_gemm: 2.2,
            activation_words: 3.0,
            k_act: 3.0,
            count_mode: CountMode::Exact,
            access_formula: AccessFormula::Final,
        }
    }
}

impl Accounting {
    /// Arithmetic only: no memory traffic and no activation cost.
    pub fn fpu_only() -> Self {
        Accounting {
            weight_words: false,
            operand_words_gemv: 0.0,
            operand_words_gemm: 0.0,
            activation_words: 0.0,
            k_act: 0.0,
            ..Accounting::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("operand_words_gemv", self.operand_words_gemv),
            ("operand_words_gemm", self.operand_words_gemm),
            ("activation_words", self.activation_words),
            ("k_act", self.k_act),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("accounting.{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Joules per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub fpu_j: f64,
    pub local_j: f64,
    pub offcore_j: f64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.fpu_j + self.local_j + self.offcore_j
    }

    pub fn memory(&self) -> f64 {
        self.local_j + self.offcore_j
    }

    pub fn scaled(&self, f: f64) -> Self {
        EnergyBreakdown {
            fpu_j: self.fpu_j * f,
            local_j: self.local_j * f,
            offcore_j: self.offcore_j * f,
        }
    }
}

pub fn energy_of(macs: f64, local_words: f64, offcore_words: f64, e: &EnergyConstants) -> EnergyBreakdown {
    EnergyBreakdown {
        fpu_j: macs * e.fpu_pj_per_mac * 1e-12,
        local_j: local_words * e.local_pj_per_word * 1e-12,
        offcore_j: offcore_words * e.offcore_pj_per_word * 1e-12,
    }
}

pub fn epoch_energy(
    spec: &NetworkSpec,
    arch: &ArchConfig,
    plan: &MappingPlan,
    k: u64,
    acc: &Accounting,
) -> Result<EnergyBreakdown> {
    let rule = plan.rule;
    let l = spec.layers();
    let macs = mac_counts(spec, k, rule, &CheckpointPlan::store_all(l), acc.count_mode)?;
    let units = k.div_ceil(rule.batch() as u64) as f64;
    let activations = k as f64 * spec.shapes().map(|(_, n)| n).sum::<usize>() as f64;

    let mut local = 0.0;
    let mut offcore = 0.0;
    if acc.weight_words {
        let reads = if rule.is_pipelined() { 1.0 } else { 2.0 };
        for (i, (m, n)) in spec.shapes().enumerate() {
            let reads = if i == 0 && acc.access_formula == AccessFormula::Draft && !rule.is_pipelined() {
                1.0
            } else {
                reads
            };
            let words = units * (m * n) as f64 * (reads + 1.0);
            let f = plan.layers[i].local_fraction;
            local += words * f;
            offcore += words * (1.0 - f);
        }
        let acc_counts = weight_access_counts(spec, k, rule, acc.count_mode, acc.access_formula);
        local += acc_counts.feedback as f64;
    }
    let operand = if rule.batch() == 1 {
        acc.operand_words_gemv
    } else {
        acc.operand_words_gemm
    };
    local += macs.total() as f64 * operand + activations * acc.activation_words;
    let fpu_macs = macs.total() as f64 + activations * acc.k_act;
    Ok(energy_of(fpu_macs, local, offcore, &arch.energy))
}

/// Area before interconnect overhead.
pub fn area_raw(arch: &ArchConfig) -> f64 {
    let a = &arch.area;
    arch.pes() as f64 * (a.fpu + a.local_sram) + arch.cores() as f64 * a.offcore_sram
}

pub fn area(arch: &ArchConfig) -> f64 {
    area_raw(arch) * (1.0 + arch.interconnect_overhead)
}

/// Single overhead minimising the worst relative error against the targets:
/// with `r_i = raw_i/target_i`, `1+o = 2/(max r + min r)`.
pub fn calibrate_overhead(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() || pairs.iter().any(|&(r, t)| !(r > 0.0 && t > 0.0)) {
        return Err(Error::Validation("calibration needs positive raw/target pairs".into()));
    }
    let ratios = pairs.iter().map(|&(raw, target)| raw / target);
    let hi = ratios.clone().fold(f64::MIN, f64::max);
    let lo = ratios.fold(f64::MAX, f64::min);
    Ok(2.0 / (hi + lo) - 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub network: String,
    pub arch: String,
    pub rule: LearningRule,
    pub samples: u64,
    pub fits: bool,
    pub words_per_pe: f64,
    pub capacity_words: usize,
    pub local_fraction: f64,
    pub macs: u64,
    pub cycles: f64,
    pub seconds: f64,
    pub utilization: f64,
    pub energy: EnergyBreakdown,
    pub energy_j: f64,
    pub area_mm2: f64,
    pub gflops_per_w: f64,
    pub gflops_per_mm2: f64,
}

/// Full per-epoch report for one (network, rule, architecture) triple.
pub fn cost_report(
    spec: &NetworkSpec,
    arch: &ArchConfig,
    rule: LearningRule,
    k: u64,
    acc: &Accounting,
) -> Result<CostReport> {
    acc.validate()?;
    let plan = assign_layers(spec, arch, rule)?;
    let cyc = epoch_cycles(spec, arch, &plan, k)?;
    let energy = epoch_energy(spec, arch, &plan, k, acc)?;
    let l = spec.layers();
    let macs = mac_counts(spec, k, rule, &CheckpointPlan::store_all(l), acc.count_mode)?.training();
    let seconds = cyc.cycles / arch.clock_hz;
    let area_mm2 = area(arch);
    let flops = 2.0 * macs as f64;
    let weights = spec.weight_count() as f64;
    let local_fraction = spec
        .shapes()
        .zip(&plan.layers)
        .map(|((m, n), a)| (m * n) as f64 * a.local_fraction)
        .sum::<f64>()
        / weights;
    Ok(CostReport {
        network: spec.to_string(),
        arch: arch.label(),
        rule,
        samples: k,
        fits: plan.all_local(),
        words_per_pe: plan.fit.words_per_pe,
        capacity_words: plan.fit.capacity_words,
        local_fraction,
        macs,
        cycles: cyc.cycles,
        seconds,
        utilization: cyc.utilization,
        energy,
        energy_j: energy.total(),
        area_mm2,
        gflops_per_w: flops / energy.total() * 1e-9,
        gflops_per_mm2: if seconds > 0.0 { flops / seconds / area_mm2 * 1e-9 } else { 0.0 },
    })
}

//! Analytical model of the coarse-grain reconfigurable training accelerator:
//! a `rows × cols` grid of cores, each an `n_r × n_r` array of PEs with local
//! SRAM, broadcast buses and a ring between cores.

mod counts;
mod cycles;
mod energy;
mod mapping;

pub use counts::{mac_counts, mac_counts_by_layer, weight_access_counts, weight_access_counts_by_layer, AccessFormula, CheckpointPlan, CountMode, MacCounts, WeightAccesses};
pub use cycles::{collective_cycles, epoch_cycles, reduction_cycles, tile_cycles, CollectiveKind, CycleReport};
pub use energy::{area, area_raw, calibrate_overhead, cost_report, energy_of, epoch_energy, Accounting, CostReport, EnergyBreakdown};
pub use mapping::{assign_layers, mem_fit, placement, split_units, FitMode, FitReport, LayerAssignment, MappingPlan};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConstants {
    pub fpu_pj_per_mac: f64,
    pub local_pj_per_word: f64,
    pub offcore_pj_per_word: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        EnergyConstants {
            fpu_pj_per_mac: 2.63,
            local_pj_per_word: 3.5,
            offcore_pj_per_word: 16.0,
        }
    }
}

/// Block areas in mm².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaConstants {
    pub fpu: f64,
    pub local_sram: f64,
    pub offcore_sram: f64,
}

impl Default for AreaConstants {
    fn default() -> Self {
        AreaConstants {
            fpu: 0.0056,
            local_sram: 0.0617,
            offcore_sram: 1.948,
        }
    }
}

/// Interconnect overhead that best fits both published chip areas.
pub const DEFAULT_INTERCONNECT_OVERHEAD: f64 = 0.114;
/// Off-core bandwidth in words per cycle per core.
pub const DEFAULT_OFFCORE_BW: f64 = 7.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub core_rows: usize,
    pub core_cols: usize,
    /// Side of the PE array inside each core.
    pub n_r: usize,
    pub pe_local_sram: usize,
    pub offcore_sram: usize,
    pub word_bytes: usize,
    pub clock_hz: f64,
    pub offcore_bw: f64,
    pub energy: EnergyConstants,
    pub area: AreaConstants,
    pub interconnect_overhead: f64,
    /// Log-depth neighbour reduction instead of the bus chain.
    pub neighbor_links: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig::small()
    }
}

impl ArchConfig {
    pub fn grid(core_rows: usize, core_cols: usize, n_r: usize) -> Self {
        ArchConfig {
            core_rows,
            core_cols,
            n_r,
            pe_local_sram: 16384,
            offcore_sram: 524288,
            word_bytes: 2,
            clock_hz: 1e9,
            offcore_bw: DEFAULT_OFFCORE_BW,
            energy: EnergyConstants::default(),
            area: AreaConstants::default(),
            interconnect_overhead: DEFAULT_INTERCONNECT_OVERHEAD,
            neighbor_links: false,
        }
    }

    /// 2×16 cores of 4×4 PEs.
    pub fn small() -> Self {
        Self::grid(2, 16, 4)
    }

    /// 2×4 cores of 16×16 PEs.
    pub fn large() -> Self {
        Self::grid(2, 4, 16)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "small" => Ok(Self::small()),
            "large" => Ok(Self::large()),
            other => Err(Error::Config(format!(
                "unknown architecture preset '{other}' (expected small or large)"
            ))),
        }
    }

    pub fn cores(&self) -> usize {
        self.core_rows * self.core_cols
    }

    pub fn pes_per_core(&self) -> usize {
        self.n_r * self.n_r
    }

    pub fn pes(&self) -> usize {
        self.cores() * self.pes_per_core()
    }

    pub fn pe_capacity_words(&self) -> usize {
        self.pe_local_sram / self.word_bytes
    }

    pub fn local_capacity_words(&self) -> usize {
        self.pes() * self.pe_capacity_words()
    }

    pub fn label(&self) -> String {
        format!("{}x{}x{}x{}", self.core_rows, self.core_cols, self.n_r, self.n_r)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("core_rows", self.core_rows),
            ("core_cols", self.core_cols),
            ("n_r", self.n_r),
            ("pe_local_sram", self.pe_local_sram),
            ("offcore_sram", self.offcore_sram),
            ("word_bytes", self.word_bytes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let e = &self.energy;
        let a = &self.area;
        let reals = [
            ("clock_hz", self.clock_hz),
            ("offcore_bw", self.offcore_bw),
            ("energy.fpu_pj_per_mac", e.fpu_pj_per_mac),
            ("energy.local_pj_per_word", e.local_pj_per_word),
            ("energy.offcore_pj_per_word", e.offcore_pj_per_word),
            ("area.fpu", a.fpu),
            ("area.local_sram", a.local_sram),
            ("area.offcore_sram", a.offcore_sram),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.interconnect_overhead.is_finite() && self.interconnect_overhead >= 0.0) {
            return Err(Error::Config("interconnect_overhead must be non-negative".into()));
        }
        if self.neighbor_links && !self.n_r.is_power_of_two() {
            return Err(Error::Config(format!(
                "neighbor_links needs a power-of-two n_r, got {}",
                self.n_r
            )));
        }
        Ok(())
    }
}

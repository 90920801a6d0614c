//! Sweeps over (network, rule, architecture, seed), the join of training
//! histories with per-epoch cost reports, figure-analog CSV and SVG outputs,
//! and the analytical-versus-instrumented counter check.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archmodel::{
    cost_report, mac_counts_by_layer, weight_access_counts_by_layer, AccessFormula, Accounting, ArchConfig,
    CostReport, CountMode, EnergyBreakdown,
};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::learners::{batch_epoch, cp_epoch, train, LearningRule, TrainConfig, TrainHistory};
use crate::network::{init_params, NetworkSpec};
use crate::scalar::{Precision, Scalar};
use crate::svg::{LineChart, Series};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.88, 0.90, 0.92];

/// An architecture given by preset name or in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchSpec {
    Preset(String),
    Custom(ArchConfig),
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec::Preset("small".into())
    }
}

impl ArchSpec {
    pub fn resolve(&self) -> Result<ArchConfig> {
        let a = match self {
            ArchSpec::Preset(name) => ArchConfig::preset(name)?,
            ArchSpec::Custom(a) => *a,
        };
        a.validate()?;
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub network: NetworkSpec,
    pub rule: LearningRule,
    /// Learning rate; the rule's default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default)]
    pub arch: ArchSpec,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    #[serde(default)]
    pub precision: Precision,
}

impl RunSpec {
    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.rule.default_lr())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            rule: self.rule,
            lr: self.lr(),
            epochs: self.epochs,
            seed,
            precision: self.precision,
        }
    }
}

fn default_thresholds() -> Vec<f64> {
    DEFAULT_THRESHOLDS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub runs: Vec<RunSpec>,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub accounting: Accounting,
}

impl ExperimentPlan {
    /// Four networks on their reference architectures, trained with every
    /// rule and batch size of the comparison, three seeds each. The large
    /// network is costed on both architectures.
    pub fn paper_default() -> Self {
        let small_nets = [
            vec![784, 500, 500, 500, 10],
            vec![784, 500, 500, 500, 500, 10],
            vec![784, 500, 500, 500, 500, 500, 10],
        ];
        let large = vec![784, 2500, 2000, 1500, 1000, 500, 10];
        let mut rules = vec![LearningRule::Sgd, LearningRule::Cp];
        rules.extend([2, 4, 8, 50, 100].map(|batch| LearningRule::Mbgd { batch }));
        rules.push(LearningRule::Dfa { batch: 1 });
        let mut runs = Vec::new();
        let mut push = |dims: &Vec<usize>, arch: &str, epochs: usize| {
            for &rule in &rules {
                runs.push(RunSpec {
                    network: NetworkSpec::new(dims.clone()).expect("valid preset network"),
                    rule,
                    lr: tuned_lr(rule),
                    arch: ArchSpec::Preset(arch.into()),
                    seeds: vec![0, 1, 2],
                    epochs,
                    precision: Precision::Native,
                });
            }
        };
        for dims in &small_nets {
            push(dims, "small", 50);
        }
        push(&large, "small", 15);
        push(&large, "large", 15);
        ExperimentPlan {
            runs,
            thresholds: default_thresholds(),
            accounting: Accounting::default(),
        }
    }

    /// Caps epochs and seed count of every run.
    pub fn scaled(mut self, max_epochs: usize, max_seeds: usize) -> Self {
        for r in &mut self.runs {
            r.epochs = r.epochs.min(max_epochs);
            r.seeds.truncate(max_seeds.max(1));
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(Error::Config("plan has no runs".into()));
        }
        if self.thresholds.iter().any(|t| !(t.is_finite() && *t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config("thresholds must lie in (0, 1]".into()));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("thresholds must be strictly increasing".into()));
        }
        self.accounting.validate()?;
        let mut keys = Vec::new();
        for (i, r) in self.runs.iter().enumerate() {
            if r.seeds.is_empty() {
                return Err(Error::Config(format!("run {i} ({}): at least one seed needed", r.rule)));
            }
            if r.epochs == 0 {
                return Err(Error::Config(format!("run {i} ({}): epochs must be positive", r.rule)));
            }
            r.train_config(0).validate()?;
            let arch = r.arch.resolve()?;
            for &seed in &r.seeds {
                keys.push(RunKey::new(r, &arch, seed));
            }
        }
        keys.sort();
        if let Some(w) = keys.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate run {}", w[0].file_stem())));
        }
        Ok(())
    }
}

/// Learning rates of the paper-default plan that differ from the rule default.
fn tuned_lr(rule: LearningRule) -> Option<f64> {
    match rule {
        LearningRule::Mbgd { batch: 8 } => Some(MBGD8_LR),
        _ => None,
    }
}

/// Rate for minibatches of eight in the default plan.
pub const MBGD8_LR: f64 = 0.05;

/// Identity of one trained and costed run; outputs are sorted by it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunKey {
    pub network: NetworkSpec,
    pub arch: String,
    pub rule: LearningRule,
    pub lr: f64,
    pub precision: Precision,
    pub epochs: usize,
    pub seed: u64,
}

impl RunKey {
    fn new(r: &RunSpec, arch: &ArchConfig, seed: u64) -> Self {
        RunKey {
            network: r.network.clone(),
            arch: arch.label(),
            rule: r.rule,
            lr: r.lr(),
            precision: r.precision,
            epochs: r.epochs,
            seed,
        }
    }

    /// The key without its seed, naming a curve averaged over seeds.
    pub fn group(&self) -> String {
        let half = if self.precision == Precision::Half { " f16" } else { "" };
        format!("{} {} {} lr={}{half}", self.network, self.arch, self.rule, self.lr)
    }

    pub fn file_stem(&self) -> String {
        let half = if self.precision == Precision::Half { "_half" } else { "" };
        format!(
            "{}_{}_{}_lr{}{half}_e{}_s{}",
            self.network,
            self.arch,
            self.rule.key(),
            self.lr,
            self.epochs,
            self.seed
        )
    }

    fn cmp_fields(&self, o: &Self) -> Ordering {
        self.network
            .dims()
            .cmp(o.network.dims())
            .then_with(|| self.arch.cmp(&o.arch))
            .then_with(|| self.rule.cmp(&o.rule))
            .then_with(|| self.lr.total_cmp(&o.lr))
            .then_with(|| (self.precision == Precision::Half).cmp(&(o.precision == Precision::Half)))
            .then_with(|| self.epochs.cmp(&o.epochs))
            .then_with(|| self.seed.cmp(&o.seed))
    }
}

impl PartialEq for RunKey {
    fn eq(&self, o: &Self) -> bool {
        self.cmp_fields(o) == Ordering::Equal
    }
}

impl Eq for RunKey {}

impl PartialOrd for RunKey {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for RunKey {
    fn cmp(&self, o: &Self) -> Ordering {
        self.cmp_fields(o)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub key: RunKey,
    pub history: TrainHistory,
    /// Absent for rules without an accelerator mapping.
    pub cost: Option<CostReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToAccuracyEntry {
    pub key: RunKey,
    pub threshold: f64,
    /// First epoch whose validation accuracy reaches the threshold.
    pub epochs: Option<usize>,
    pub energy: Option<EnergyBreakdown>,
    pub energy_j: Option<f64>,
    pub time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToAccuracyTable {
    pub thresholds: Vec<f64>,
    pub entries: Vec<ToAccuracyEntry>,
}

impl ToAccuracyTable {
    pub fn build(results: &[RunResult], thresholds: &[f64]) -> Self {
        let mut entries = Vec::with_capacity(results.len() * thresholds.len());
        for r in results {
            for &threshold in thresholds {
                let epochs = r.history.epochs_to(threshold);
                let joined = epochs.zip(r.cost.as_ref());
                entries.push(ToAccuracyEntry {
                    key: r.key.clone(),
                    threshold,
                    epochs,
                    energy: joined.map(|(e, c)| c.energy.scaled(e as f64)),
                    energy_j: joined.map(|(e, c)| e as f64 * c.energy_j),
                    time_s: joined.map(|(e, c)| e as f64 * c.seconds),
                });
            }
        }
        ToAccuracyTable {
            thresholds: thresholds.to_vec(),
            entries,
        }
    }

    pub fn get(&self, key: &RunKey, threshold: f64) -> Option<&ToAccuracyEntry> {
        self.entries.iter().find(|e| &e.key == key && e.threshold == threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResults {
    pub runs: Vec<RunResult>,
    pub table: ToAccuracyTable,
}

impl PlanResults {
    pub fn find(&self, network: &[usize], arch: &str, rule: LearningRule) -> Vec<&RunResult> {
        self.runs
            .iter()
            .filter(|r| r.key.network.dims() == network && r.key.arch == arch && r.key.rule == rule)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct TrainKey {
    dims: Vec<usize>,
    rule: LearningRule,
    lr_bits: u64,
    half: bool,
    epochs: usize,
    seed: u64,
}

/// Runs every training job of the plan on up to `workers` threads.
pub fn run_plan<T: Scalar>(
    plan: &ExperimentPlan,
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    workers: usize,
) -> Result<PlanResults> {
    run_plan_with(plan, train_set, val_set, workers, &|_| Ok(()))
}

/// As [`run_plan`], calling `on_done` for each run as soon as its training
/// finishes. Jobs identical up to the architecture are trained once.
pub fn run_plan_with<T: Scalar>(
    plan: &ExperimentPlan,
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    workers: usize,
    on_done: &(dyn Fn(&RunResult) -> Result<()> + Sync),
) -> Result<PlanResults> {
    plan.validate()?;
    let k = train_set.len() as u64;
    let mut costs: HashMap<(Vec<usize>, String, LearningRule), Option<CostReport>> = HashMap::new();
    let mut jobs: Vec<(TrainKey, RunSpec)> = Vec::new();
    let mut job_index: HashMap<TrainKey, usize> = HashMap::new();
    let mut members: Vec<Vec<RunKey>> = Vec::new();
    for r in &plan.runs {
        let arch = r.arch.resolve()?;
        let ck = (r.network.dims().to_vec(), arch.label(), r.rule);
        if !costs.contains_key(&ck) {
            let report = match cost_report(&r.network, &arch, r.rule, k, &plan.accounting) {
                Ok(c) => Some(c),
                Err(Error::Unsupported(_)) => None,
                Err(e) => return Err(e),
            };
            costs.insert(ck, report);
        }
        for &seed in &r.seeds {
            let tk = TrainKey {
                dims: r.network.dims().to_vec(),
                rule: r.rule,
                lr_bits: r.lr().to_bits(),
                half: r.precision == Precision::Half,
                epochs: r.epochs,
                seed,
            };
            let j = *job_index.entry(tk.clone()).or_insert_with(|| {
                jobs.push((tk, r.clone()));
                members.push(Vec::new());
                jobs.len() - 1
            });
            members[j].push(RunKey::new(r, &arch, seed));
        }
    }
    let cost_of = |key: &RunKey| costs[&(key.network.dims().to_vec(), key.arch.clone(), key.rule)].clone();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let done: Vec<Vec<RunResult>> = pool.install(|| {
        jobs.par_iter()
            .zip(members.par_iter())
            .map(|((tk, r), keys)| {
                let history = train(&r.network, &r.train_config(tk.seed), train_set, val_set)?;
                let mut out = Vec::with_capacity(keys.len());
                for key in keys {
                    let result = RunResult {
                        key: key.clone(),
                        history: history.clone(),
                        cost: cost_of(key),
                    };
                    on_done(&result)?;
                    out.push(result);
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut runs: Vec<RunResult> = done.into_iter().flatten().collect();
    runs.sort_by(|a, b| a.key.cmp(&b.key));
    let table = ToAccuracyTable::build(&runs, &plan.thresholds);
    Ok(PlanResults { runs, table })
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn opt<V: ToString>(v: Option<V>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn key_cells(k: &RunKey) -> Vec<String> {
    vec![
        k.network.to_string(),
        k.arch.clone(),
        k.rule.to_string(),
        k.lr.to_string(),
        format!("{:?}", k.precision).to_lowercase(),
        k.seed.to_string(),
    ]
}

const KEY_HEADER: [&str; 6] = ["network", "arch", "rule", "lr", "precision", "seed"];

fn with_key(extra: &[&'static str]) -> Vec<&'static str> {
    KEY_HEADER.iter().chain(extra).copied().collect()
}

pub fn convergence_csv(results: &PlanResults) -> Result<Vec<u8>> {
    let rows = results.runs.iter().flat_map(|r| {
        r.history.records.iter().map(move |e| {
            let mut row = key_cells(&r.key);
            row.extend([
                e.epoch.to_string(),
                e.val_acc.to_string(),
                e.loss.to_string(),
                e.updates.to_string(),
                e.macs.to_string(),
                opt(r.history.diverged_at),
            ]);
            row
        })
    });
    csv_bytes(&with_key(&["epoch", "val_acc", "loss", "updates", "macs", "diverged_at"]), rows)
}

pub fn energy_csv(results: &PlanResults) -> Result<Vec<u8>> {
    let rows = results.table.entries.iter().map(|e| {
        let mut row = key_cells(&e.key);
        row.extend([
            e.threshold.to_string(),
            opt(e.epochs),
            opt(e.energy_j),
            opt(e.energy.map(|b| b.fpu_j)),
            opt(e.energy.map(|b| b.memory())),
        ]);
        row
    });
    csv_bytes(&with_key(&["threshold", "epochs", "energy_j", "fpu_j", "memory_j"]), rows)
}

pub fn time_csv(results: &PlanResults) -> Result<Vec<u8>> {
    let rows = results.table.entries.iter().map(|e| {
        let mut row = key_cells(&e.key);
        row.extend([e.threshold.to_string(), opt(e.epochs), opt(e.time_s)]);
        row
    });
    csv_bytes(&with_key(&["threshold", "epochs", "time_s"]), rows)
}

/// One row per (network, architecture, rule).
pub fn gflops_csv(results: &PlanResults) -> Result<Vec<u8>> {
    let mut seen = BTreeMap::new();
    for r in &results.runs {
        if let Some(c) = &r.cost {
            seen.entry((r.key.network.dims().to_vec(), r.key.arch.clone(), r.key.rule))
                .or_insert(c);
        }
    }
    let rows = seen.values().map(|c| {
        vec![
            c.network.clone(),
            c.arch.clone(),
            c.rule.to_string(),
            c.fits.to_string(),
            c.utilization.to_string(),
            c.cycles.to_string(),
            c.energy_j.to_string(),
            c.energy.fpu_j.to_string(),
            c.energy.memory().to_string(),
            c.area_mm2.to_string(),
            c.gflops_per_w.to_string(),
            c.gflops_per_mm2.to_string(),
        ]
    });
    csv_bytes(
        &[
            "network",
            "arch",
            "rule",
            "fits",
            "utilization",
            "cycles_per_epoch",
            "energy_per_epoch_j",
            "fpu_j",
            "memory_j",
            "area_mm2",
            "gflops_per_w",
            "gflops_per_mm2",
        ],
        rows,
    )
}

fn mean_curves(results: &PlanResults, point: impl Fn(&RunResult) -> Vec<(f64, f64)>) -> Vec<Series> {
    let mut groups: BTreeMap<String, Vec<Vec<(f64, f64)>>> = BTreeMap::new();
    for r in &results.runs {
        groups.entry(r.key.group()).or_default().push(point(r));
    }
    groups
        .into_iter()
        .map(|(name, curves)| {
            let mut xs: Vec<f64> = curves.iter().flatten().map(|p| p.0).collect();
            xs.sort_by(f64::total_cmp);
            xs.dedup();
            let points = xs
                .into_iter()
                .filter_map(|x| {
                    let ys: Vec<f64> = curves
                        .iter()
                        .filter_map(|c| c.iter().find(|p| p.0 == x).map(|p| p.1))
                        .collect();
                    (ys.len() == curves.len()).then(|| (x, ys.iter().sum::<f64>() / ys.len() as f64))
                })
                .collect();
            Series { name, points }
        })
        .filter(|s: &Series| !s.points.is_empty())
        .collect()
}

fn threshold_points(results: &PlanResults, r: &RunResult, f: impl Fn(&ToAccuracyEntry) -> Option<f64>) -> Vec<(f64, f64)> {
    results
        .table
        .thresholds
        .iter()
        .filter_map(|&t| results.table.get(&r.key, t).and_then(&f).map(|v| (t, v)))
        .collect()
}

pub fn convergence_svg(results: &PlanResults) -> String {
    let mut c = LineChart::new("Validation accuracy per epoch", "epoch", "validation accuracy");
    c.series = mean_curves(results, |r| {
        r.history.records.iter().map(|e| (e.epoch as f64, e.val_acc)).collect()
    });
    c.render()
}

pub fn energy_svg(results: &PlanResults) -> String {
    let mut c = LineChart::new("Energy to reach accuracy", "accuracy", "energy (J)");
    c.log_y = true;
    c.series = mean_curves(results, |r| threshold_points(results, r, |e| e.energy_j));
    c.render()
}

pub fn time_svg(results: &PlanResults) -> String {
    let mut c = LineChart::new("Time to reach accuracy", "accuracy", "time (s)");
    c.log_y = true;
    c.series = mean_curves(results, |r| threshold_points(results, r, |e| e.time_s));
    c.render()
}

pub const OUTPUT_FILES: [&str; 7] = [
    "fig4_convergence.csv",
    "fig5_energy.csv",
    "fig8_time.csv",
    "table2_gflops.csv",
    "fig4_convergence.svg",
    "fig5_energy.svg",
    "fig8_time.svg",
];

/// Writes the figure-analog CSVs and charts into `dir`.
pub fn write_outputs(results: &PlanResults, dir: &Path) -> Result<Vec<PathBuf>> {
    let contents: [Vec<u8>; 7] = [
        convergence_csv(results)?,
        energy_csv(results)?,
        time_csv(results)?,
        gflops_csv(results)?,
        convergence_svg(results).into_bytes(),
        energy_svg(results).into_bytes(),
        time_svg(results).into_bytes(),
    ];
    let mut paths = Vec::new();
    for (name, bytes) in OUTPUT_FILES.iter().zip(contents) {
        let p = dir.join(name);
        atomic_write(&p, &bytes)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Writes the history CSV and the joined JSON of one run under `dir/runs`.
pub fn write_run_outputs(result: &RunResult, dir: &Path) -> Result<()> {
    let runs = dir.join("runs");
    let stem = result.key.file_stem();
    let mut csv = Vec::new();
    result.history.write_csv(&mut csv)?;
    atomic_write(&runs.join(format!("{stem}.csv")), &csv)?;
    let json = serde_json::to_vec_pretty(result)?;
    atomic_write(&runs.join(format!("{stem}.json")), &json)
}

/// Counts of one layer over an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerCounts {
    pub macs: u64,
    pub weight_accesses: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub layer: usize,
    pub quantity: String,
    pub expected: u64,
    pub measured: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub network: String,
    pub rule: LearningRule,
    pub k: usize,
    pub expected: Vec<LayerCounts>,
    pub measured: Vec<LayerCounts>,
    pub first_mismatch: Option<Mismatch>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.first_mismatch.is_none()
    }
}

/// Closed-form per-layer counts for one epoch over `k` samples.
pub fn analytic_layer_counts(spec: &NetworkSpec, k: usize, rule: LearningRule) -> Vec<LayerCounts> {
    let k = k as u64;
    let macs = mac_counts_by_layer(spec, k, rule, CountMode::Exact);
    let words = weight_access_counts_by_layer(spec, k, rule, CountMode::Exact, AccessFormula::Final);
    macs.iter()
        .zip(&words)
        .map(|(m, w)| LayerCounts {
            macs: m.training(),
            weight_accesses: w.total(),
        })
        .collect()
}

fn synthetic<T: Scalar>(k: usize, width: usize, seed: u64) -> Result<Dataset<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<u8> = (0..k).map(|_| rng.gen_range(0..10u8)).collect();
    let pixels: Vec<u8> = (0..k * width).map(|_| rng.gen()).collect();
    Dataset::from_bytes(&pixels, classes, (1, width as u32))
}

/// Per-layer counters from one instrumented training epoch on synthetic data.
pub fn instrumented_layer_counts(spec: &NetworkSpec, rule: LearningRule, k: usize, seed: u64) -> Result<Vec<LayerCounts>> {
    if spec.output() != crate::dataset::NUM_CLASSES {
        return Err(Error::Validation(format!(
            "counter check needs {} outputs, {spec} has {}",
            crate::dataset::NUM_CLASSES,
            spec.output()
        )));
    }
    if k == 0 {
        return Err(Error::Validation("counter check needs at least one sample".into()));
    }
    let data = synthetic::<f64>(k, spec.input(), seed)?;
    let cfg = TrainConfig::new(rule, 1, seed);
    let params = init_params(spec, seed, rule.feedback());
    let stats = if rule.is_pipelined() {
        cp_epoch(params, &cfg, &data, 0)?.1
    } else {
        let mut params = params;
        batch_epoch(&mut params, &cfg, &data, 0)?
    };
    Ok(stats
        .per_layer
        .iter()
        .map(|c| LayerCounts {
            macs: c.macs,
            weight_accesses: c.weight_accesses,
        })
        .collect())
}

/// Compares `expected` per-layer counts with an instrumented epoch.
pub fn oracle_check_against(
    spec: &NetworkSpec,
    rule: LearningRule,
    k: usize,
    seed: u64,
    expected: Vec<LayerCounts>,
) -> Result<OracleReport> {
    let measured = instrumented_layer_counts(spec, rule, k, seed)?;
    if expected.len() != measured.len() {
        return Err(Error::shape(
            "oracle_check",
            format!("{} expected layers, {} measured", expected.len(), measured.len()),
        ));
    }
    let first_mismatch = expected.iter().zip(&measured).enumerate().find_map(|(layer, (e, m))| {
        if e.macs != m.macs {
            Some(Mismatch {
                layer,
                quantity: "macs".into(),
                expected: e.macs,
                measured: m.macs,
            })
        } else if e.weight_accesses != m.weight_accesses {
            Some(Mismatch {
                layer,
                quantity: "weight_accesses".into(),
                expected: e.weight_accesses,
                measured: m.weight_accesses,
            })
        } else {
            None
        }
    });
    Ok(OracleReport {
        network: spec.to_string(),
        rule,
        k,
        expected,
        measured,
        first_mismatch,
    })
}

pub fn oracle_check(spec: &NetworkSpec, rule: LearningRule, k: usize, seed: u64) -> Result<OracleReport> {
    oracle_check_against(spec, rule, k, seed, analytic_layer_counts(spec, k, rule))
}

/// Random networks with 1 to 4 weight layers, widths and `k` at most 64.
pub fn random_instances(count: usize, seed: u64) -> Vec<(NetworkSpec, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let layers = rng.gen_range(1..=4);
            let mut dims: Vec<usize> = (0..layers).map(|_| rng.gen_range(1..=64)).collect();
            dims.push(crate::dataset::NUM_CLASSES);
            let k = rng.gen_range(1..=64);
            (NetworkSpec::new(dims).expect("positive widths"), k)
        })
        .collect()
}

pub const CHECK_RULES: [LearningRule; 6] = [
    LearningRule::Sgd,
    LearningRule::Mbgd { batch: 4 },
    LearningRule::Dfa { batch: 4 },
    LearningRule::Cp,
    LearningRule::Fa { batch: 3 },
    LearningRule::Mbcp { batch: 5 },
];

/// `per_rule` random instances for each rule in [`CHECK_RULES`].
pub fn oracle_suite(per_rule: usize, seed: u64) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    for (r, rule) in CHECK_RULES.iter().enumerate() {
        for (i, (spec, k)) in random_instances(per_rule, seed + r as u64).into_iter().enumerate() {
            out.push(oracle_check(&spec, *rule, k, seed + i as u64)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(k: usize, d: usize, seed: u64) -> Dataset<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes: Vec<u8> = (0..k).map(|i| (i % 10) as u8).collect();
        let pixels: Vec<u8> = (0..k * d)
            .map(|i| if i % d == classes[i / d] as usize % d { 255 } else { rng.gen_range(0..40) })
            .collect();
        Dataset::from_bytes(&pixels, classes, (1, d as u32)).unwrap()
    }

    fn run(dims: &[usize], rule: LearningRule, seeds: Vec<u64>, epochs: usize) -> RunSpec {
        RunSpec {
            network: NetworkSpec::new(dims.to_vec()).unwrap(),
            rule,
            lr: Some(0.05),
            arch: ArchSpec::default(),
            seeds,
            epochs,
            precision: Precision::Native,
        }
    }

    fn plan(runs: Vec<RunSpec>) -> ExperimentPlan {
        ExperimentPlan {
            runs,
            thresholds: vec![0.5, 0.9, 1.0],
            accounting: Accounting::default(),
        }
    }

    #[test]
    fn oracle_passes_and_negative_control_names_the_layer() {
        let s = NetworkSpec::new(vec![12, 9, 7, 10]).unwrap();
        for rule in CHECK_RULES {
            let r = oracle_check(&s, rule, 13, 4).unwrap();
            assert!(r.passed(), "{rule}: {:?}", r.first_mismatch);
        }
        let mut bad = analytic_layer_counts(&s, 13, LearningRule::Sgd);
        // Off-by-one layer: drop the backward term of layer 1 as if it were the input layer.
        bad[1].macs -= 13 * 9 * 7;
        let r = oracle_check_against(&s, LearningRule::Sgd, 13, 4, bad).unwrap();
        let m = r.first_mismatch.unwrap();
        assert_eq!((m.layer, m.quantity.as_str()), (1, "macs"));
    }

    #[test]
    fn single_layer_nets_pass() {
        let s = NetworkSpec::new(vec![20, 10]).unwrap();
        for rule in CHECK_RULES {
            assert!(oracle_check(&s, rule, 7, 0).unwrap().passed());
        }
        assert!(oracle_check(&NetworkSpec::new(vec![4, 3]).unwrap(), LearningRule::Sgd, 3, 0).is_err());
    }

    #[test]
    fn plan_validation() {
        let mut p = plan(vec![run(&[4, 10], LearningRule::Sgd, vec![0], 1)]);
        assert!(p.validate().is_ok());
        p.thresholds = vec![0.9, 0.9];
        assert!(p.validate().is_err());
        let p = plan(vec![run(&[4, 10], LearningRule::Sgd, vec![], 1)]);
        assert!(p.validate().is_err());
        let p = plan(vec![run(&[4, 10], LearningRule::Sgd, vec![1, 1], 1)]);
        assert!(p.validate().is_err());
        assert!(ExperimentPlan::paper_default().validate().is_ok());
    }

    #[test]
    fn plan_json_round_trip_and_strictness() {
        let p = ExperimentPlan::paper_default();
        let back: ExperimentPlan = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
        let j = r#"{"runs": [{"network": [4, 10], "rule": {"kind": "sgd"}, "seeds": [0], "epochs": 1, "arch": "large"}]}"#;
        let p: ExperimentPlan = serde_json::from_str(j).unwrap();
        assert_eq!(p.thresholds, DEFAULT_THRESHOLDS.to_vec());
        assert_eq!(p.runs[0].arch.resolve().unwrap(), ArchConfig::large());
        let bad = r#"{"runs": [{"network": [4, 10], "rule": {"kind": "sgd"}, "seeds": [0], "epochs": 1, "colour": 1}]}"#;
        assert!(serde_json::from_str::<ExperimentPlan>(bad).is_err());
    }

    #[test]
    fn join_is_epochs_times_epoch_cost_and_monotone() {
        let data = toy(60, 16, 1);
        let p = plan(vec![
            run(&[16, 12, 10], LearningRule::Sgd, vec![0, 1], 4),
            run(&[16, 12, 10], LearningRule::Fa { batch: 2 }, vec![0], 2),
        ]);
        let res = run_plan(&p, &data, &data, 2).unwrap();
        assert_eq!(res.runs.len(), 3);
        assert!(res.runs.windows(2).all(|w| w[0].key < w[1].key));
        for r in &res.runs {
            let mut last = 0;
            for &t in &p.thresholds {
                let e = res.table.get(&r.key, t).unwrap();
                match (e.epochs, &r.cost) {
                    (Some(n), Some(c)) => {
                        assert!(n >= last);
                        last = n;
                        assert_eq!(e.energy_j, Some(n as f64 * c.energy_j));
                        assert_eq!(e.time_s, Some(n as f64 * c.seconds));
                    }
                    (Some(n), None) => {
                        assert!(n >= last);
                        last = n;
                        assert!(e.energy_j.is_none());
                    }
                    (None, _) => {
                        last = usize::MAX;
                        assert!(e.energy_j.is_none() && e.time_s.is_none());
                    }
                }
            }
        }
        let fa = res.find(&[16, 12, 10], "2x16x4x4", LearningRule::Fa { batch: 2 });
        assert!(fa[0].cost.is_none());
    }

    #[test]
    fn unreached_threshold_leaves_cells_empty() {
        let data = toy(30, 8, 2);
        let mut p = plan(vec![run(&[8, 10], LearningRule::Sgd, vec![0], 1)]);
        p.runs[0].lr = Some(0.0);
        p.thresholds = vec![0.999];
        let res = run_plan(&p, &data, &data, 1).unwrap();
        let e = &res.table.entries[0];
        assert_eq!((e.epochs, e.energy_j, e.time_s), (None, None, None));
        let csv = String::from_utf8(energy_csv(&res).unwrap()).unwrap();
        assert!(csv.lines().nth(1).unwrap().ends_with("0.999,,,,"));
    }

    #[test]
    fn outputs_are_independent_of_worker_count_and_shared_jobs_train_once() {
        let data = toy(50, 12, 3);
        let mut runs = vec![
            run(&[12, 8, 10], LearningRule::Sgd, vec![0, 1], 2),
            run(&[12, 8, 10], LearningRule::Cp, vec![0], 2),
            run(&[12, 10], LearningRule::Mbgd { batch: 4 }, vec![2], 2),
        ];
        let mut large = runs[0].clone();
        large.arch = ArchSpec::Preset("large".into());
        runs.push(large);
        let p = plan(runs);
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let a = run_plan_with(&p, &data, &data, 1, &|_| {
            calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(())
        })
        .unwrap();
        assert_eq!(calls.into_inner(), 6);
        let b = run_plan(&p, &data, &data, 3).unwrap();
        for f in [convergence_csv, energy_csv, time_csv, gflops_csv] {
            assert_eq!(f(&a).unwrap(), f(&b).unwrap());
        }
        assert_eq!(convergence_svg(&a), convergence_svg(&b));
        let small = a.find(&[12, 8, 10], "2x16x4x4", LearningRule::Sgd);
        let large = a.find(&[12, 8, 10], "2x4x16x16", LearningRule::Sgd);
        assert_eq!(small[0].history, large[0].history);
        assert_ne!(small[0].cost, large[0].cost);
    }

    #[test]
    fn atomic_outputs_land_in_place() {
        let data = toy(20, 6, 4);
        let p = plan(vec![run(&[6, 10], LearningRule::Sgd, vec![0], 1)]);
        let dir = tempfile::tempdir().unwrap();
        let res = run_plan_with(&p, &data, &data, 1, &|r| write_run_outputs(r, dir.path())).unwrap();
        let paths = write_outputs(&res, dir.path()).unwrap();
        assert_eq!(paths.len(), OUTPUT_FILES.len());
        for p in &paths {
            assert!(p.exists());
        }
        let runs: Vec<_> = fs::read_dir(dir.path().join("runs")).unwrap().collect();
        assert_eq!(runs.len(), 2);
        assert!(fs::read_dir(dir.path())
            .unwrap()
            .all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
        let head = fs::read_to_string(dir.path().join("fig4_convergence.csv")).unwrap();
        assert!(head.starts_with("network,arch,rule,lr,precision,seed,epoch,val_acc"));
    }

    #[test]
    fn scaled_plan_caps_budget() {
        let p = ExperimentPlan::paper_default().scaled(2, 1);
        assert!(p.runs.iter().all(|r| r.epochs <= 2 && r.seeds.len() == 1));
        let mb8 = p.runs.iter().find(|r| r.rule == LearningRule::Mbgd { batch: 8 }).unwrap();
        assert_eq!(mb8.lr(), MBGD8_LR);
    }
}

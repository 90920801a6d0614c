//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. MNIST is read from `MNIST_DIR` (default `data/mnist` at the
//! workspace root).

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use cgra_train::archmodel::{
    area, area_raw, calibrate_overhead, collective_cycles, cost_report, mem_fit, reduction_cycles, Accounting,
    ArchConfig, CollectiveKind, FitMode, DEFAULT_INTERCONNECT_OVERHEAD,
};
use cgra_train::dataset::{load_mnist_train, subset, Dataset};
use cgra_train::experiments::{
    oracle_suite, run_plan, write_outputs, ArchSpec, ExperimentPlan, PlanResults, RunSpec, CHECK_RULES, MBGD8_LR,
    OUTPUT_FILES,
};
use cgra_train::learners::LearningRule;
use cgra_train::linalg::softmax_xent;
use cgra_train::network::{backward_bp, forward, init_params};
use cgra_train::{Matrix, NetworkSpec, OpCounters, Precision};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_INSTANCES: usize = 20;
const ORACLE_BUDGET_S: f64 = 10.0;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_BUDGET_S: f64 = 1.0;
const RAW_SMALL_MM2: f64 = 96.7936;
const RAW_LARGE_MM2: f64 = 153.4144;
const AREA_TARGETS_MM2: [f64; 2] = [103.2, 178.9];
const AREA_TOL: f64 = 0.20;
const TABLE2_TOL: f64 = 0.25;
const CP_FIT_UTIL_MIN: f64 = 0.90;
const NOFIT_UTIL_TARGETS: [(f64, f64); 2] = [(0.75, 0.10), (0.47, 0.10)];
const CONV_TRAIN: usize = 10_000;
const CONV_VAL: usize = 2_000;
const CONV_EPOCHS: usize = 10;
const CONV_SEEDS: [u64; 3] = [0, 1, 2];
const SGD_TARGET: f64 = 0.90;
const CP_SLACK: f64 = 0.01;
const HALF_SLACK: f64 = 0.01;
const CONV_BUDGET_S: f64 = 30.0 * 60.0;
const DET_TRAIN: usize = 300;
const DET_VAL: usize = 100;
const K_COST: u64 = 10_000;

struct Line {
    pass: bool,
    detail: String,
}

fn line(pass: bool, detail: impl Into<String>) -> Line {
    Line {
        pass,
        detail: detail.into(),
    }
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn net(d: &[usize]) -> NetworkSpec {
    NetworkSpec::new(d.to_vec()).unwrap()
}

fn small_net() -> NetworkSpec {
    net(&[784, 500, 500, 500, 10])
}

fn large_net() -> NetworkSpec {
    net(&[784, 2500, 2000, 1500, 1000, 500, 10])
}

fn counter_oracle() -> Line {
    let t = Instant::now();
    let reports = match oracle_suite(ORACLE_INSTANCES, 2024) {
        Ok(r) => r,
        Err(e) => return line(false, e.to_string()),
    };
    let s = t.elapsed().as_secs_f64();
    let bad: Vec<String> = reports
        .iter()
        .filter_map(|r| {
            r.first_mismatch
                .as_ref()
                .map(|m| format!("{} {} layer {} {}", r.network, r.rule, m.layer, m.quantity))
        })
        .collect();
    line(
        bad.is_empty() && s < ORACLE_BUDGET_S,
        format!(
            "{} of {} instances ({} per rule, {} rules) exact, {s:.2}s (budget {ORACLE_BUDGET_S}s){}",
            reports.len() - bad.len(),
            reports.len(),
            ORACLE_INSTANCES,
            CHECK_RULES.len(),
            if bad.is_empty() { String::new() } else { format!("; first: {}", bad[0]) }
        ),
    )
}

fn gradient_check() -> Line {
    let t = Instant::now();
    let spec = net(&[6, 8, 5, 3]);
    let mut p = init_params::<f64>(&spec, 11, None);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Matrix::from_fn(4, 6, |_, _| rng.gen_range(-1.0..1.0));
    let y = Matrix::from_fn(4, 3, |r, c| if c == r % 3 { 1.0 } else { 0.0 });
    let mut c = OpCounters::new();
    let cache = forward(&p, &x, &mut c).unwrap();
    let g = backward_bp(&p, &cache, &y, &mut c).unwrap();
    let loss = |p: &cgra_train::Params64| {
        let mut c = OpCounters::new();
        let cache = forward(p, &x, &mut c).unwrap();
        softmax_xent(cache.pre.last().unwrap(), &y).unwrap().loss
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for l in 0..spec.layers() {
        let (rows, cols) = spec.shape(l);
        for i in 0..rows {
            for j in 0..cols {
                let w0 = p.weights()[l].get(i, j);
                p.weights_mut()[l].set(i, j, w0 + h);
                let up = loss(&p);
                p.weights_mut()[l].set(i, j, w0 - h);
                let down = loss(&p);
                p.weights_mut()[l].set(i, j, w0);
                let num = (up - down) / (2.0 * h);
                let ana = g.weights[l].get(i, j);
                worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-8));
            }
        }
    }
    let s = t.elapsed().as_secs_f64();
    line(
        worst <= GRAD_REL_TOL && s < GRAD_BUDGET_S,
        format!("6-8-5-3 max rel. error {worst:.2e} (tol {GRAD_REL_TOL:.0e}), {s:.3}s"),
    )
}

fn fit_matrix() -> Line {
    let f = |s: &NetworkSpec, a: &ArchConfig| mem_fit(s, a, LearningRule::Sgd, FitMode::Physical).fits;
    let got = [
        f(&small_net(), &ArchConfig::small()),
        f(&large_net(), &ArchConfig::small()),
        f(&large_net(), &ArchConfig::large()),
    ];
    line(
        got == [true, false, true],
        format!("small@2x16x4x4={} large@2x16x4x4={} large@2x4x16x16={}", got[0], got[1], got[2]),
    )
}

fn area_model() -> Line {
    let (s, l) = (ArchConfig::small(), ArchConfig::large());
    let raw = [area_raw(&s), area_raw(&l)];
    let raw_ok = (raw[0] - RAW_SMALL_MM2).abs() < 1e-9
        && (raw[1] - RAW_LARGE_MM2).abs() < 1e-9
        && format!("{:.1}/{:.1}", raw[0], raw[1]) == "96.8/153.4";
    let o = calibrate_overhead(&[(raw[0], AREA_TARGETS_MM2[0]), (raw[1], AREA_TARGETS_MM2[1])]).unwrap();
    let cal = [area(&s), area(&l)];
    let errs = [cal[0] / AREA_TARGETS_MM2[0] - 1.0, cal[1] / AREA_TARGETS_MM2[1] - 1.0];
    let ok = raw_ok && (o - DEFAULT_INTERCONNECT_OVERHEAD).abs() < 5e-4 && errs.iter().all(|e| e.abs() <= AREA_TOL);
    line(
        ok,
        format!(
            "raw {:.4}/{:.4} mm2; overhead {:.4}; areas {:.1}/{:.1} mm2 ({:+.1}%/{:+.1}%, tol ±{:.0}%)",
            raw[0],
            raw[1],
            o,
            cal[0],
            cal[1],
            100.0 * errs[0],
            100.0 * errs[1],
            100.0 * AREA_TOL
        ),
    )
}

fn cycle_formulas() -> Line {
    let got = (
        reduction_cycles(16, false),
        reduction_cycles(16, true),
        collective_cycles(512, 64, 8, 16, CollectiveKind::AllGather),
        collective_cycles(512, 64, 8, 16, CollectiveKind::ReduceScatter),
    );
    line(
        got == (15, 3, 1792.0, 1792.0),
        format!("reduction bus {} tree {}; all-gather {} reduce-scatter {}", got.0, got.1, got.2, got.3),
    )
}

fn gflops(spec: &NetworkSpec, arch: &ArchConfig, rule: LearningRule) -> (f64, f64) {
    let r = cost_report(spec, arch, rule, K_COST, &Accounting::default()).unwrap();
    (r.gflops_per_w, r.utilization)
}

const MB: LearningRule = LearningRule::Mbgd { batch: 50 };

fn table2() -> Line {
    // (scenario, network, arch, [(rule, published GFLOPS/W)] in published order)
    let scenarios = [
        ("small-fit", small_net(), ArchConfig::small(), [(LearningRule::Cp, 204.0), (MB, 195.0), (LearningRule::Sgd, 177.0)]),
        ("large-no-fit", large_net(), ArchConfig::small(), [(MB, 187.0), (LearningRule::Cp, 127.0), (LearningRule::Sgd, 98.0)]),
        ("large-fit", large_net(), ArchConfig::large(), [(LearningRule::Cp, 211.0), (MB, 195.0), (LearningRule::Sgd, 185.0)]),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, spec, arch, rows) in &scenarios {
        let got: Vec<f64> = rows.iter().map(|(r, _)| gflops(spec, arch, *r).0).collect();
        let ordered = got.windows(2).all(|w| w[0] > w[1]);
        let banded = rows.iter().zip(&got).all(|((_, want), g)| (g / want - 1.0).abs() <= TABLE2_TOL);
        ok &= ordered && banded;
        let cells: Vec<String> = rows
            .iter()
            .zip(&got)
            .map(|((r, want), g)| format!("{r} {g:.1} ({want})"))
            .collect();
        parts.push(format!("{name}: {}{}", cells.join(" > "), if ordered { "" } else { " ORDER BROKEN" }));
    }
    line(ok, format!("{} [±{:.0}%]", parts.join("; "), 100.0 * TABLE2_TOL))
}

fn utilization() -> Line {
    let cp_small = gflops(&small_net(), &ArchConfig::small(), LearningRule::Cp).1;
    let cp_large = gflops(&large_net(), &ArchConfig::large(), LearningRule::Cp).1;
    let cp_nofit = gflops(&large_net(), &ArchConfig::small(), LearningRule::Cp).1;
    let sgd_nofit = gflops(&large_net(), &ArchConfig::small(), LearningRule::Sgd).1;
    let [(cp_t, cp_tol), (sgd_t, sgd_tol)] = NOFIT_UTIL_TARGETS;
    let ok = cp_small >= CP_FIT_UTIL_MIN
        && cp_large >= CP_FIT_UTIL_MIN
        && (cp_nofit - cp_t).abs() <= cp_tol
        && (sgd_nofit - sgd_t).abs() <= sgd_tol;
    line(
        ok,
        format!(
            "CP fitting {:.1}%/{:.1}% (min {:.0}%); no-fit CP {:.1}% (75±10), SGD {:.1}% (47±10)",
            100.0 * cp_small,
            100.0 * cp_large,
            100.0 * CP_FIT_UTIL_MIN,
            100.0 * cp_nofit,
            100.0 * sgd_nofit
        ),
    )
}

fn conv_run(rule: LearningRule, lr: Option<f64>, seeds: &[u64], precision: Precision) -> RunSpec {
    RunSpec {
        network: small_net(),
        rule,
        lr,
        arch: ArchSpec::default(),
        seeds: seeds.to_vec(),
        epochs: CONV_EPOCHS,
        precision,
    }
}

fn finals(res: &PlanResults, rule: LearningRule, precision: Precision) -> Vec<f64> {
    CONV_SEEDS
        .iter()
        .filter_map(|&s| {
            res.runs
                .iter()
                .find(|r| r.key.rule == rule && r.key.seed == s && r.key.precision == precision)
                .map(|r| r.history.final_accuracy())
        })
        .collect()
}

fn majority(votes: impl Iterator<Item = bool>) -> (usize, bool) {
    let v: Vec<bool> = votes.collect();
    let yes = v.iter().filter(|&&b| b).count();
    (yes, 2 * yes > v.len())
}

fn pct(v: &[f64]) -> String {
    v.iter().map(|a| format!("{:.2}", 100.0 * a)).collect::<Vec<_>>().join("/")
}

fn convergence(data: &Option<(Dataset<f32>, Dataset<f32>)>) -> (Line, Line) {
    let Some((train, val)) = data else {
        let msg = format!("MNIST not found in {}", mnist_dir().display());
        return (line(false, msg.clone()), line(false, msg));
    };
    let sgd = LearningRule::Sgd;
    let mb = |batch| LearningRule::Mbgd { batch };
    let dfa = LearningRule::Dfa { batch: 1 };
    let plan = ExperimentPlan {
        runs: vec![
            conv_run(sgd, None, &CONV_SEEDS, Precision::Native),
            conv_run(sgd, None, &CONV_SEEDS[..1], Precision::Half),
            conv_run(LearningRule::Cp, None, &CONV_SEEDS, Precision::Native),
            conv_run(mb(2), None, &CONV_SEEDS, Precision::Native),
            conv_run(mb(4), None, &CONV_SEEDS, Precision::Native),
            conv_run(mb(8), Some(MBGD8_LR), &CONV_SEEDS, Precision::Native),
            conv_run(dfa, None, &CONV_SEEDS, Precision::Native),
        ],
        thresholds: vec![SGD_TARGET],
        accounting: Accounting::default(),
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let t = Instant::now();
    let res = match run_plan(&plan, train, val, workers) {
        Ok(r) => r,
        Err(e) => return (line(false, e.to_string()), line(false, e.to_string())),
    };
    let s = t.elapsed().as_secs_f64();
    let n = Precision::Native;
    let (f_sgd, f_cp, f_dfa) = (finals(&res, sgd, n), finals(&res, LearningRule::Cp, n), finals(&res, dfa, n));
    let (f2, f4, f8) = (finals(&res, mb(2), n), finals(&res, mb(4), n), finals(&res, mb(8), n));
    let reached: Vec<Option<usize>> = CONV_SEEDS
        .iter()
        .map(|&seed| {
            res.runs
                .iter()
                .find(|r| r.key.rule == sgd && r.key.seed == seed && r.key.precision == n)
                .and_then(|r| r.history.epochs_to(SGD_TARGET))
        })
        .collect();
    let (y1, c1) = majority(reached.iter().map(Option::is_some));
    let (y2, c2) = majority(f_cp.iter().zip(&f_sgd).map(|(c, s)| *c >= s - CP_SLACK));
    let (y3, c3) = majority((0..3).map(|i| f8[i] >= f2[i] && f8[i] >= f4[i]));
    let (y4, c4) = majority(f_dfa.iter().zip(&f_sgd).map(|(d, s)| d < s));
    let ok = c1 && c2 && c3 && c4 && s <= CONV_BUDGET_S;
    let conv = line(
        ok,
        format!(
            "SGD reaches {:.0}% at epochs {:?} [{y1}/3]; CP {} vs SGD {} [{y2}/3 within {:.0} pt]; \
             MBGD b8 {} vs b2 {} b4 {} [{y3}/3]; DFA {} < SGD [{y4}/3]; {CONV_EPOCHS} epochs, {:.0}s (budget {:.0}s)",
            100.0 * SGD_TARGET,
            reached,
            pct(&f_cp),
            pct(&f_sgd),
            100.0 * CP_SLACK,
            pct(&f8),
            pct(&f2),
            pct(&f4),
            pct(&f_dfa),
            s,
            CONV_BUDGET_S
        ),
    );
    let half = finals(&res, sgd, Precision::Half);
    let half_line = match (half.first(), f_sgd.first()) {
        (Some(h), Some(f)) => line(
            (h - f).abs() <= HALF_SLACK,
            format!(
                "SGD seed 0: f16 storage {:.2}% vs native {:.2}% (|Δ| {:.2} pt, tol {:.0} pt)",
                100.0 * h,
                100.0 * f,
                100.0 * (h - f).abs(),
                100.0 * HALF_SLACK
            ),
        ),
        _ => line(false, "missing runs"),
    };
    (conv, half_line)
}

fn synthetic(k: usize, seed: u64) -> Dataset<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<u8> = (0..k).map(|_| rng.gen_range(0..10)).collect();
    let pixels: Vec<u8> = (0..k * 784).map(|_| rng.gen()).collect();
    Dataset::from_bytes(&pixels, classes, (28, 28)).unwrap()
}

fn determinism(full: &Option<Dataset<f32>>) -> Line {
    let (train, val, source) = match full {
        Some(d) => {
            let (t, v) = subset(d, DET_TRAIN, DET_VAL, 3).unwrap();
            (t, v, "MNIST")
        }
        None => (synthetic(DET_TRAIN, 1), synthetic(DET_VAL, 2), "synthetic"),
    };
    let plan = ExperimentPlan::paper_default().scaled(1, 1);
    let t = Instant::now();
    let mut outputs = Vec::new();
    for workers in [1, 2] {
        let dir = tempfile::tempdir().unwrap();
        let res = match run_plan(&plan, &train, &val, workers) {
            Ok(r) => r,
            Err(e) => return line(false, e.to_string()),
        };
        write_outputs(&res, dir.path()).unwrap();
        let files: Vec<Vec<u8>> = OUTPUT_FILES.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
        outputs.push(files);
    }
    let same: Vec<&str> = OUTPUT_FILES
        .iter()
        .zip(outputs[0].iter().zip(&outputs[1]))
        .filter(|(_, (a, b))| a == b)
        .map(|(n, _)| *n)
        .collect();
    line(
        same.len() == OUTPUT_FILES.len(),
        format!(
            "default plan ({} runs, 1 epoch, 1 seed, {DET_TRAIN}/{DET_VAL} {source} samples) twice with 1 and 2 workers: {}/{} files identical, {:.0}s",
            plan.runs.len(),
            same.len(),
            OUTPUT_FILES.len(),
            t.elapsed().as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let full = load_mnist_train::<f32>(&mnist_dir()).ok();
    let conv_data = full.as_ref().map(|d| subset(d, CONV_TRAIN, CONV_VAL, 0).unwrap());
    let mut lines: Vec<(usize, &str, Line)> = vec![
        (1, "counter oracle", counter_oracle()),
        (2, "gradient check", gradient_check()),
        (3, "fit matrix", fit_matrix()),
        (4, "area model", area_model()),
        (5, "cycle formulas", cycle_formulas()),
        (6, "GFLOPS/W orderings", table2()),
        (7, "utilization", utilization()),
    ];
    let (conv, half) = convergence(&conv_data);
    lines.push((8, "convergence suite", conv));
    lines.push((9, "half-precision storage", half));
    lines.push((10, "sweep determinism", determinism(&full)));
    let mut failed = 0;
    for (id, name, l) in &lines {
        failed += usize::from(!l.pass);
        println!("{} [{id:>2}] {name}: {}", if l.pass { "PASS" } else { "FAIL" }, l.detail);
    }
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cgra_train::archmodel::{area, area_raw, cost_report, energy_of, Accounting, ArchConfig, CostReport};
use cgra_train::dataset::{load_mnist_train, subset, Dataset};
use cgra_train::experiments::{
    atomic_write, oracle_suite, run_plan_with, write_outputs, write_run_outputs, ExperimentPlan,
};
use cgra_train::learners::fit;
use cgra_train::network::write_params;
use cgra_train::svg::{LineChart, Series};
use cgra_train::Error;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "cgra-train", version, about = "Train MLPs with backpropagation variants and cost them on a CGRA model")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON configuration document.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel training runs in a sweep.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Print the resolved configuration and exit without touching files.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Directory holding the MNIST IDX files
    #[arg(long, global = true)]
    mnist_dir: Option<PathBuf>,
    /// Training subset size
    #[arg(long, global = true)]
    train_size: Option<usize>,
    /// Validation subset size
    #[arg(long, global = true)]
    val_size: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one network and write its history.
    Train,
    /// Report cycles, energy, area and efficiency for the configured triple.
    Cost {
        /// Also recompute the published constant-derived bounds.
        #[arg(long)]
        paper_check: bool,
    },
    /// Run an experiment plan and write the figure-analog outputs.
    Sweep {
        /// Plan file; otherwise the config's plan or the default plan.
        plan: Option<PathBuf>,
        /// Cap every run at this many epochs.
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Keep at most this many seeds per run.
        #[arg(long)]
        max_seeds: Option<usize>,
    },
    /// Compare analytical counts against instrumented training counters.
    Check {
        /// Random instances per rule.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Check(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) | Failure::Check(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Validation(_) | Error::Unsupported(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn load_config(g: &Global) -> std::result::Result<RunConfig, Failure> {
    let mut c = match &g.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Config(format!("config {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = &g.out {
        c.out = v.clone();
    }
    if let Some(v) = g.seed {
        c.seed = v;
    }
    if let Some(v) = g.workers {
        c.workers = v;
    }
    if let Some(v) = &g.mnist_dir {
        c.data.mnist_dir = v.clone();
    }
    if let Some(v) = g.train_size {
        c.data.train_size = v;
    }
    if let Some(v) = g.val_size {
        c.data.val_size = v;
    }
    c.validate()?;
    Ok(c)
}

fn load_data(c: &RunConfig) -> std::result::Result<(Dataset<f32>, Dataset<f32>), Failure> {
    let dir = &c.data.mnist_dir;
    let full = load_mnist_train::<f32>(dir).map_err(|e| match e {
        Error::Io(io) => Failure::Config(format!(
            "cannot load MNIST from {}: {io}; pass --mnist-dir or set data.mnist_dir to the directory holding train-images-idx3-ubyte and train-labels-idx1-ubyte",
            dir.display()
        )),
        other => other.into(),
    })?;
    Ok(subset(&full, c.data.train_size, c.data.val_size, c.seed)?)
}

fn print_json<T: serde::Serialize>(v: &T) -> Outcome {
    let s = serde_json::to_string_pretty(v).map_err(|e| Failure::Runtime(e.to_string()))?;
    let _ = writeln!(std::io::stdout().lock(), "{s}");
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> Outcome {
    Ok(atomic_write(path, bytes)?)
}

fn cmd_train(c: &RunConfig, dry_run: bool) -> Outcome {
    if dry_run {
        return print_json(c);
    }
    let (train_set, val_set) = load_data(c)?;
    let cfg = c.train_config();
    let (history, params) = fit(&c.network, &cfg, &train_set, &val_set)?;
    let mut csv = Vec::new();
    history.write_csv(&mut csv)?;
    write(&c.out.join("history.csv"), &csv)?;
    let json = serde_json::to_vec_pretty(&history).map_err(|e| Failure::Runtime(e.to_string()))?;
    write(&c.out.join("history.json"), &json)?;
    let mut chart = LineChart::new(&format!("{} {}", c.network, cfg.rule), "epoch", "validation accuracy");
    chart.series.push(Series {
        name: cfg.rule.to_string(),
        points: history.records.iter().map(|r| (r.epoch as f64, r.val_acc)).collect(),
    });
    write(&c.out.join("accuracy.svg"), chart.render().as_bytes())?;
    let mut bin = Vec::new();
    write_params(&params, &mut bin)?;
    write(&c.out.join("params.bin"), &bin)?;
    for r in &history.records {
        println!("epoch {:>3}  val_acc {:.4}  loss {:.4}", r.epoch, r.val_acc, r.loss);
    }
    match history.diverged_at {
        Some(e) if history.records.is_empty() => Err(Failure::Runtime(format!("training diverged in epoch {e}"))),
        Some(e) => {
            eprintln!("warning: training diverged in epoch {e}");
            Ok(())
        }
        None => Ok(()),
    }
}

fn cost_table(r: &CostReport) -> String {
    let fit = if r.fits {
        "fits in local PE memory".to_string()
    } else {
        format!(
            "DOES NOT FIT in local PE memory ({:.0}% of weights local)",
            100.0 * r.local_fraction
        )
    };
    [
        format!("network        {}", r.network),
        format!("architecture   {}", r.arch),
        format!("rule           {}", r.rule),
        format!("samples/epoch  {}", r.samples),
        format!("fit            {fit}"),
        format!("words per PE   {:.1} of {}", r.words_per_pe, r.capacity_words),
        format!("cycles/epoch   {:.4e}", r.cycles),
        format!("time/epoch     {:.4e} s", r.seconds),
        format!("utilization    {:.1}%", 100.0 * r.utilization),
        format!("energy/epoch   {:.4e} J", r.energy_j),
        format!("  fpu          {:.4e} J", r.energy.fpu_j),
        format!("  local sram   {:.4e} J", r.energy.local_j),
        format!("  off-core     {:.4e} J", r.energy.offcore_j),
        format!("area           {:.1} mm^2", r.area_mm2),
        format!("GFLOPS/W       {:.1}", r.gflops_per_w),
        format!("GFLOPS/mm^2    {:.2}", r.gflops_per_mm2),
    ]
    .join("\n")
}

struct Check {
    name: &'static str,
    value: f64,
    expected: f64,
    tol: f64,
}

fn constant_checks(arch: &ArchConfig) -> Vec<Check> {
    let e = energy_of(1e6, 1e6, 0.0, &arch.energy).total() * 1e6;
    let bound = 2.0 / (arch.energy.fpu_pj_per_mac * 1e-12) * 1e-9;
    let overhead = arch.interconnect_overhead;
    let with = |mut a: ArchConfig| {
        a.interconnect_overhead = overhead;
        a
    };
    vec![
        Check { name: "1e6 MACs + 1e6 local words (uJ)", value: e, expected: 6.13, tol: 1e-9 },
        Check { name: "FPU-only bound (GFLOPS/W)", value: bound, expected: 760.46, tol: 0.01 },
        Check { name: "raw area 2x16x4x4 (mm^2)", value: area_raw(&ArchConfig::small()), expected: 96.8, tol: 0.05 },
        Check { name: "raw area 2x4x16x16 (mm^2)", value: area_raw(&ArchConfig::large()), expected: 153.4, tol: 0.05 },
        Check { name: "area 2x16x4x4 (mm^2)", value: area(&with(ArchConfig::small())), expected: 103.2, tol: 0.2 * 103.2 },
        Check { name: "area 2x4x16x16 (mm^2)", value: area(&with(ArchConfig::large())), expected: 178.9, tol: 0.2 * 178.9 },
    ]
}

fn cmd_cost(c: &RunConfig, paper_check: bool, dry_run: bool) -> Outcome {
    if dry_run {
        return print_json(c);
    }
    let arch = c.arch.resolve()?;
    let report = cost_report(&c.network, &arch, c.rule, c.data.train_size as u64, &c.accounting)?;
    print_json(&report)?;
    println!("{}", cost_table(&report));
    let json = serde_json::to_vec_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
    write(&c.out.join("cost.json"), &json)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["network", "arch", "rule", "fits", "cycles", "utilization", "energy_j", "area_mm2", "gflops_per_w", "gflops_per_mm2"])
        .and_then(|_| {
            w.write_record([
                report.network.clone(),
                report.arch.clone(),
                report.rule.to_string(),
                report.fits.to_string(),
                report.cycles.to_string(),
                report.utilization.to_string(),
                report.energy_j.to_string(),
                report.area_mm2.to_string(),
                report.gflops_per_w.to_string(),
                report.gflops_per_mm2.to_string(),
            ])
        })
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let bytes = w.into_inner().map_err(|e| Failure::Runtime(e.to_string()))?;
    write(&c.out.join("cost.csv"), &bytes)?;
    if !paper_check {
        return Ok(());
    }
    let fpu = cost_report(&c.network, &arch, c.rule, c.data.train_size as u64, &Accounting::fpu_only())?;
    let mut checks = constant_checks(&arch);
    checks.push(Check {
        name: "configured triple, FPU-only accounting (GFLOPS/W)",
        value: fpu.gflops_per_w,
        expected: 760.46,
        tol: 0.01,
    });
    let mut failed = 0;
    for k in &checks {
        let ok = (k.value - k.expected).abs() <= k.tol;
        failed += usize::from(!ok);
        println!(
            "{} {:<50} {:>10.4}  expected {} ± {}",
            if ok { "PASS" } else { "FAIL" },
            k.name,
            k.value,
            k.expected,
            k.tol
        );
    }
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} constant checks failed")));
    }
    Ok(())
}

fn resolve_plan(c: &RunConfig, path: Option<&Path>, max_epochs: Option<usize>, max_seeds: Option<usize>) -> std::result::Result<ExperimentPlan, Failure> {
    let mut plan = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Config(format!("cannot read plan {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Config(format!("plan {}: {e}", p.display())))?
        }
        None => c.plan.clone().unwrap_or_else(ExperimentPlan::paper_default),
    };
    if max_epochs.is_some() || max_seeds.is_some() {
        plan = plan.scaled(max_epochs.unwrap_or(usize::MAX), max_seeds.unwrap_or(usize::MAX));
    }
    plan.validate()?;
    Ok(plan)
}

fn cmd_sweep(c: &RunConfig, plan: ExperimentPlan, dry_run: bool) -> Outcome {
    if dry_run {
        return print_json(&plan);
    }
    let (train_set, val_set) = load_data(c)?;
    let out = c.out.clone();
    let results = run_plan_with(&plan, &train_set, &val_set, c.workers, &|r| {
        write_run_outputs(r, &out)?;
        eprintln!("done {} final {:.4}", r.key.file_stem(), r.history.final_accuracy());
        Ok(())
    })?;
    for p in write_outputs(&results, &c.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_check(c: &RunConfig, instances: usize, dry_run: bool) -> Outcome {
    if dry_run {
        return print_json(c);
    }
    let reports = oracle_suite(instances, c.seed)?;
    let mut failed = 0;
    for r in &reports {
        if let Some(m) = &r.first_mismatch {
            failed += 1;
            println!(
                "FAIL {} {} K={}: layer {} {} analytical {} instrumented {}",
                r.network, r.rule, r.k, m.layer, m.quantity, m.expected, m.measured
            );
        }
    }
    println!("{} of {} counter checks passed", reports.len() - failed, reports.len());
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} counter checks failed")));
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let c = load_config(&cli.global)?;
    let dry = cli.global.dry_run;
    match cli.command {
        Command::Train => cmd_train(&c, dry),
        Command::Cost { paper_check } => cmd_cost(&c, paper_check, dry),
        Command::Sweep { plan, max_epochs, max_seeds } => {
            let plan = resolve_plan(&c, plan.as_deref(), max_epochs, max_seeds)?;
            cmd_sweep(&c, plan, dry)
        }
        Command::Check { instances } => cmd_check(&c, instances, dry),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

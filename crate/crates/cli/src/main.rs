use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sparseconv_core::harness::{
    self, counter_rows, find_layer, parse_shape, plan_for, verify, write_curves_csv, write_sweep_csv, Problem,
    ProblemSpec, SweepConfig, DESK_BATCH, DESK_SCALE, FULL_BATCH, LAYERS,
};
use sparseconv_core::plan::{decompose, DEFAULT_REGISTER_BUDGET};
use sparseconv_core::projector::{load_curves, project, BatchNormMode, ProjectionConfig};
use sparseconv_core::sparsity::load_profile;
use sparseconv_core::tensor::dump_plain;
use sparseconv_core::{CheckOn, Component, ConvShape, Executor, Mode};

#[derive(Parser)]
#[command(name = "sparseconv", version, about = "Zero-skipping direct convolution kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare kernel output and counters against the dense oracle.
    Verify(VerifyArgs),
    /// Time sparse and dense mode over a sparsity grid.
    Sweep(SweepArgs),
    /// Print instrumented counters next to their analytic values.
    Counters(RunArgs),
    /// Print the kernel plan for a layer.
    PlanDump(PlanArgs),
    /// Project training time from sweep curves and a sparsity profile.
    Project(ProjectArgs),
}

#[derive(Args, Clone)]
struct ShapeArgs {
    /// Layer names from the built-in registry (comma-separated); all layers
    /// when omitted.
    #[arg(long, value_delimiter = ',')]
    layer: Vec<String>,
    /// Custom geometry `C,K,H,W,R,S,O,P[,PADW,PADH]`; overrides --layer.
    #[arg(long)]
    shape: Option<String>,
    #[arg(long)]
    minibatch: Option<usize>,
    /// Spatial downscaling factor applied to registry layers.
    #[arg(long)]
    scale: Option<usize>,
    /// Full-size layers with a minibatch of 16.
    #[arg(long)]
    full: bool,
    #[arg(long, default_value_t = 16)]
    vector_width: usize,
}

impl ShapeArgs {
    fn shapes(&self) -> anyhow::Result<Vec<(String, ConvShape)>> {
        let batch = self.minibatch.unwrap_or(if self.full { FULL_BATCH } else { DESK_BATCH });
        let scale = self.scale.unwrap_or(if self.full { 1 } else { DESK_SCALE });
        if batch == 0 {
            bail!("--minibatch must be positive");
        }
        if let Some(text) = &self.shape {
            return Ok(vec![("custom".into(), parse_shape(text, batch)?)]);
        }
        if self.layer.is_empty() {
            return Ok(LAYERS.iter().map(|l| (l.name.to_string(), l.scaled(batch, scale))).collect());
        }
        self.layer
            .iter()
            .map(|name| {
                let l = find_layer(name).with_context(|| format!("unknown layer {name:?}"))?;
                Ok((name.clone(), l.scaled(batch, scale)))
            })
            .collect()
    }
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    shape: ShapeArgs,
    /// Components to run (comma-separated); all when omitted.
    #[arg(long, value_delimiter = ',')]
    component: Vec<Component>,
    #[arg(long, default_value_t = 0.5)]
    sparsity: f64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = Mode::Sparse)]
    mode: Mode,
    /// BWW operand to zero-check; the sparser one when omitted.
    #[arg(long)]
    check_on: Option<CheckOn>,
    #[arg(long, default_value_t = DEFAULT_REGISTER_BUDGET)]
    budget: usize,
}

impl RunArgs {
    fn components(&self) -> Vec<Component> {
        if self.component.is_empty() {
            Component::ALL.to_vec()
        } else {
            self.component.clone()
        }
    }

    fn problem(&self, shape: ConvShape, component: Component) -> anyhow::Result<Problem> {
        if !(0.0..=1.0).contains(&self.sparsity) {
            bail!("--sparsity must lie in [0, 1]");
        }
        Ok(Problem::build(&ProblemSpec {
            lanes: self.shape.vector_width,
            seed: self.seed,
            register_budget: self.budget,
            check_on: self.check_on,
            ..ProblemSpec::new(shape, component, self.sparsity)
        })?)
    }
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Write operands, kernel output and reference as tensor files here.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Mislabel the second operand's layout before running.
    #[arg(long, hide = true)]
    corrupt_layout: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    shape: ShapeArgs,
    #[arg(long, value_delimiter = ',')]
    component: Vec<Component>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    grid: Vec<f64>,
    /// Modes to emit rows for; dense is always timed as the baseline.
    #[arg(long, value_delimiter = ',', default_value = "sparse")]
    mode: Vec<Mode>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    check_on: Option<CheckOn>,
    /// Sweep CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write time-versus-sparsity curves for `project`.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    shape: ShapeArgs,
    #[arg(long, value_delimiter = ',')]
    component: Vec<Component>,
    #[arg(long, default_value = "input")]
    check_on: CheckOn,
    #[arg(long, default_value_t = DEFAULT_REGISTER_BUDGET)]
    budget: usize,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    curves: PathBuf,
    #[arg(long)]
    profile: PathBuf,
    #[arg(long, default_value = "off")]
    batchnorm: BatchNormMode,
    #[arg(long, default_value_t = 0.0)]
    first_layer_ns: f64,
    /// Use only the first N profiled epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 1)]
    iters_per_epoch: u64,
    /// Breakdown CSV destination.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Ok,
    Failed,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Verify(a) => run_verify(&a),
        Command::Sweep(a) => run_sweep(&a),
        Command::Counters(a) => run_counters(&a),
        Command::PlanDump(a) => run_plan_dump(&a),
        Command::Project(a) => run_project(&a),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run_verify(args: &VerifyArgs) -> anyhow::Result<Outcome> {
    let run = &args.run;
    let exec = Executor::new(run.workers)?;
    let mut all_passed = true;
    for (name, shape) in run.shape.shapes()? {
        for component in run.components() {
            let mut problem = run.problem(shape, component)?;
            if args.corrupt_layout {
                problem.corrupt_second_layout();
            }
            let report = match verify(&problem, &exec, run.mode) {
                Ok(r) => r,
                Err(e @ sparseconv_core::Error::LayoutMismatch { .. }) => {
                    println!("FAIL {name} {component}: {e}");
                    all_passed = false;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let verdict = if report.passed() { "PASS" } else { "FAIL" };
            println!(
                "{verdict} {name} {component} check_on={} sparsity={} mode={} max_rel_err={:.3e} executed_fmas={} expected_fmas={} counters={}",
                problem.plan.check_on.tag(),
                run.sparsity,
                run.mode,
                report.max_rel_error,
                report.counters.executed_vector_fmas,
                harness::expected_counters(&report.expected, run.mode).executed_vector_fmas,
                if report.counters_match { "match" } else { "MISMATCH" },
            );
            all_passed &= report.passed();
            if let Some(dir) = &args.dump {
                let stem = format!("{}_{component}", name.replace('/', "_"));
                dump(dir, &format!("{stem}_a.sct"), &problem.plain.0)?;
                dump(dir, &format!("{stem}_b.sct"), &problem.plain.1)?;
                dump(dir, &format!("{stem}_out.sct"), &report.output)?;
                dump(dir, &format!("{stem}_ref.sct"), &report.reference)?;
            }
        }
    }
    Ok(if all_passed { Outcome::Ok } else { Outcome::Failed })
}

fn dump(dir: &Path, file: &str, t: &sparseconv_core::PlainTensor) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join(file);
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    dump_plain(&mut w, t)?;
    w.flush()?;
    Ok(())
}

fn run_counters(args: &RunArgs) -> anyhow::Result<Outcome> {
    let exec = Executor::new(args.workers)?;
    let mut all_match = true;
    for (name, shape) in args.shape.shapes()? {
        for component in args.components() {
            let problem = args.problem(shape, component)?;
            let (_, counters) = problem.run(&exec, args.mode)?;
            let expected = problem.expected_counts()?;
            let (rows, ok) = counter_rows(&counters, &expected, args.mode);
            println!(
                "{name} {component} check_on={} sparsity={} mode={}",
                problem.plan.check_on.tag(),
                args.sparsity,
                args.mode
            );
            println!("  {:<22} {:>14} {:>14}", "counter", "kernel", "expected");
            for (label, actual, wanted) in rows {
                let flag = if actual == wanted { "" } else { "  <- mismatch" };
                println!("  {label:<22} {actual:>14} {wanted:>14}{flag}");
            }
            println!("  {:<22} {:>14} {:>14}", "dense_total", "", expected.dense_total);
            println!("  {:<22} {:>14} {:>14}", "ring_peak", counters.ring_peak, problem.plan.ring_size);
            all_match &= ok;
        }
    }
    Ok(if all_match { Outcome::Ok } else { Outcome::Failed })
}

fn run_plan_dump(args: &PlanArgs) -> anyhow::Result<Outcome> {
    let components = if args.component.is_empty() {
        Component::ALL.to_vec()
    } else {
        args.component.clone()
    };
    for (name, shape) in args.shape.shapes()? {
        for &component in &components {
            let plan = plan_for(&shape, component, args.check_on, args.shape.vector_width, args.budget)?;
            println!("layer={name}");
            print!("{}", plan.to_key_values(&decompose(&shape, &plan)));
            println!();
        }
    }
    Ok(Outcome::Ok)
}

fn run_sweep(args: &SweepArgs) -> anyhow::Result<Outcome> {
    if args.grid.iter().any(|s| !(0.0..=1.0).contains(s)) {
        bail!("--grid values must lie in [0, 1]");
    }
    let config = SweepConfig {
        layers: args.shape.shapes()?,
        components: if args.component.is_empty() {
            Component::ALL.to_vec()
        } else {
            args.component.clone()
        },
        grid: args.grid.clone(),
        modes: args.mode.clone(),
        lanes: args.shape.vector_width,
        workers: args.workers,
        repeats: args.repeats,
        seed: args.seed,
        check_on: args.check_on,
    };
    let records = harness::sweep(&config, |r| {
        log::info!("{} {} s={} {}: {:.3}x", r.layer, r.component, r.sparsity, r.mode, r.speedup_vs_dense)
    })?;
    match &args.out {
        Some(path) => write_sweep_csv(create(path)?, &records)?,
        None => write_sweep_csv(io::stdout().lock(), &records)?,
    }
    if let Some(path) = &args.curves {
        write_curves_csv(create(path)?, &records)?;
    }
    Ok(Outcome::Ok)
}

fn run_project(args: &ProjectArgs) -> anyhow::Result<Outcome> {
    let curves = load_curves(&args.curves)?;
    let profile = load_profile(&args.profile)?;
    let config = ProjectionConfig {
        network: profile.network.clone(),
        batchnorm: args.batchnorm,
        first_layer_ns: args.first_layer_ns,
        epochs: args.epochs,
        iters_per_epoch: args.iters_per_epoch,
    };
    let report = project(&curves, &profile, &config)?;
    println!("{report}");
    if let Some(path) = &args.out {
        create(path)?.write_all(report.breakdown_csv().as_bytes())?;
    }
    Ok(Outcome::Ok)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}
